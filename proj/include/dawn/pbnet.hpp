#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>

#include "dawn/nn.hpp"
#include "dawn/synth.hpp"

namespace dawn::pbnet {

using ad::Mat;
using ad::Var;
using synth::PoseBlink;

struct PbConfig {
    int ch = 16;      // latent channels per position
    int ca = 8;       // audio feature channels
    int width = 64;
    int heads = 4;
    int enc_layers = 2, dec_layers = 2;
    int window = 400;    // decoder local-attention span
    int train_len = 200;
    double lambda_rec = 1.0, lambda_gan = 0.6, lambda_kl_max = 0.01;
};

struct TrainConfig {
    int steps = 3000;
    int batch = 8;
    double lr = 2e-4;
};

// pre-LN transformer block; the source token rides the residual stream and
// participates in attention as key/value only
struct Block {
    nn::LayerNorm ln1, ln2;
    nn::MultiheadAttention attn;
    nn::Linear m1, m2;
};

struct PbModel {
    PbConfig cfg;
    nn::ParamStore ps;   // encoder + decoder
    nn::ParamStore dps;  // discriminator
    long train_steps = 0;

    nn::Linear enc_in, enc_src, mu_head, logsig_head;
    std::vector<Block> enc;
    nn::Linear dec_in, dec_src, dec_out;
    // Blink events are too sparse for the plain regression head to reproduce
    // from prior latents, so the EAR columns get a structured head: a scalar
    // readout, smoothed over 3 frames and gated by a sigmoid, subtracts a
    // learned dip depth from the smooth EAR baseline.
    nn::Linear blink_head;
    Var blink_depth;  // (1, 2), through softplus
    std::vector<Block> dec;
    nn::Conv1d d1, d2, d3;

    static PbModel create(const PbConfig& cfg, std::uint64_t seed);

    // graph-building forms
    std::pair<Var, Var> encode_v(const PoseBlink& rho_src, const Var& delta_rho,
                                 const Mat& audio) const;
    // detach_blink cuts the gradient into the blink gate; used for the
    // adversarial generator term so the GAN cannot collapse the gate (its
    // sigmoid saturates and reconstruction cannot reopen it afterwards)
    Var decode_v(const PoseBlink& rho_src, const Var& h, const Mat& audio,
                 bool detach_blink = false) const;
    Var decode_body_v(const PoseBlink& rho_src, const Var& h, const Mat& audio) const;
    Var gate_v(const Var& body) const;  // (N, 1) blink gate in (0, 1)
    Var disc_v(const Var& delta_rho) const;  // patch logits (1, n_patches)
};

// value-level API
std::pair<Mat, Mat> pb_encode(const PbModel& m, const PoseBlink& rho_src, const Mat& delta_rho,
                              const Mat& audio);
Mat pb_sample_latent(const Mat& mu, const Mat& log_sigma, std::uint64_t seed);
Mat pb_decode(const PbModel& m, const Mat& h, const Mat& audio, const PoseBlink& rho_src);
// absolute pose/blink sequence: rho_src + decoded residual, EAR clamped to (0,1]
Mat pb_generate(const PbModel& m, const PoseBlink& rho_src, const Mat& audio,
                std::uint64_t seed);

struct PbLosses {
    double mse, kl, gan_g, gan_d;
};

struct PbBatchItem {
    PoseBlink rho_src;
    Mat delta_rho;  // N x 8
    Mat audio;      // N x ca
};

PbLosses pb_losses(const PbModel& m, const PbBatchItem& item, std::uint64_t seed);

// KL(q || N(0,I)) per position/dim mean; closed form.
Var kl_loss_v(const Var& mu, const Var& log_sigma);
// BCE-with-logits against a constant target, mean over patches.
Var bce_logits_v(const Var& logits, double target);

// 0 for the first quarter of training, then linear to lambda_kl_max at the end
double pb_lambda_kl(long step, long total_steps, double lambda_max = 0.01);

PbModel train_pbnet(const synth::CorpusManifest& manifest, const TrainConfig& cfg,
                    std::uint64_t seed, std::ostream* log = nullptr);

void save_checkpoint(const PbModel& m, const std::filesystem::path& dir);
PbModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace dawn::pbnet
