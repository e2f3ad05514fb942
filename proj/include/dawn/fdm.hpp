#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>

#include "dawn/lfg.hpp"
#include "dawn/nn.hpp"
#include "dawn/synth.hpp"

namespace dawn::fdm {

using ad::Mat;
using ad::Var;
using synth::Image;

struct DiffusionSchedule {
    int T = 0;
    Eigen::VectorXd beta, alpha, alpha_bar;  // indices 0..T-1 hold steps 1..T

    // alpha_bar with the t=0 convention of 1
    double abar(int t) const { return t == 0 ? 1.0 : alpha_bar(t - 1); }
    double beta_at(int t) const { return beta(t - 1); }
    double alpha_at(int t) const { return alpha(t - 1); }
    // posterior variance of the ancestral sampler at step t
    double posterior_var(int t) const {
        return beta_at(t) * (1.0 - abar(t - 1)) / (1.0 - abar(t));
    }
};

DiffusionSchedule make_schedule(int T, double beta_min = 1e-4, double beta_max = 0.02);

// MotionSeq packed as (3, N*hz*wz), frame-major, rows {fx, fy, mask}.
Mat forward_diffuse(const Mat& z0, int t, const Mat& noise, const DiffusionSchedule& sched);

// Conditioning for one generated sequence.
struct Cond {
    Mat audio;       // N x C_a
    Mat delta_rho;   // N x 8
    Mat z_src;       // cz x (hz*wz)
    Image face_mask; // res x res binary
};

struct FdmConfig {
    int hz = 8, wz = 8, cz = 32, cm = 4, ca = 8;
    int width1 = 64, width2 = 128;
    int heads = 4;
    int window = 80;
    int temb_dim = 64;
    int T = 200;
    double beta_min = 1e-4, beta_max = 0.02;
    int kprime = 12, kmin = 16, kmax = 40;
    double w_lip = 1.0;
    int res = 32;
    int stage = 0;  // training stage reached
};

struct TrainConfig {
    int steps = 1200;
    int batch = 8;
    double lr = 2e-4;
};

// chan_ln -> conv -> (+ t-emb, + per-frame cond) -> chan_ln -> conv, residual
struct ResBlock {
    nn::ChannelNorm ln1, ln2;
    nn::Conv2d c1, c2;
    nn::Linear temb, cond;
};

struct FdmModel {
    FdmConfig cfg;
    nn::ParamStore ps;

    struct Layers {
        nn::Conv2d in_c, down, up, out;
        nn::ChannelNorm out_ln, a_saln, a_taln, b_taln;
        ResBlock ra, rb, rc;
        nn::MultiheadAttention a_sa, a_ta, b_ta;
    } L;

    DiffusionSchedule sched;
    Eigen::Vector3d stat_mean = Eigen::Vector3d::Zero();
    Eigen::Vector3d stat_std = Eigen::Vector3d::Ones();
    bool has_stats = false;
    long train_steps = 0;

    static FdmModel create(const FdmConfig& cfg, std::uint64_t seed);

    // epsilon-prediction denoiser over the whole sequence; differentiable.
    Var denoise_v(const Var& z_t, int n_frames, double t, const Cond& cond) const;
    Mat predict_noise(const Mat& z_t, int t, const Cond& cond) const;

    Mat standardize(const Mat& motion) const;
    Mat destandardize(const Mat& z) const;  // clamps mask channel to [0,1]
};

// Eq.-style loss: plain MSE plus w_lip * MSE restricted to lip-masked elements.
// lip_mask_latent: (n_frames, hz*wz) with {0,1} entries, broadcast over channels.
double fdm_loss(const Mat& eps, const Mat& eps_hat, const Mat& lip_mask_latent, double w_lip);
Var fdm_loss_v(const Var& eps_hat, const Mat& eps, const Mat& lip_mask_latent, double w_lip);

// 32->8 max-pool of a pixel lip mask (coverage-preserving).
Mat lip_mask_to_latent(const synth::MaskImage& mask, int hz, int wz);

// One TCL batch element: indices into a clip.
struct TclSample {
    int clip_index;
    int src;    // source frame index
    int start;  // window start
    int len;    // window length
};

std::vector<TclSample> tcl_sample_batch(const std::vector<synth::CorpusManifest::Entry>& clips,
                                        int stage, int batch, nn::Rng& rng,
                                        const FdmConfig& cfg);

FdmModel train_fdm(const synth::CorpusManifest& manifest, const lfg::LfgModel& lfg_model,
                   int stage, const TrainConfig& cfg, std::uint64_t seed,
                   const FdmModel* init = nullptr, std::ostream* log = nullptr);

enum class Sampler { Ddpm, Ddim };

// Non-autoregressive sampling of a whole MotionSeq in one pass.
Mat generate_motion(const FdmModel& model, const Mat& z_src, const Image& face_mask,
                    const Mat& audio, const Mat& delta_rho, Sampler sampler, int steps,
                    std::uint64_t seed);

void save_checkpoint(const FdmModel& model, const std::filesystem::path& dir);
FdmModel load_checkpoint(const std::filesystem::path& dir);

}  // namespace dawn::fdm
