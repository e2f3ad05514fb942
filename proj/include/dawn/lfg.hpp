#pragma once

#include <cstdint>
#include <filesystem>

#include "dawn/ad.hpp"
#include "dawn/nn.hpp"
#include "dawn/synth.hpp"

namespace dawn::lfg {

using ad::Mat;
using ad::Var;
using synth::Image;

// Per-frame latent motion: dense backward-warp flow in latent-grid pixels
// plus a blocking map in [0,1]. Row layout of the packed form: {fx, fy, mask}.
struct MotionField {
    Mat flow;  // 2 x (hz*wz)
    Mat mask;  // 1 x (hz*wz)

    Mat packed() const;
    static MotionField unpack(const Mat& p);
};

struct LfgConfig {
    int res = 32;
    int hz = 8, wz = 8, cz = 32;
    int enc_w1 = 32, enc_w2 = 64;
};

struct TrainConfig {
    int steps = 3000;
    int batch = 16;
    double lr = 2e-4;
};

struct LfgModel {
    LfgConfig cfg;
    nn::ParamStore ps;
    long train_steps = 0;

    nn::Conv2d e1, e2, e3;          // encoder, 2x strided downsampling to hz x wz
    nn::Conv2d p1, p2, p3, p4;      // flow predictor on the concatenated pair
    nn::Conv2d d1, d2, d3, d4;      // mirrored decoder

    static LfgModel create(const LfgConfig& cfg, std::uint64_t seed);

    // graph-building forms (usable for training and, under NoGradGuard, inference)
    Var encode_v(const Var& frame) const;                   // (1, res^2) -> (cz, hz*wz)
    Var predict_flow_v(const Var& src, const Var& dri) const;  // -> (3, hz*wz) packed
    Var decode_v(const Var& latent) const;                  // -> (1, res^2)

    // value-level wrappers
    Mat encode(const Image& frame) const;
    MotionField predict_flow(const Image& src, const Image& dri) const;
    Image decode(const Mat& latent) const;
    Image reconstruct(const Image& src, const Image& dri) const;
};

// Exact bilinear backward warp with multiplicative mask, clamp-to-edge.
Mat warp(const Mat& latent, const MotionField& motion, int hz, int wz);

// 3-level average-pool L1 pyramid over {res, res/2, res/4}.
double multi_scale_recon_loss(const Image& a, const Image& b);
Var multi_scale_recon_loss_v(const Var& a, const Var& b, int res);

LfgModel train_lfg(const synth::CorpusManifest& manifest, const TrainConfig& cfg,
                   std::uint64_t seed, std::ostream* log = nullptr);

void save_checkpoint(const LfgModel& model, const std::filesystem::path& dir);
LfgModel load_checkpoint(const std::filesystem::path& dir);

// helpers shared with other modules
Var image_var(const Image& img);
Image image_from_row(const Mat& row, int res);

}  // namespace dawn::lfg
