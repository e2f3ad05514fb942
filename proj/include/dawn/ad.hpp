#pragma once

#include <Eigen/Dense>
#include <functional>
#include <memory>
#include <vector>

namespace dawn::ad {

using Mat = Eigen::MatrixXd;

// Reverse-mode autodiff over dense matrices. Each Var owns its value and,
// when gradients are enabled, a backward closure that scatters into its
// parents' gradient buffers. Inference code wraps calls in NoGradGuard so
// no graph is retained.
struct Node;
using Var = std::shared_ptr<Node>;

struct Node {
    Mat val;
    Mat grad;  // allocated lazily by ensure_grad()
    std::vector<Var> parents;
    std::function<void(Node&)> backprop;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.size() == 0) grad = Mat::Zero(val.rows(), val.cols());
    }
};

bool grad_enabled();

struct NoGradGuard {
    bool prev;
    NoGradGuard();
    ~NoGradGuard();
};

Var constant(Mat v);
Var param(Mat v);  // leaf with requires_grad

// Runs backward from a scalar (1x1) loss, seeding d(loss)/d(loss) = 1.
void backward(const Var& loss);

// --- elementwise / broadcast ---
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var add_rowvec(const Var& a, const Var& bias);  // bias: 1 x cols
Var add_colvec(const Var& a, const Var& bias);  // bias: rows x 1
Var mul_colvec(const Var& a, const Var& s);     // s: rows x 1, broadcast over cols
Var sigmoid(const Var& a);
Var silu(const Var& a);
Var tanh_(const Var& a);
Var exp_(const Var& a);
Var square(const Var& a);
Var abs_(const Var& a);
Var softplus(const Var& a);
Var clamp_min(const Var& a, double lo);

// --- linear algebra / structure ---
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index n);
Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index n);
Var gather_rows(const Var& a, const std::vector<int>& idx);  // backward: scatter-add

// --- reductions / losses ---
Var sum(const Var& a);
Var mean_all(const Var& a);
Var mse(const Var& a, const Var& b);
// Mean of elementwise squared error weighted by a constant weight matrix.
// Normalizer is the element count (not the weight sum).
Var weighted_sq_mean(const Var& a, const Var& b, const Mat& weight);

// --- row-token ops (rows = tokens, cols = feature dims) ---
Var softmax_rows(const Var& a);
Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// Per-column normalization across rows (channel norm for (C, positions) maps).
Var layernorm_cols(const Var& x, const Var& gain, const Var& bias, double eps = 1e-5);
// Rotary embedding over even-dim rows; positions has one entry per row.
Var rope_rows(const Var& x, const std::vector<double>& positions, double base = 10000.0);

// --- convolution-style ops; feature maps are (C, frames*H*W), frame-major ---
Var conv2d(const Var& x, const Var& w, const Var& b, int H, int W, int C_in, int C_out,
           int k, int stride, int pad, int frames);
Var conv1d(const Var& x, const Var& w, const Var& b, int C_in, int C_out, int k, int stride,
           int pad);
Var avgpool2(const Var& x, int H, int W, int frames);
Var upsample2(const Var& x, int H, int W, int frames);

// Backward bilinear warp with multiplicative mask over a single latent grid:
// out(c,p) = bilinear(z_c at p+flow(p)) * mask(p), clamp-to-edge sampling.
// z: (C, H*W), flow: (2, H*W) rows {x, y} in grid pixels, mask: (1, H*W).
Var warp_bilinear(const Var& z, const Var& flow, const Var& mask, int H, int W);

}  // namespace dawn::ad
