#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dawn/ad.hpp"
#include "dawn/dten.hpp"

namespace dawn::nn {

using ad::Mat;
using ad::Var;

struct Rng {
    std::mt19937_64 gen;
    explicit Rng(std::uint64_t seed) : gen(seed) {}
    double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(gen); }
    double normal() { return std::normal_distribution<double>(0.0, 1.0)(gen); }
    int uniform_int(int lo, int hi) {  // inclusive bounds
        return std::uniform_int_distribution<int>(lo, hi)(gen);
    }
};

Mat randn(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev);

// Named parameter registry. Iteration order is insertion order so optimizer
// updates and serialization are deterministic.
struct ParamStore {
    std::vector<std::pair<std::string, Var>> params;
    std::map<std::string, std::size_t> index;

    // Returns the existing parameter when present (checkpoint load path),
    // otherwise registers a new one initialized by `init`.
    template <typename InitFn>
    Var var(const std::string& name, Eigen::Index rows, Eigen::Index cols, InitFn&& init) {
        auto it = index.find(name);
        if (it != index.end()) return params[it->second].second;
        Var v = ad::param(init(rows, cols));
        index[name] = params.size();
        params.emplace_back(name, v);
        return v;
    }

    Var get(const std::string& name) const;
    bool has(const std::string& name) const { return index.count(name) != 0; }
    void zero_grad();
    std::size_t total_count() const;

    // DTEN-archive round trip: one <name>.dten per parameter plus
    // `param = name rows cols` manifest lines appended to `kv`.
    void save(const std::filesystem::path& dir, KvFile& kv) const;
    void load(const std::filesystem::path& dir, const KvFile& kv);
    // Overwrites the values of already-registered parameters.
    void load_values(const std::filesystem::path& dir, const KvFile& kv);
};

struct Adam {
    double lr = 2e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long t = 0;
    std::vector<std::pair<Mat, Mat>> state;  // (m, v) per param

    void step(ParamStore& ps);
};

struct Linear {
    Var w, b;  // w: (in, out), b: (1, out); applied to row-token matrices
    Var operator()(const Var& x) const { return ad::add_rowvec(ad::matmul(x, w), b); }
};

Linear make_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng);

struct LayerNorm {
    Var gain, bias;
    Var operator()(const Var& x) const { return ad::layernorm_rows(x, gain, bias); }
};

LayerNorm make_layernorm(ParamStore& ps, const std::string& name, int dim);

// Channel norm for (C, positions) conv feature maps.
struct ChannelNorm {
    Var gain, bias;
    Var operator()(const Var& x) const { return ad::layernorm_cols(x, gain, bias); }
};

ChannelNorm make_channelnorm(ParamStore& ps, const std::string& name, int channels);

struct Conv2d {
    Var w, b;
    int C_in, C_out, k, stride, pad;
    Var operator()(const Var& x, int H, int W, int frames) const {
        return ad::conv2d(x, w, b, H, W, C_in, C_out, k, stride, pad, frames);
    }
};

Conv2d make_conv2d(ParamStore& ps, const std::string& name, int C_in, int C_out, int k,
                   int stride, int pad, Rng& rng);

struct Conv1d {
    Var w, b;
    int C_in, C_out, k, stride, pad;
    Var operator()(const Var& x) const {
        return ad::conv1d(x, w, b, C_in, C_out, k, stride, pad);
    }
};

Conv1d make_conv1d(ParamStore& ps, const std::string& name, int C_in, int C_out, int k,
                   int stride, int pad, Rng& rng);

// Multi-head self-attention over independent row segments of a token matrix.
//
// Window semantics: `window` counts the total attended span; query i sees keys
// j with |i - j| <= window/2 (plus `n_prefix` leading global tokens of each
// segment, which act as keys/values only and are not updated as queries).
// window <= 0 means full attention. With RoPE enabled, positions[i] gives the
// rotary position of each row.
//
// The windowed (banded) code path is inference-only; with gradients enabled
// the window must cover the whole segment.
struct MultiheadAttention {
    Linear q, k, v, o;
    int dim, heads;
    bool rope = false;
    double rope_base = 10000.0;

    Var forward_segments(const Var& x, const std::vector<std::pair<int, int>>& segments,
                         const std::vector<double>* positions, int window,
                         int n_prefix) const;
};

MultiheadAttention make_attention(ParamStore& ps, const std::string& name, int dim, int heads,
                                  bool rope, Rng& rng);

// Sinusoidal embedding of a (possibly fractional) scalar position.
Eigen::RowVectorXd sinusoidal_embedding(double t, int dim);

}  // namespace dawn::nn
