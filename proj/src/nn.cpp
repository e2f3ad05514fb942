#include "dawn/nn.hpp"

#include <cmath>
#include <limits>

#include "dawn/common.hpp"

namespace dawn::nn {

Mat randn(Rng& rng, Eigen::Index rows, Eigen::Index cols, double stddev) {
    Mat m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal() * stddev;
    return m;
}

Var ParamStore::get(const std::string& name) const {
    auto it = index.find(name);
    require(it != index.end(), "unknown parameter: " + name);
    return params[it->second].second;
}

void ParamStore::zero_grad() {
    for (auto& [name, p] : params) p->grad.resize(0, 0);
}

std::size_t ParamStore::total_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : params) n += static_cast<std::size_t>(p->val.size());
    return n;
}

void ParamStore::save(const std::filesystem::path& dir, KvFile& kv) const {
    std::filesystem::create_directories(dir);
    for (const auto& [name, p] : params) {
        save_dten(dir / (name + ".dten"), tensor_from_matrix(p->val));
        kv.entries.emplace_back("param", name + " " + std::to_string(p->val.rows()) + " " +
                                             std::to_string(p->val.cols()));
    }
}

void ParamStore::load(const std::filesystem::path& dir, const KvFile& kv) {
    for (const auto& line : kv.all("param")) {
        auto sp = line.find(' ');
        std::string name = line.substr(0, sp);
        Mat m = matrix_from_tensor(load_dten(dir / (name + ".dten")));
        Var v = ad::param(std::move(m));
        index[name] = params.size();
        params.emplace_back(name, v);
    }
}

void ParamStore::load_values(const std::filesystem::path& dir, const KvFile& kv) {
    for (const auto& line : kv.all("param")) {
        auto sp = line.find(' ');
        std::string name = line.substr(0, sp);
        Var v = get(name);
        Mat m = matrix_from_tensor(load_dten(dir / (name + ".dten")));
        require(m.rows() == v->val.rows() && m.cols() == v->val.cols(),
                "checkpoint shape mismatch for " + name);
        v->val = std::move(m);
    }
}

void Adam::step(ParamStore& ps) {
    if (state.size() != ps.params.size()) {
        state.clear();
        for (const auto& [name, p] : ps.params)
            state.emplace_back(Mat::Zero(p->val.rows(), p->val.cols()),
                               Mat::Zero(p->val.rows(), p->val.cols()));
    }
    ++t;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < ps.params.size(); ++i) {
        Var& p = ps.params[i].second;
        if (p->grad.size() == 0) continue;
        auto& [m, v] = state[i];
        m = beta1 * m + (1.0 - beta1) * p->grad;
        v = (beta2 * v.array() + (1.0 - beta2) * p->grad.array().square()).matrix();
        p->val.array() -=
            lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + eps);
    }
}

Linear make_linear(ParamStore& ps, const std::string& name, int in, int out, Rng& rng) {
    double s = 1.0 / std::sqrt(static_cast<double>(in));
    Linear l;
    l.w = ps.var(name + ".w", in, out, [&](auto r, auto c) { return randn(rng, r, c, s); });
    l.b = ps.var(name + ".b", 1, out, [](auto r, auto c) { return Mat::Zero(r, c); });
    return l;
}

LayerNorm make_layernorm(ParamStore& ps, const std::string& name, int dim) {
    LayerNorm l;
    l.gain = ps.var(name + ".g", 1, dim, [](auto r, auto c) { return Mat::Ones(r, c); });
    l.bias = ps.var(name + ".b", 1, dim, [](auto r, auto c) { return Mat::Zero(r, c); });
    return l;
}

ChannelNorm make_channelnorm(ParamStore& ps, const std::string& name, int channels) {
    ChannelNorm l;
    l.gain = ps.var(name + ".g", channels, 1, [](auto r, auto c) { return Mat::Ones(r, c); });
    l.bias = ps.var(name + ".b", channels, 1, [](auto r, auto c) { return Mat::Zero(r, c); });
    return l;
}

Conv2d make_conv2d(ParamStore& ps, const std::string& name, int C_in, int C_out, int k,
                   int stride, int pad, Rng& rng) {
    double s = 1.0 / std::sqrt(static_cast<double>(C_in * k * k));
    Conv2d c;
    c.w = ps.var(name + ".w", C_out, C_in * k * k,
                 [&](auto r, auto cc) { return randn(rng, r, cc, s); });
    c.b = ps.var(name + ".b", C_out, 1, [](auto r, auto cc) { return Mat::Zero(r, cc); });
    c.C_in = C_in;
    c.C_out = C_out;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    return c;
}

Conv1d make_conv1d(ParamStore& ps, const std::string& name, int C_in, int C_out, int k,
                   int stride, int pad, Rng& rng) {
    double s = 1.0 / std::sqrt(static_cast<double>(C_in * k));
    Conv1d c;
    c.w = ps.var(name + ".w", C_out, C_in * k,
                 [&](auto r, auto cc) { return randn(rng, r, cc, s); });
    c.b = ps.var(name + ".b", C_out, 1, [](auto r, auto cc) { return Mat::Zero(r, cc); });
    c.C_in = C_in;
    c.C_out = C_out;
    c.k = k;
    c.stride = stride;
    c.pad = pad;
    return c;
}

MultiheadAttention make_attention(ParamStore& ps, const std::string& name, int dim, int heads,
                                  bool rope, Rng& rng) {
    require(dim % heads == 0, "attention dim must divide heads");
    require((dim / heads) % 2 == 0, "head dim must be even for rope");
    MultiheadAttention a;
    a.q = make_linear(ps, name + ".q", dim, dim, rng);
    a.k = make_linear(ps, name + ".k", dim, dim, rng);
    a.v = make_linear(ps, name + ".v", dim, dim, rng);
    a.o = make_linear(ps, name + ".o", dim, dim, rng);
    a.dim = dim;
    a.heads = heads;
    a.rope = rope;
    return a;
}

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

void softmax_rows_inplace(Mat& s) {
    for (Eigen::Index i = 0; i < s.rows(); ++i) {
        double mx = kNegInf;
        for (Eigen::Index j = 0; j < s.cols(); ++j) mx = std::max(mx, s(i, j));
        double sum = 0;
        for (Eigen::Index j = 0; j < s.cols(); ++j) {
            double e = s(i, j) == kNegInf ? 0.0 : std::exp(s(i, j) - mx);
            s(i, j) = e;
            sum += e;
        }
        s.row(i) /= sum;
    }
}

}  // namespace

Var MultiheadAttention::forward_segments(const Var& x,
                                         const std::vector<std::pair<int, int>>& segments,
                                         const std::vector<double>* positions, int window,
                                         int n_prefix) const {
    require(!rope || positions != nullptr, "rope attention needs positions");
    Var Q = q(x), K = k(x), V = v(x);
    if (rope) {
        Q = ad::rope_rows(Q, *positions, rope_base);
        K = ad::rope_rows(K, *positions, rope_base);
    }
    const int dh = dim / heads;
    const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
    const bool differentiable = ad::grad_enabled();

    if (differentiable) {
        std::vector<Var> rows;
        for (auto [s, L] : segments) {
            const int g = n_prefix;
            const int Ls = L - g;
            const int r = window <= 0 ? Ls : window / 2;
            require(r >= Ls - 1,
                    "windowed attention narrower than the segment is inference-only");
            if (g > 0) rows.push_back(ad::constant(Mat::Zero(g, dim)));
            Var Qs = ad::slice_rows(Q, s + g, Ls);
            Var Ks = ad::slice_rows(K, s, L);
            Var Vs = ad::slice_rows(V, s, L);
            std::vector<Var> head_outs;
            for (int h = 0; h < heads; ++h) {
                Var qh = ad::slice_cols(Qs, h * dh, dh);
                Var kh = ad::slice_cols(Ks, h * dh, dh);
                Var vh = ad::slice_cols(Vs, h * dh, dh);
                Var scores = ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt);
                Var att = ad::softmax_rows(scores);
                head_outs.push_back(ad::matmul(att, vh));
            }
            rows.push_back(o(ad::concat_cols(head_outs)));
        }
        return ad::concat_rows(rows);
    }

    // numeric path (inference): banded local attention, exact masking
    Mat Y = Mat::Zero(x->val.rows(), dim);
    Mat hcat(1, dim);
    for (auto [s, L] : segments) {
        const int g = n_prefix;
        const int Ls = L - g;
        const int r = window <= 0 ? Ls : window / 2;
        hcat.resize(Ls, dim);
        for (int h = 0; h < heads; ++h) {
            auto Qh = Q->val.block(s + g, h * dh, Ls, dh);
            auto Kh = K->val.block(s, h * dh, L, dh);
            auto Vh = V->val.block(s, h * dh, L, dh);
            if (r >= Ls - 1) {
                Mat S = (Qh * Kh.transpose()) * inv_sqrt;
                softmax_rows_inplace(S);
                hcat.middleCols(h * dh, dh).noalias() = S * Vh;
            } else {
                const int band = 2 * r + 1;
                Mat S = Mat::Constant(Ls, g + band, kNegInf);
                if (g > 0)
                    S.leftCols(g) = (Qh * Kh.topRows(g).transpose()) * inv_sqrt;
                for (int d = -r; d <= r; ++d) {
                    const int qlo = std::max(0, -d);
                    const int qhi = Ls - 1 - std::max(0, d);
                    const int len = qhi - qlo + 1;
                    if (len <= 0) continue;
                    S.block(qlo, g + d + r, len, 1) =
                        (Qh.middleRows(qlo, len).cwiseProduct(
                             Kh.middleRows(g + qlo + d, len)))
                            .rowwise()
                            .sum() *
                        inv_sqrt;
                }
                softmax_rows_inplace(S);
                Mat out = Mat::Zero(Ls, dh);
                for (int p = 0; p < g; ++p)
                    out.noalias() += S.col(p) * Vh.row(p);
                for (int d = -r; d <= r; ++d) {
                    const int qlo = std::max(0, -d);
                    const int qhi = Ls - 1 - std::max(0, d);
                    const int len = qhi - qlo + 1;
                    if (len <= 0) continue;
                    out.middleRows(qlo, len).array() +=
                        Vh.middleRows(g + qlo + d, len).array().colwise() *
                        S.block(qlo, g + d + r, len, 1).col(0).array();
                }
                hcat.middleCols(h * dh, dh) = out;
            }
        }
        Y.middleRows(s + g, Ls) = hcat * o.w->val;
        Y.middleRows(s + g, Ls).rowwise() += o.b->val.row(0);
    }
    return ad::constant(std::move(Y));
}

Eigen::RowVectorXd sinusoidal_embedding(double t, int dim) {
    Eigen::RowVectorXd e(dim);
    const int half = dim / 2;
    for (int k = 0; k < half; ++k) {
        double w = std::pow(10000.0, -static_cast<double>(k) / half);
        e(2 * k) = std::sin(t * w);
        e(2 * k + 1) = std::cos(t * w);
    }
    if (dim % 2) e(dim - 1) = 0.0;
    return e;
}

}  // namespace dawn::nn
