#include "dawn/ad.hpp"

#include <cmath>

#include "dawn/common.hpp"

namespace dawn::ad {

namespace {

thread_local bool g_grad_enabled = true;

Var make(Mat v, std::vector<Var> parents, std::function<void(Node&)> bp) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    if (g_grad_enabled) {
        bool rg = false;
        for (const auto& p : parents) rg = rg || p->requires_grad;
        if (rg) {
            n->parents = std::move(parents);
            n->backprop = std::move(bp);
            n->requires_grad = true;
        }
    }
    return n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev; }

Var constant(Mat v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    return n;
}

Var param(Mat v) {
    auto n = std::make_shared<Node>();
    n->val = std::move(v);
    n->requires_grad = true;
    return n;
}

void backward(const Var& loss) {
    require(loss->val.size() == 1, "backward expects a scalar loss");
    // iterative post-order DFS for a topological ordering
    std::vector<Node*> topo;
    std::vector<std::pair<Node*, std::size_t>> stack;
    std::vector<Node*> seen;
    auto visited = [&](Node* n) {
        for (auto* s : seen)
            if (s == n) return true;
        return false;
    };
    // use a hash-ish set; graphs can have thousands of nodes
    struct PtrSet {
        std::vector<Node*> buckets[1024];
        bool insert(Node* n) {
            auto& b = buckets[(reinterpret_cast<std::uintptr_t>(n) >> 4) & 1023];
            for (auto* x : b)
                if (x == n) return false;
            b.push_back(n);
            return true;
        }
    };
    static_cast<void>(visited);
    PtrSet set;
    if (set.insert(loss.get())) stack.emplace_back(loss.get(), 0);
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && set.insert(p)) stack.emplace_back(p, 0);
        } else {
            topo.push_back(node);
            stack.pop_back();
        }
    }
    loss->ensure_grad();
    loss->grad(0, 0) = 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        Node* n = *it;
        if (n->backprop && n->grad.size() != 0) n->backprop(*n);
    }
}

// ---------------------------------------------------------------------------
// elementwise / broadcast
// ---------------------------------------------------------------------------

Var add(const Var& a, const Var& b) {
    return make(a->val + b->val, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad += n.grad;
        }
    });
}

Var sub(const Var& a, const Var& b) {
    return make(a->val - b->val, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad -= n.grad;
        }
    });
}

Var mul(const Var& a, const Var& b) {
    return make(a->val.cwiseProduct(b->val), {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad.cwiseProduct(n.parents[1]->val);
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad += n.grad.cwiseProduct(n.parents[0]->val);
        }
    });
}

Var scale(const Var& a, double s) {
    return make(a->val * s, {a}, [s](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad * s;
    });
}

Var add_scalar(const Var& a, double s) {
    return make(a->val.array() + s, {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad;
    });
}

Var add_rowvec(const Var& a, const Var& bias) {
    Mat v = a->val;
    v.rowwise() += bias->val.row(0);
    return make(std::move(v), {a, bias}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.row(0) += n.grad.colwise().sum();
        }
    });
}

Var add_colvec(const Var& a, const Var& bias) {
    Mat v = a->val;
    v.colwise() += bias->val.col(0);
    return make(std::move(v), {a, bias}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += n.grad;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.col(0) += n.grad.rowwise().sum();
        }
    });
}

Var mul_colvec(const Var& a, const Var& s) {
    Mat v = a->val.array().colwise() * s->val.col(0).array();
    return make(std::move(v), {a, s}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad.array() += n.grad.array().colwise() * n.parents[1]->val.col(0).array();
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.col(0) +=
                n.grad.cwiseProduct(n.parents[0]->val).rowwise().sum();
        }
    });
}

Var sigmoid(const Var& a) {
    Mat y = (1.0 / (1.0 + (-a->val.array()).exp())).matrix();
    return make(y, {a}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad.array() * y.array() * (1.0 - y.array());
    });
}

Var silu(const Var& a) {
    Eigen::ArrayXXd s = 1.0 / (1.0 + (-a->val.array()).exp());
    Mat y = (a->val.array() * s).matrix();
    Mat d = (s * (1.0 + a->val.array() * (1.0 - s))).matrix();
    return make(std::move(y), {a}, [d](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad.array() * d.array();
    });
}

Var tanh_(const Var& a) {
    Mat y = a->val.array().tanh().matrix();
    return make(y, {a}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad.array() * (1.0 - y.array().square());
    });
}

Var exp_(const Var& a) {
    Mat y = a->val.array().exp().matrix();
    return make(y, {a}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad.array() * y.array();
    });
}

Var square(const Var& a) {
    return make(a->val.array().square().matrix(), {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += 2.0 * n.grad.array() * n.parents[0]->val.array();
    });
}

Var abs_(const Var& a) {
    return make(a->val.array().abs().matrix(), {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() +=
            n.grad.array() * n.parents[0]->val.array().sign();
    });
}

Var softplus(const Var& a) {
    Eigen::ArrayXXd x = a->val.array();
    Mat y = (x.max(0.0) + (1.0 + (-x.abs()).exp()).log()).matrix();
    return make(std::move(y), {a}, [](Node& n) {
        Eigen::ArrayXXd s = 1.0 / (1.0 + (-n.parents[0]->val.array()).exp());
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad.array() * s;
    });
}

Var clamp_min(const Var& a, double lo) {
    Mat y = a->val.array().max(lo).matrix();
    return make(std::move(y), {a}, [lo](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() +=
            n.grad.array() * (n.parents[0]->val.array() > lo).cast<double>();
    });
}

// ---------------------------------------------------------------------------
// linear algebra / structure
// ---------------------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
    require(a->val.cols() == b->val.rows(), "matmul shape mismatch");
    return make(a->val * b->val, {a, b}, [](Node& n) {
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad.noalias() += n.grad * n.parents[1]->val.transpose();
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.noalias() += n.parents[0]->val.transpose() * n.grad;
        }
    });
}

Var transpose(const Var& a) {
    return make(a->val.transpose(), {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad += n.grad.transpose();
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    Eigen::Index rows = 0;
    for (const auto& p : parts) rows += p->val.rows();
    Mat v(rows, parts[0]->val.cols());
    Eigen::Index r = 0;
    for (const auto& p : parts) {
        v.middleRows(r, p->val.rows()) = p->val;
        r += p->val.rows();
    }
    return make(std::move(v), parts, [](Node& n) {
        Eigen::Index r = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad += n.grad.middleRows(r, p->val.rows());
            }
            r += p->val.rows();
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    Eigen::Index cols = 0;
    for (const auto& p : parts) cols += p->val.cols();
    Mat v(parts[0]->val.rows(), cols);
    Eigen::Index c = 0;
    for (const auto& p : parts) {
        v.middleCols(c, p->val.cols()) = p->val;
        c += p->val.cols();
    }
    return make(std::move(v), parts, [](Node& n) {
        Eigen::Index c = 0;
        for (auto& p : n.parents) {
            if (p->requires_grad) {
                p->ensure_grad();
                p->grad += n.grad.middleCols(c, p->val.cols());
            }
            c += p->val.cols();
        }
    });
}

Var slice_rows(const Var& a, Eigen::Index r0, Eigen::Index n_rows) {
    return make(a->val.middleRows(r0, n_rows), {a}, [r0, n_rows](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.middleRows(r0, n_rows) += n.grad;
    });
}

Var slice_cols(const Var& a, Eigen::Index c0, Eigen::Index n_cols) {
    return make(a->val.middleCols(c0, n_cols), {a}, [c0, n_cols](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.middleCols(c0, n_cols) += n.grad;
    });
}

Var gather_rows(const Var& a, const std::vector<int>& idx) {
    Mat v(static_cast<Eigen::Index>(idx.size()), a->val.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) v.row(static_cast<Eigen::Index>(i)) = a->val.row(idx[i]);
    return make(std::move(v), {a}, [idx](Node& n) {
        n.parents[0]->ensure_grad();
        for (std::size_t i = 0; i < idx.size(); ++i)
            n.parents[0]->grad.row(idx[i]) += n.grad.row(static_cast<Eigen::Index>(i));
    });
}

// ---------------------------------------------------------------------------
// reductions / losses
// ---------------------------------------------------------------------------

Var sum(const Var& a) {
    Mat v(1, 1);
    v(0, 0) = a->val.sum();
    return make(std::move(v), {a}, [](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad(0, 0);
    });
}

Var mean_all(const Var& a) {
    Mat v(1, 1);
    v(0, 0) = a->val.mean();
    double inv = 1.0 / static_cast<double>(a->val.size());
    return make(std::move(v), {a}, [inv](Node& n) {
        n.parents[0]->ensure_grad();
        n.parents[0]->grad.array() += n.grad(0, 0) * inv;
    });
}

Var mse(const Var& a, const Var& b) {
    require(a->val.rows() == b->val.rows() && a->val.cols() == b->val.cols(),
            "mse shape mismatch");
    Mat diff = a->val - b->val;
    Mat v(1, 1);
    v(0, 0) = diff.array().square().mean();
    double inv = 2.0 / static_cast<double>(diff.size());
    return make(std::move(v), {a, b}, [inv](Node& n) {
        Mat d = (n.parents[0]->val - n.parents[1]->val) * (inv * n.grad(0, 0));
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += d;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad -= d;
        }
    });
}

Var weighted_sq_mean(const Var& a, const Var& b, const Mat& weight) {
    Mat diff = a->val - b->val;
    Mat v(1, 1);
    v(0, 0) = (weight.array() * diff.array().square()).mean();
    double inv = 2.0 / static_cast<double>(diff.size());
    return make(std::move(v), {a, b}, [inv, weight](Node& n) {
        Mat d = weight.cwiseProduct(n.parents[0]->val - n.parents[1]->val) * (inv * n.grad(0, 0));
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            n.parents[0]->grad += d;
        }
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad -= d;
        }
    });
}

// ---------------------------------------------------------------------------
// row-token ops
// ---------------------------------------------------------------------------

Var softmax_rows(const Var& a) {
    Mat y = a->val;
    for (Eigen::Index i = 0; i < y.rows(); ++i) {
        Eigen::Array<double, 1, Eigen::Dynamic> r = y.row(i).array();
        r -= r.maxCoeff();
        r = r.exp();
        y.row(i) = (r / r.sum()).matrix();
    }
    return make(y, {a}, [y](Node& n) {
        n.parents[0]->ensure_grad();
        for (Eigen::Index i = 0; i < y.rows(); ++i) {
            double dot = n.grad.row(i).dot(y.row(i));
            n.parents[0]->grad.row(i).array() +=
                y.row(i).array() * (n.grad.row(i).array() - dot);
        }
    });
}

Var layernorm_rows(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Eigen::Index d = x->val.cols();
    Mat xhat(x->val.rows(), d);
    Eigen::VectorXd inv_std(x->val.rows());
    for (Eigen::Index i = 0; i < x->val.rows(); ++i) {
        double mu = x->val.row(i).mean();
        Eigen::Array<double, 1, Eigen::Dynamic> c = x->val.row(i).array() - mu;
        double var = c.square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(i) = is;
        xhat.row(i) = (c * is).matrix();
    }
    Mat y = xhat;
    y.array().rowwise() *= gain->val.row(0).array();
    y.rowwise() += bias->val.row(0);
    return make(std::move(y), {x, gain, bias}, [xhat, inv_std, d](Node& n) {
        const Mat& g = n.grad;
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.row(0) += (g.array() * xhat.array()).colwise().sum().matrix();
        }
        if (n.parents[2]->requires_grad) {
            n.parents[2]->ensure_grad();
            n.parents[2]->grad.row(0) += g.colwise().sum();
        }
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            const Eigen::Array<double, 1, Eigen::Dynamic> gw =
                n.parents[1]->val.row(0).array();
            for (Eigen::Index i = 0; i < g.rows(); ++i) {
                Eigen::Array<double, 1, Eigen::Dynamic> dxhat = g.row(i).array() * gw;
                double m1 = dxhat.mean();
                double m2 = (dxhat * xhat.row(i).array()).mean();
                n.parents[0]->grad.row(i).array() +=
                    inv_std(i) * (dxhat - m1 - xhat.row(i).array() * m2);
            }
        }
        static_cast<void>(d);
    });
}

Var layernorm_cols(const Var& x, const Var& gain, const Var& bias, double eps) {
    const Eigen::Index c = x->val.rows();
    Mat xhat(c, x->val.cols());
    Eigen::VectorXd inv_std(x->val.cols());
    for (Eigen::Index j = 0; j < x->val.cols(); ++j) {
        double mu = x->val.col(j).mean();
        Eigen::ArrayXd d = x->val.col(j).array() - mu;
        double var = d.square().mean();
        double is = 1.0 / std::sqrt(var + eps);
        inv_std(j) = is;
        xhat.col(j) = (d * is).matrix();
    }
    Mat y = xhat;
    y.array().colwise() *= gain->val.col(0).array();
    y.colwise() += bias->val.col(0);
    return make(std::move(y), {x, gain, bias}, [xhat, inv_std, c](Node& n) {
        const Mat& g = n.grad;
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.col(0) += (g.array() * xhat.array()).rowwise().sum().matrix();
        }
        if (n.parents[2]->requires_grad) {
            n.parents[2]->ensure_grad();
            n.parents[2]->grad.col(0) += g.rowwise().sum();
        }
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            const Eigen::ArrayXd gw = n.parents[1]->val.col(0).array();
            for (Eigen::Index j = 0; j < g.cols(); ++j) {
                Eigen::ArrayXd dxhat = g.col(j).array() * gw;
                double m1 = dxhat.mean();
                double m2 = (dxhat * xhat.col(j).array()).mean();
                n.parents[0]->grad.col(j).array() +=
                    inv_std(j) * (dxhat - m1 - xhat.col(j).array() * m2);
            }
        }
        static_cast<void>(c);
    });
}

namespace {

void rope_apply(const Mat& x, Mat& y, const std::vector<double>& positions, double base,
                double sign) {
    const Eigen::Index d = x.cols();
    const Eigen::Index half = d / 2;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double p = positions[static_cast<std::size_t>(i)] * sign;
        for (Eigen::Index k = 0; k < half; ++k) {
            double theta = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
            double a = p * theta;
            double c = std::cos(a), s = std::sin(a);
            double x0 = x(i, 2 * k), x1 = x(i, 2 * k + 1);
            y(i, 2 * k) = x0 * c - x1 * s;
            y(i, 2 * k + 1) = x0 * s + x1 * c;
        }
    }
}

}  // namespace

Var rope_rows(const Var& x, const std::vector<double>& positions, double base) {
    require(x->val.cols() % 2 == 0, "rope requires even feature dimension");
    require(static_cast<Eigen::Index>(positions.size()) == x->val.rows(),
            "rope positions length mismatch");
    Mat y(x->val.rows(), x->val.cols());
    rope_apply(x->val, y, positions, base, 1.0);
    return make(std::move(y), {x}, [positions, base](Node& n) {
        n.parents[0]->ensure_grad();
        Mat gy(n.grad.rows(), n.grad.cols());
        rope_apply(n.grad, gy, positions, base, -1.0);
        n.parents[0]->grad += gy;
    });
}

// ---------------------------------------------------------------------------
// convolutions
// ---------------------------------------------------------------------------

namespace {

struct ConvGeom {
    int H, W, C_in, C_out, k, stride, pad, frames, Ho, Wo;
};

void im2col(const Mat& x, Mat& col, const ConvGeom& g) {
    const int hw = g.H * g.W;
    const int howo = g.Ho * g.Wo;
    col.setZero();
    for (int f = 0; f < g.frames; ++f) {
        for (int oi = 0; oi < g.Ho; ++oi) {
            for (int oj = 0; oj < g.Wo; ++oj) {
                const int oc = f * howo + oi * g.Wo + oj;
                for (int ki = 0; ki < g.k; ++ki) {
                    const int ii = oi * g.stride - g.pad + ki;
                    if (ii < 0 || ii >= g.H) continue;
                    for (int kj = 0; kj < g.k; ++kj) {
                        const int jj = oj * g.stride - g.pad + kj;
                        if (jj < 0 || jj >= g.W) continue;
                        const int src = f * hw + ii * g.W + jj;
                        for (int c = 0; c < g.C_in; ++c)
                            col(c * g.k * g.k + ki * g.k + kj, oc) = x(c, src);
                    }
                }
            }
        }
    }
}

void col2im_add(const Mat& dcol, Mat& dx, const ConvGeom& g) {
    const int hw = g.H * g.W;
    const int howo = g.Ho * g.Wo;
    for (int f = 0; f < g.frames; ++f) {
        for (int oi = 0; oi < g.Ho; ++oi) {
            for (int oj = 0; oj < g.Wo; ++oj) {
                const int oc = f * howo + oi * g.Wo + oj;
                for (int ki = 0; ki < g.k; ++ki) {
                    const int ii = oi * g.stride - g.pad + ki;
                    if (ii < 0 || ii >= g.H) continue;
                    for (int kj = 0; kj < g.k; ++kj) {
                        const int jj = oj * g.stride - g.pad + kj;
                        if (jj < 0 || jj >= g.W) continue;
                        const int dst = f * hw + ii * g.W + jj;
                        for (int c = 0; c < g.C_in; ++c)
                            dx(c, dst) += dcol(c * g.k * g.k + ki * g.k + kj, oc);
                    }
                }
            }
        }
    }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int H, int W, int C_in, int C_out, int k,
           int stride, int pad, int frames) {
    require(x->val.rows() == C_in && x->val.cols() == static_cast<Eigen::Index>(frames) * H * W,
            "conv2d input shape mismatch");
    ConvGeom g{H, W, C_in, C_out, k, stride, pad, frames,
               (H + 2 * pad - k) / stride + 1, (W + 2 * pad - k) / stride + 1};
    Mat col(C_in * k * k, static_cast<Eigen::Index>(frames) * g.Ho * g.Wo);
    im2col(x->val, col, g);
    Mat y = w->val * col;
    y.colwise() += b->val.col(0);
    // col is recomputed in backward instead of captured; inputs stay alive as parents
    return make(std::move(y), {x, w, b}, [g](Node& n) {
        Mat col(g.C_in * g.k * g.k, static_cast<Eigen::Index>(g.frames) * g.Ho * g.Wo);
        im2col(n.parents[0]->val, col, g);
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.noalias() += n.grad * col.transpose();
        }
        if (n.parents[2]->requires_grad) {
            n.parents[2]->ensure_grad();
            n.parents[2]->grad.col(0) += n.grad.rowwise().sum();
        }
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            Mat dcol = n.parents[1]->val.transpose() * n.grad;
            col2im_add(dcol, n.parents[0]->grad, g);
        }
    });
}

Var conv1d(const Var& x, const Var& w, const Var& b, int C_in, int C_out, int k, int stride,
           int pad) {
    const int N = static_cast<int>(x->val.cols());
    const int No = (N + 2 * pad - k) / stride + 1;
    require(No >= 1, "conv1d output collapsed to zero length");
    auto build_col = [=](const Mat& src) {
        Mat col = Mat::Zero(C_in * k, No);
        for (int o = 0; o < No; ++o)
            for (int ki = 0; ki < k; ++ki) {
                int j = o * stride - pad + ki;
                if (j < 0 || j >= N) continue;
                for (int c = 0; c < C_in; ++c) col(c * k + ki, o) = src(c, j);
            }
        return col;
    };
    Mat col = build_col(x->val);
    Mat y = w->val * col;
    y.colwise() += b->val.col(0);
    return make(std::move(y), {x, w, b}, [=](Node& n) {
        Mat col = build_col(n.parents[0]->val);
        if (n.parents[1]->requires_grad) {
            n.parents[1]->ensure_grad();
            n.parents[1]->grad.noalias() += n.grad * col.transpose();
        }
        if (n.parents[2]->requires_grad) {
            n.parents[2]->ensure_grad();
            n.parents[2]->grad.col(0) += n.grad.rowwise().sum();
        }
        if (n.parents[0]->requires_grad) {
            n.parents[0]->ensure_grad();
            Mat dcol = n.parents[1]->val.transpose() * n.grad;
            for (int o = 0; o < No; ++o)
                for (int ki = 0; ki < k; ++ki) {
                    int j = o * stride - pad + ki;
                    if (j < 0 || j >= N) continue;
                    for (int c = 0; c < C_in; ++c)
                        n.parents[0]->grad(c, j) += dcol(c * k + ki, o);
                }
        }
        static_cast<void>(C_out);
    });
}

Var avgpool2(const Var& x, int H, int W, int frames) {
    const int C = static_cast<int>(x->val.rows());
    const int Ho = H / 2, Wo = W / 2;
    Mat y(C, static_cast<Eigen::Index>(frames) * Ho * Wo);
    for (int f = 0; f < frames; ++f)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j) {
                int base = f * H * W + 2 * i * W + 2 * j;
                y.col(f * Ho * Wo + i * Wo + j) =
                    0.25 * (x->val.col(base) + x->val.col(base + 1) + x->val.col(base + W) +
                            x->val.col(base + W + 1));
            }
    return make(std::move(y), {x}, [=](Node& n) {
        n.parents[0]->ensure_grad();
        for (int f = 0; f < frames; ++f)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j) {
                    int base = f * H * W + 2 * i * W + 2 * j;
                    Eigen::VectorXd g = 0.25 * n.grad.col(f * Ho * Wo + i * Wo + j);
                    n.parents[0]->grad.col(base) += g;
                    n.parents[0]->grad.col(base + 1) += g;
                    n.parents[0]->grad.col(base + W) += g;
                    n.parents[0]->grad.col(base + W + 1) += g;
                }
    });
}

Var upsample2(const Var& x, int H, int W, int frames) {
    const int C = static_cast<int>(x->val.rows());
    const int Ho = H * 2, Wo = W * 2;
    Mat y(C, static_cast<Eigen::Index>(frames) * Ho * Wo);
    for (int f = 0; f < frames; ++f)
        for (int i = 0; i < Ho; ++i)
            for (int j = 0; j < Wo; ++j)
                y.col(f * Ho * Wo + i * Wo + j) = x->val.col(f * H * W + (i / 2) * W + j / 2);
    return make(std::move(y), {x}, [=](Node& n) {
        n.parents[0]->ensure_grad();
        for (int f = 0; f < frames; ++f)
            for (int i = 0; i < Ho; ++i)
                for (int j = 0; j < Wo; ++j)
                    n.parents[0]->grad.col(f * H * W + (i / 2) * W + j / 2) +=
                        n.grad.col(f * Ho * Wo + i * Wo + j);
    });
}

// ---------------------------------------------------------------------------
// bilinear warp
// ---------------------------------------------------------------------------

namespace {

struct WarpSample {
    int x0, x1, y0, y1;
    double wx, wy;
    bool clamped_x, clamped_y;
};

WarpSample warp_geom(double fx, double fy, int i, int j, int H, int W) {
    WarpSample s;
    double sx = j + fx, sy = i + fy;
    s.clamped_x = sx <= 0.0 || sx >= W - 1.0;
    s.clamped_y = sy <= 0.0 || sy >= H - 1.0;
    sx = std::min(std::max(sx, 0.0), static_cast<double>(W - 1));
    sy = std::min(std::max(sy, 0.0), static_cast<double>(H - 1));
    s.x0 = static_cast<int>(std::floor(sx));
    s.y0 = static_cast<int>(std::floor(sy));
    if (s.x0 == W - 1) s.x0 = W - 2 >= 0 ? W - 2 : 0;
    if (s.y0 == H - 1) s.y0 = H - 2 >= 0 ? H - 2 : 0;
    s.x1 = std::min(s.x0 + 1, W - 1);
    s.y1 = std::min(s.y0 + 1, H - 1);
    s.wx = sx - s.x0;
    s.wy = sy - s.y0;
    return s;
}

}  // namespace

Var warp_bilinear(const Var& z, const Var& flow, const Var& mask, int H, int W) {
    const int C = static_cast<int>(z->val.rows());
    require(z->val.cols() == H * W && flow->val.rows() == 2 &&
                flow->val.cols() == H * W && mask->val.cols() == H * W,
            "warp shape mismatch");
    Mat y(C, H * W);
    for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
            const int p = i * W + j;
            WarpSample s = warp_geom(flow->val(0, p), flow->val(1, p), i, j, H, W);
            const double m = mask->val(0, p);
            for (int c = 0; c < C; ++c) {
                double v = (1 - s.wy) * ((1 - s.wx) * z->val(c, s.y0 * W + s.x0) +
                                         s.wx * z->val(c, s.y0 * W + s.x1)) +
                           s.wy * ((1 - s.wx) * z->val(c, s.y1 * W + s.x0) +
                                   s.wx * z->val(c, s.y1 * W + s.x1));
                y(c, p) = v * m;
            }
        }
    return make(std::move(y), {z, flow, mask}, [H, W, C](Node& n) {
        const Mat& zv = n.parents[0]->val;
        const Mat& fv = n.parents[1]->val;
        const Mat& mv = n.parents[2]->val;
        const bool gz = n.parents[0]->requires_grad;
        const bool gf = n.parents[1]->requires_grad;
        const bool gm = n.parents[2]->requires_grad;
        if (gz) n.parents[0]->ensure_grad();
        if (gf) n.parents[1]->ensure_grad();
        if (gm) n.parents[2]->ensure_grad();
        for (int i = 0; i < H; ++i)
            for (int j = 0; j < W; ++j) {
                const int p = i * W + j;
                WarpSample s = warp_geom(fv(0, p), fv(1, p), i, j, H, W);
                const double m = mv(0, p);
                const int p00 = s.y0 * W + s.x0, p01 = s.y0 * W + s.x1;
                const int p10 = s.y1 * W + s.x0, p11 = s.y1 * W + s.x1;
                double dfx = 0, dfy = 0, dm = 0;
                for (int c = 0; c < C; ++c) {
                    const double g = n.grad(c, p);
                    if (g == 0.0) continue;
                    const double z00 = zv(c, p00), z01 = zv(c, p01);
                    const double z10 = zv(c, p10), z11 = zv(c, p11);
                    const double v = (1 - s.wy) * ((1 - s.wx) * z00 + s.wx * z01) +
                                     s.wy * ((1 - s.wx) * z10 + s.wx * z11);
                    if (gm) dm += g * v;
                    const double gm_ = g * m;
                    if (gz) {
                        n.parents[0]->grad(c, p00) += gm_ * (1 - s.wy) * (1 - s.wx);
                        n.parents[0]->grad(c, p01) += gm_ * (1 - s.wy) * s.wx;
                        n.parents[0]->grad(c, p10) += gm_ * s.wy * (1 - s.wx);
                        n.parents[0]->grad(c, p11) += gm_ * s.wy * s.wx;
                    }
                    if (gf) {
                        if (!s.clamped_x)
                            dfx += gm_ * ((1 - s.wy) * (z01 - z00) + s.wy * (z11 - z10));
                        if (!s.clamped_y)
                            dfy += gm_ * ((1 - s.wx) * (z10 - z00) + s.wx * (z11 - z01));
                    }
                }
                if (gf) {
                    n.parents[1]->grad(0, p) += dfx;
                    n.parents[1]->grad(1, p) += dfy;
                }
                if (gm) n.parents[2]->grad(0, p) += dm;
            }
    });
}

}  // namespace dawn::ad
