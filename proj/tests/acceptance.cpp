// Acceptance gate: the eight primary criteria from the specification.
//
// Criteria 1-3 are purely analytic and run in seconds. Criteria 4-8 need the
// desk-scale corpus and trained checkpoints; those artifacts are built once
// through the CLI binary (DAWN_BIN) into a work directory (DAWN_WORK) and
// reused on later runs, so only the first invocation pays the training cost.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "dawn/fdm.hpp"
#include "dawn/lfg.hpp"
#include "dawn/metrics.hpp"
#include "dawn/nn.hpp"
#include "dawn/pbnet.hpp"
#include "dawn/pipeline.hpp"
#include "dawn/synth.hpp"

namespace fs = std::filesystem;
using namespace dawn;
using ad::Mat;
using ad::Var;

namespace {

struct Harness {
    int passed = 0, failed = 0;

    void check(bool ok, const std::string& name, const std::string& detail = "") {
        if (ok) {
            ++passed;
            std::cout << "[PASS] " << name;
        } else {
            ++failed;
            std::cout << "[FAIL] " << name;
        }
        if (!detail.empty()) std::cout << "  (" << detail << ")";
        std::cout << "\n" << std::flush;
    }
};

std::string num(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

Mat randmat(Eigen::Index r, Eigen::Index c, unsigned seed) {
    std::mt19937 gen(seed);
    std::normal_distribution<double> d(0.0, 1.0);
    Mat m(r, c);
    for (Eigen::Index i = 0; i < r; ++i)
        for (Eigen::Index j = 0; j < c; ++j) m(i, j) = d(gen);
    return m;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    return v[v.size() / 2];
}

// Central finite differences against the tape; returns the max relative error.
double grad_check(const std::function<Var(const std::vector<Var>&)>& fn,
                  std::vector<Mat> inputs, double eps = 1e-5) {
    std::vector<Var> vars;
    for (auto& m : inputs) vars.push_back(ad::param(m));
    Var loss = fn(vars);
    ad::backward(loss);

    auto eval = [&](const std::vector<Mat>& xs) {
        ad::NoGradGuard ng;
        std::vector<Var> vs;
        for (const auto& m : xs) vs.push_back(ad::constant(m));
        return fn(vs)->val(0, 0);
    };
    double max_rel = 0.0;
    for (std::size_t k = 0; k < inputs.size(); ++k)
        for (Eigen::Index i = 0; i < inputs[k].rows(); ++i)
            for (Eigen::Index j = 0; j < inputs[k].cols(); ++j) {
                std::vector<Mat> hi = inputs, lo = inputs;
                hi[k](i, j) += eps;
                lo[k](i, j) -= eps;
                const double fd = (eval(hi) - eval(lo)) / (2 * eps);
                const double an = vars[k]->grad.size() ? vars[k]->grad(i, j) : 0.0;
                max_rel = std::max(max_rel, std::abs(fd - an) /
                                                std::max({std::abs(fd), std::abs(an), 1e-4}));
            }
    return max_rel;
}

// ---------------------------------------------------------------- criterion 1

void criterion1(Harness& h) {
    // warp identity and linearity in the latent argument
    {
        ad::NoGradGuard ng;
        Mat z = randmat(4, 64, 1);
        Var flow0 = ad::constant(Mat::Zero(2, 64));
        Var mask1 = ad::constant(Mat::Ones(1, 64));
        Mat ident = ad::warp_bilinear(ad::constant(z), flow0, mask1, 8, 8)->val;
        h.check((ident - z).cwiseAbs().maxCoeff() <= 1e-6, "C1 warp identity");

        Var flow = ad::constant(randmat(2, 64, 2) * 0.7);
        Var mask = ad::constant((randmat(1, 64, 3).array().abs().min(1.0)).matrix());
        Mat a = randmat(4, 64, 4), b = randmat(4, 64, 5);
        Mat wa = ad::warp_bilinear(ad::constant(a), flow, mask, 8, 8)->val;
        Mat wb = ad::warp_bilinear(ad::constant(b), flow, mask, 8, 8)->val;
        Mat wab = ad::warp_bilinear(ad::constant(a + b), flow, mask, 8, 8)->val;
        h.check((wab - wa - wb).cwiseAbs().maxCoeff() <= 1e-6, "C1 warp linearity");
    }

    // RoPE norm preservation and shift invariance of attention scores
    {
        ad::NoGradGuard ng;
        Mat x = randmat(6, 16, 7);
        std::vector<double> pos{0, 3, 7, 12, 25, 40};
        Mat r = ad::rope_rows(ad::constant(x), pos)->val;
        double norm_err = 0;
        for (int i = 0; i < 6; ++i)
            norm_err = std::max(norm_err, std::abs(r.row(i).norm() - x.row(i).norm()));
        h.check(norm_err <= 1e-6, "C1 rope norm preservation", "err " + num(norm_err));

        Mat qk = randmat(2, 16, 8);
        double shift_err = 0;
        for (double s : {1.0, 13.0, 250.0}) {
            Mat r0 = ad::rope_rows(ad::constant(qk), {5.0, 9.0})->val;
            Mat r1 = ad::rope_rows(ad::constant(qk), {5.0 + s, 9.0 + s})->val;
            shift_err = std::max(shift_err,
                                 std::abs(r0.row(0).dot(r0.row(1)) - r1.row(0).dot(r1.row(1))));
        }
        h.check(shift_err <= 1e-5, "C1 rope shift invariance", "err " + num(shift_err));
    }

    // exact locality of windowed attention: bit-identical outside the window
    {
        nn::ParamStore ps;
        nn::Rng rng(9);
        auto attn = nn::make_attention(ps, "a", 8, 2, true, rng);
        const int L = 40, window = 8;
        std::vector<double> pos(L);
        for (int i = 0; i < L; ++i) pos[static_cast<std::size_t>(i)] = i;
        Mat x = randmat(L, 8, 10);
        ad::NoGradGuard ng;
        Mat base = attn.forward_segments(ad::constant(x), {{0, L}}, &pos, window, 0)->val;
        Mat x2 = x;
        x2.row(30).setConstant(17.0);
        Mat pert = attn.forward_segments(ad::constant(x2), {{0, L}}, &pos, window, 0)->val;
        bool exact = true;
        for (int i = 0; i < L; ++i)
            if (std::abs(i - 30) > window / 2 && pert.row(i) != base.row(i)) exact = false;
        h.check(exact, "C1 windowed attention locality exact");
    }

    // diffusion schedule: cumulative alpha product strictly decreasing
    {
        auto s = fdm::make_schedule(200);
        bool mono = true;
        for (int t = 1; t <= 200; ++t)
            if (!(s.abar(t) < s.abar(t - 1))) mono = false;
        h.check(mono && s.abar(0) == 1.0, "C1 schedule alpha-bar strictly decreasing");
    }

    // Frechet distance: self-distance and the 1-D closed form
    {
        Mat a = randmat(12, 5, 11);
        metrics::FeatureSet fa{a, "t"};
        const double self = metrics::frechet_distance(fa, fa);
        h.check(self <= 1e-8, "C1 frechet self-distance", num(self));

        Mat x(2, 1), y(2, 1);
        x << -1, 1;  // mean 0, sample variance 2
        y << 2, 4;   // mean 3, sample variance 2
        const double d = metrics::frechet_distance({x, "t"}, {y, "t"});
        h.check(std::abs(d - 9.0) <= 1e-8, "C1 frechet 1-D oracle", num(d));
    }

    // KL closed form vs numeric quadrature
    {
        const double m = 0.7, s = 1.3;
        double kl_num = 0.0;
        const int K = 40000;
        const double lo = m - 10 * s, hi = m + 10 * s, dx = (hi - lo) / K;
        for (int i = 0; i < K; ++i) {
            const double x = lo + (i + 0.5) * dx;
            const double q =
                std::exp(-0.5 * (x - m) * (x - m) / (s * s)) / (s * std::sqrt(2 * M_PI));
            kl_num += q * (-0.5 * (x - m) * (x - m) / (s * s) - std::log(s) + 0.5 * x * x) * dx;
        }
        const double kl_cf = pbnet::kl_loss_v(ad::constant(Mat::Constant(1, 1, m)),
                                              ad::constant(Mat::Constant(1, 1, std::log(s))))
                                 ->val(0, 0);
        h.check(std::abs(kl_cf - kl_num) <= 1e-6, "C1 kl closed form vs quadrature",
                num(std::abs(kl_cf - kl_num)));
    }

    // degradation-rate arithmetic on the published FID pair
    h.check(std::abs((13.07 / 10.0 - 1.0) - 0.307) <= 1e-12, "C1 dr arithmetic 13.07/10.0");
}

// ---------------------------------------------------------------- criterion 2

void criterion2(Harness& h) {
    // warp w.r.t. latent, flow, and mask
    {
        Mat z = randmat(3, 16, 21);
        Mat flow(2, 16);
        for (int i = 0; i < 16; ++i) {
            flow(0, i) = 0.3 - 0.05 * i / 16.0;
            flow(1, i) = -0.4 + 0.03 * i / 16.0;
        }
        Mat mask = (randmat(1, 16, 22).array().abs() * 0.5 + 0.25).min(1.0).matrix();
        Mat weight = randmat(3, 16, 23);
        const double err = grad_check(
            [&](const std::vector<Var>& v) {
                return ad::sum(ad::mul(ad::warp_bilinear(v[0], v[1], v[2], 4, 4),
                                       ad::constant(weight)));
            },
            {z, flow, mask}, 1e-6);
        h.check(err <= 1e-3, "C2 warp gradient (latent/flow/mask)", "rel err " + num(err));
    }

    // a denoiser pass through fdm_loss, spot-checking parameters of every block
    {
        fdm::FdmConfig cfg;
        cfg.hz = cfg.wz = 4;
        cfg.cz = 4;
        cfg.width1 = 8;
        cfg.width2 = 16;
        cfg.heads = 2;
        cfg.temb_dim = 8;
        cfg.T = 10;
        cfg.kprime = 3;
        cfg.kmin = 3;
        cfg.kmax = 5;
        auto m = fdm::FdmModel::create(cfg, 31);
        const int n = 2, S = cfg.hz * cfg.wz;
        fdm::Cond cond;
        cond.audio = randmat(n, cfg.ca, 32);
        cond.delta_rho = randmat(n, 8, 33);
        cond.z_src = randmat(cfg.cz, S, 34);
        cond.face_mask = (randmat(32, 32, 35).array() > 0.0).cast<double>().matrix();
        Mat z = randmat(3, n * S, 36);
        Mat eps = randmat(3, n * S, 37);
        Mat lip = Mat::Zero(n, S);
        lip(0, 5) = 1.0;

        m.ps.zero_grad();
        ad::backward(fdm::fdm_loss_v(m.denoise_v(ad::constant(z), n, 4.0, cond), eps, lip, 1.0));
        auto eval = [&]() {
            ad::NoGradGuard ng;
            return fdm::fdm_loss_v(m.denoise_v(ad::constant(z), n, 4.0, cond), eps, lip, 1.0)
                ->val(0, 0);
        };
        double max_rel = 0.0;
        const double fde = 1e-5;
        for (const auto& name : {"in.w", "a.r.c1.w", "a.r.t.w", "a.sa.q.w", "a.ta.q.w",
                                 "down.w", "b.r.cond.w", "b.ta.v.w", "up.w", "c.r.ln1.g",
                                 "out.w"}) {
            Var p = m.ps.get(name);
            const Eigen::Index i = p->val.rows() / 2, j = p->val.cols() / 2;
            const double orig = p->val(i, j);
            p->val(i, j) = orig + fde;
            const double hi = eval();
            p->val(i, j) = orig - fde;
            const double lo = eval();
            p->val(i, j) = orig;
            const double fd = (hi - lo) / (2 * fde);
            const double an = p->grad(i, j);
            max_rel = std::max(max_rel,
                               std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}));
        }
        h.check(max_rel <= 1e-3, "C2 denoiser gradient through fdm_loss",
                "rel err " + num(max_rel));
    }

    // reparameterization: d/dmu and d/dlog_sigma through a scalar loss
    {
        Mat mu = randmat(3, 4, 41), ls = randmat(3, 4, 42) * 0.3, xi = randmat(3, 4, 43);
        Mat weight = randmat(3, 4, 44);
        const double err = grad_check(
            [&](const std::vector<Var>& v) {
                Var hvar = ad::add(v[0], ad::mul(ad::exp_(v[1]), ad::constant(xi)));
                return ad::sum(ad::mul(hvar, ad::constant(weight)));
            },
            {mu, ls});
        h.check(err <= 1e-3, "C2 reparameterization gradient", "rel err " + num(err));
    }
}

// ---------------------------------------------------------------- criterion 3

void criterion3(Harness& h) {
    auto sched = fdm::make_schedule(200);
    nn::Rng rng(51);
    const int draws = 10000;
    const double z0 = 0.7;
    for (int t : {10, 100, 200}) {
        double sum = 0, sq = 0;
        for (int k = 0; k < draws; ++k) {
            Mat xi = nn::randn(rng, 1, 1, 1.0);
            const double v = fdm::forward_diffuse(Mat::Constant(1, 1, z0), t, xi, sched)(0, 0);
            sum += v;
            sq += v * v;
        }
        const double mean = sum / draws;
        const double var = sq / draws - mean * mean;
        const double want_mean = std::sqrt(sched.abar(t)) * z0;
        const double want_var = 1.0 - sched.abar(t);
        const bool ok = std::abs(mean - want_mean) <= 0.02 * std::max(1.0, std::abs(want_mean)) &&
                        std::abs(var - want_var) <= 0.02 * std::max(1.0, want_var);
        h.check(ok, "C3 forward-diffusion moments t=" + std::to_string(t),
                "mean " + num(mean) + " vs " + num(want_mean) + ", var " + num(var) + " vs " +
                    num(want_var));
    }
}

// ------------------------------------------------------- artifacts (C4 - C8)

fs::path work_dir() {
    const char* w = std::getenv("DAWN_WORK");
    return w && *w ? fs::path(w) : fs::path("acceptance_work");
}

std::string dawn_bin() {
    const char* b = std::getenv("DAWN_BIN");
    return b && *b ? std::string(b) : std::string();
}

void run_cli(const std::string& args) {
    const std::string cmd = "\"" + dawn_bin() + "\" " + args;
    const int rc = std::system(cmd.c_str());
    if (rc != 0)
        throw std::runtime_error("command failed (exit " + std::to_string(rc) + "): " + cmd);
}

// Builds corpus + checkpoints once; later runs find them on disk.
void ensure_artifacts() {
    if (dawn_bin().empty()) throw std::runtime_error("DAWN_BIN is not set");
    const fs::path w = work_dir();
    fs::create_directories(w);
    auto missing = [&](const char* d) { return !fs::exists(w / d / "manifest.txt"); };
    const std::string q = "\"" + w.string() + "\"/";

    if (missing("corpus"))
        run_cli("synth --out " + q + "corpus --clips 200 --frames 200 --seed 101");
    if (missing("corpus_long"))
        run_cli("synth --out " + q + "corpus_long --clips 40 --frames 620 --seed 202");
    if (missing("lfg"))
        run_cli("train-lfg --corpus " + q + "corpus --out " + q +
                "lfg --steps 4000 --seed 11 > " + q + "lfg.log");
    if (missing("fdm_stage1"))
        run_cli("train-fdm --stage 1 --corpus " + q + "corpus --lfg " + q + "lfg --out " + q +
                "fdm_stage1 --steps 1200 --seed 12 > " + q + "fdm1.log");
    if (missing("fdm"))
        run_cli("train-fdm --stage 2 --corpus " + q + "corpus --lfg " + q + "lfg --init " + q +
                "fdm_stage1 --out " + q + "fdm --steps 1600 --seed 13 > " + q + "fdm2.log");
    if (missing("pbnet"))
        run_cli("train-pbnet --corpus " + q + "corpus --out " + q +
                "pbnet --steps 3000 --seed 14 > " + q + "pbnet.log");
}

struct Trained {
    synth::CorpusManifest corpus, corpus_long;
    pipeline::Pipeline p;          // two-stage fdm
    pipeline::Pipeline p_stage1;   // stage-1-only fdm, otherwise identical
    pipeline::PipelineConfig cfg;
};

Trained load_trained() {
    const fs::path w = work_dir();
    Trained t;
    t.corpus = synth::load_manifest(w / "corpus");
    t.corpus_long = synth::load_manifest(w / "corpus_long");
    t.p.lfg = lfg::load_checkpoint(w / "lfg");
    t.p.fdm = fdm::load_checkpoint(w / "fdm");
    t.p.pb = pbnet::load_checkpoint(w / "pbnet");
    t.p.has_pb = true;
    t.p_stage1 = t.p;
    t.p_stage1.fdm = fdm::load_checkpoint(w / "fdm_stage1");
    t.cfg.sampler = "ddim";
    t.cfg.steps = 10;
    t.cfg.seed = 1000;
    return t;
}

pipeline::SourceInput source_of(const synth::ClipRecord& rec) {
    pipeline::SourceInput s;
    s.frame = rec.frames.front();
    s.pose = rec.poses.row(0).transpose();
    s.face_mask = rec.face_masks.front().cast<double>();
    return s;
}

// ---------------------------------------------------------------- criterion 4

struct C4Result {
    std::vector<double> lip;  // per held-out clip, two-stage pipeline, N=200
};

C4Result criterion4(Harness& h, const Trained& t) {
    auto test_clips = t.corpus.split_clips("test");

    // LFG held-out reconstruction: mean absolute error per pixel
    {
        double l1 = 0;
        int count = 0;
        for (const auto& e : test_clips) {
            auto rec = synth::load_clip(t.corpus, e.id);
            for (int f : {40, 80, 120, 160, 199}) {
                const auto& dri = rec.frames[static_cast<std::size_t>(f)];
                l1 += (t.p.lfg.reconstruct(rec.frames[0], dri) - dri).cwiseAbs().mean();
                ++count;
            }
        }
        l1 /= count;
        h.check(l1 <= 0.08, "C4 lfg held-out L1 <= 0.08/px", num(l1));
    }

    // full pipeline on every held-out clip at N=200
    C4Result out;
    double lip_sum = 0, blink_sum = 0, kl_sum = 0;
    for (std::size_t i = 0; i < test_clips.size(); ++i) {
        auto rec = synth::load_clip(t.corpus, test_clips[i].id);
        pipeline::PipelineConfig cfg = t.cfg;
        cfg.seed = 1000 + i;
        auto res = pipeline::infer(source_of(rec), rec.audio.features, t.p, cfg);
        const double lip =
            metrics::lip_sync_corr(res.frames, res.poses, rec.audio.envelope());
        out.lip.push_back(lip);
        lip_sum += lip;
        blink_sum += metrics::blink_rate(res.poses.rightCols(2), 25.0);

        // posterior KL per dim on the real pose track (non-collapse)
        synth::PoseBlink rho0 = rec.poses.row(0).transpose();
        Mat delta = rec.poses.rowwise() - rec.poses.row(0);
        auto [mu, ls] = pbnet::pb_encode(t.p.pb, rho0, delta, rec.audio.features);
        kl_sum += pbnet::kl_loss_v(ad::constant(mu), ad::constant(ls))->val(0, 0);
    }
    const auto n = static_cast<double>(test_clips.size());
    h.check(lip_sum / n >= 0.8,
            "C4 pipeline lip_sync_corr >= 0.8 over " + std::to_string(test_clips.size()) +
                " held-out clips",
            num(lip_sum / n));
    const double blink = blink_sum / n;
    h.check(blink >= 0.1 && blink <= 1.0, "C4 blink rate in [0.1, 1.0]/s", num(blink));
    const double kl = kl_sum / n;
    h.check(kl > 0.01, "C4 posterior KL > 0.01/dim", num(kl));
    return out;
}

// ---------------------------------------------------------------- criterion 5

void criterion5(Harness& h, const Trained& t) {
    auto rows = pipeline::extrapolation_sweep(t.p, t.cfg, t.corpus_long,
                                              {40, 100, 200, 400, 600}, 4);
    const double base = rows[0].frechet;
    double spread = 0;
    std::string detail = "frechet";
    for (const auto& r : rows) {
        spread = std::max(spread, std::abs(r.frechet - base) / base);
        detail += " " + num(r.frechet);
    }
    h.check(spread <= 0.30, "C5 extrapolation frechet spread <= 30%",
            detail + " -> spread " + num(spread));
}

// ---------------------------------------------------------------- criterion 6

void criterion6(Harness& h, const Trained& t) {
    auto test_clips = t.corpus.split_clips("test");
    std::vector<double> dr_nar, dr_sar, t_nar, t_sar;
    for (int i = 0; i < 5; ++i) {
        auto rec = synth::load_clip(t.corpus, test_clips[static_cast<std::size_t>(i)].id);
        pipeline::PipelineConfig cfg = t.cfg;
        cfg.seed = 2000 + static_cast<std::uint64_t>(i);
        auto src = source_of(rec);

        auto nar = pipeline::infer(src, rec.audio.features, t.p, cfg);
        auto sar = pipeline::infer_sar(src, rec.audio.features, t.p, cfg, 40);
        t_nar.push_back(nar.report.total_s);
        t_sar.push_back(sar.report.total_s);
        dr_nar.push_back(metrics::degradation_rate(nar.frames, rec.frames, 25,
                                                   metrics::Embedder::LfgEncoderPooled,
                                                   &t.p.lfg)
                             .dr);
        dr_sar.push_back(metrics::degradation_rate(sar.frames, rec.frames, 25,
                                                   metrics::Embedder::LfgEncoderPooled,
                                                   &t.p.lfg)
                             .dr);
    }
    h.check(median(dr_sar) > median(dr_nar), "C6 SAR DR_25 > NAR DR_25 (median of 5)",
            "sar " + num(median(dr_sar)) + " vs nar " + num(median(dr_nar)));
    h.check(median(t_nar) < median(t_sar), "C6 NAR wall-clock < SAR (median of 5)",
            "nar " + num(median(t_nar)) + "s vs sar " + num(median(t_sar)) + "s");
}

// ---------------------------------------------------------------- criterion 7

void criterion7(Harness& h, const Trained& t, const C4Result& c4) {
    auto test_clips = t.corpus.split_clips("test");
    const int n = 5;
    std::vector<double> lip_stage1, lip_full;
    for (int i = 0; i < n; ++i) {
        auto rec = synth::load_clip(t.corpus, test_clips[static_cast<std::size_t>(i)].id);
        pipeline::PipelineConfig cfg = t.cfg;
        cfg.seed = 1000 + static_cast<std::uint64_t>(i);  // mirrors the criterion-4 runs
        auto res = pipeline::infer(source_of(rec), rec.audio.features, t.p_stage1, cfg);
        lip_stage1.push_back(
            metrics::lip_sync_corr(res.frames, res.poses, rec.audio.envelope()));
        lip_full.push_back(c4.lip[static_cast<std::size_t>(i)]);
    }
    h.check(median(lip_stage1) < median(lip_full),
            "C7 stage-1-only lip_corr < two-stage (held-out median)",
            "stage1 " + num(median(lip_stage1)) + " vs full " + num(median(lip_full)));
}

// ---------------------------------------------------------------- criterion 8

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + p.string());
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

bool files_equal(const fs::path& a, const fs::path& b) { return slurp(a) == slurp(b); }

bool dirs_equal(const fs::path& a, const fs::path& b) {
    std::vector<fs::path> rel;
    for (const auto& e : fs::recursive_directory_iterator(a))
        if (e.is_regular_file()) rel.push_back(fs::relative(e.path(), a));
    for (const auto& r : rel)
        if (!fs::exists(b / r) || !files_equal(a / r, b / r)) return false;
    std::size_t nb = 0;
    for (const auto& e : fs::recursive_directory_iterator(b))
        if (e.is_regular_file()) ++nb;
    return nb == rel.size();
}

// bench CSV minus the median_seconds column (wall clock is the one
// legitimately non-deterministic report field)
std::string strip_time_column(const std::string& csv) {
    std::istringstream in(csv);
    std::ostringstream out;
    for (std::string line; std::getline(in, line);) {
        std::istringstream ls(line);
        std::string cell;
        int col = 0;
        while (std::getline(ls, cell, ',')) {
            if (col != 2) out << cell << ",";
            ++col;
        }
        out << "\n";
    }
    return out.str();
}

void criterion8(Harness& h, const Trained& t) {
    const fs::path w = work_dir();
    const fs::path c8 = w / "c8";
    fs::remove_all(c8);
    fs::create_directories(c8);
    const std::string q = "\"" + w.string() + "\"/";
    const std::string q8 = "\"" + c8.string() + "\"/";

    // synth
    run_cli("synth --out " + q8 + "syn_a --clips 3 --frames 30 --seed 55");
    run_cli("synth --out " + q8 + "syn_b --clips 3 --frames 30 --seed 55");
    h.check(dirs_equal(c8 / "syn_a", c8 / "syn_b"), "C8 synth rerun byte-identical");

    // inference config against the trained checkpoints
    {
        std::ofstream cfg(c8 / "run.cfg");
        cfg << "lfg = " << (w / "lfg").string() << "\n"
            << "pbnet = " << (w / "pbnet").string() << "\n"
            << "fdm = " << (w / "fdm").string() << "\n"
            << "corpus = " << (w / "corpus").string() << "\n"
            << "sampler = ddim\nsteps = 4\nseed = 77\n";
    }
    const std::string cfg_arg = " --cfg " + q8 + "run.cfg";
    const std::string clip = t.corpus.split_clips("test").front().id;
    const std::string clip2 = t.corpus.split_clips("test").back().id;
    const auto data_equal = [&](const char* a, const char* b) {
        for (const char* f : {"frames.dten", "poses.dten", "report.txt"})
            if (!files_equal(c8 / a / f, c8 / b / f)) return false;
        return true;
    };

    run_cli("infer --src clip:" + clip + " --audio clip:" + clip + cfg_arg + " --out " + q8 +
            "inf_a > /dev/null");
    run_cli("infer --src clip:" + clip + " --audio clip:" + clip + cfg_arg + " --out " + q8 +
            "inf_b > /dev/null");
    h.check(data_equal("inf_a", "inf_b"), "C8 infer rerun byte-identical");

    run_cli("infer --sar --chunk 40 --src clip:" + clip + " --audio clip:" + clip + cfg_arg +
            " --out " + q8 + "sar_a > /dev/null");
    run_cli("infer --sar --chunk 40 --src clip:" + clip + " --audio clip:" + clip + cfg_arg +
            " --out " + q8 + "sar_b > /dev/null");
    h.check(data_equal("sar_a", "sar_b"), "C8 infer --sar rerun byte-identical");

    run_cli("reenact --src clip:" + clip + " --drive clip:" + clip2 + cfg_arg + " --out " + q8 +
            "re_a > /dev/null");
    run_cli("reenact --src clip:" + clip + " --drive clip:" + clip2 + cfg_arg + " --out " + q8 +
            "re_b > /dev/null");
    h.check(data_equal("re_a", "re_b"), "C8 reenact rerun byte-identical");

    run_cli("eval --gen " + q8 + "inf_a --ref clip:" + clip + " --corpus " + q +
            "corpus --lfg " + q + "lfg --out " + q8 + "ev_a.txt > /dev/null");
    run_cli("eval --gen " + q8 + "inf_a --ref clip:" + clip + " --corpus " + q +
            "corpus --lfg " + q + "lfg --out " + q8 + "ev_b.txt > /dev/null");
    h.check(files_equal(c8 / "ev_a.txt", c8 / "ev_b.txt") &&
                files_equal(c8 / "ev_a.txt.csv", c8 / "ev_b.txt.csv"),
            "C8 eval rerun byte-identical");

    run_cli("sweep --lengths 8,16 --clips 2" + cfg_arg + " --out " + q8 +
            "sw_a.txt > /dev/null");
    run_cli("sweep --lengths 8,16 --clips 2" + cfg_arg + " --out " + q8 +
            "sw_b.txt > /dev/null");
    h.check(files_equal(c8 / "sw_a.txt", c8 / "sw_b.txt") &&
                files_equal(c8 / "sw_a.txt.csv", c8 / "sw_b.txt.csv"),
            "C8 sweep rerun byte-identical");

    run_cli("bench --length 100 --clips 2" + cfg_arg + " --out " + q8 +
            "be_a.txt > /dev/null");
    run_cli("bench --length 100 --clips 2" + cfg_arg + " --out " + q8 +
            "be_b.txt > /dev/null");
    h.check(strip_time_column(slurp(c8 / "be_a.txt.csv")) ==
                strip_time_column(slurp(c8 / "be_b.txt.csv")),
            "C8 bench rerun byte-identical (wall clock excluded)");
}

}  // namespace

int main() {
    Harness h;
    const auto t0 = std::chrono::steady_clock::now();

    criterion1(h);
    criterion2(h);
    criterion3(h);

    try {
        ensure_artifacts();
        Trained t = load_trained();
        C4Result c4 = criterion4(h, t);
        criterion5(h, t);
        criterion6(h, t);
        criterion7(h, t, c4);
        criterion8(h, t);
    } catch (const std::exception& e) {
        h.check(false, "C4-C8 artifacts/evaluation", e.what());
    }

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "\n" << h.passed << " passed, " << h.failed << " failed in " << num(secs)
              << "s\n";
    return h.failed == 0 ? 0 : 1;
}
