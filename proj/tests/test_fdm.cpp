#include <doctest.h>

#include <filesystem>

#include "dawn/fdm.hpp"
#include "test_util.hpp"

using namespace dawn;
using ad::Mat;
using ad::Var;
using testutil::randmat;
namespace fs = std::filesystem;

namespace {

// small-but-complete denoiser config for fast tests
fdm::FdmConfig tiny_config() {
    fdm::FdmConfig c;
    c.hz = c.wz = 4;
    c.cz = 4;
    c.width1 = 8;
    c.width2 = 16;
    c.heads = 2;
    c.temb_dim = 8;
    c.T = 10;
    c.window = 80;
    c.kmin = 3;
    c.kmax = 5;
    c.kprime = 3;
    return c;
}

fdm::Cond tiny_cond(int n, const fdm::FdmConfig& c, unsigned seed) {
    fdm::Cond cond;
    cond.audio = randmat(n, c.ca, seed);
    cond.delta_rho = randmat(n, 8, seed + 1);
    cond.z_src = randmat(c.cz, c.hz * c.wz, seed + 2);
    cond.face_mask = (randmat(32, 32, seed + 3).array() > 0.0).cast<double>().matrix();
    return cond;
}

}  // namespace

TEST_CASE("schedule: linear betas, cumulative alpha products") {
    auto s = fdm::make_schedule(2, 0.1, 0.2);
    CHECK(s.beta_at(1) == doctest::Approx(0.1));
    CHECK(s.beta_at(2) == doctest::Approx(0.2));
    CHECK(s.abar(0) == 1.0);
    CHECK(s.abar(1) == doctest::Approx(0.9));
    CHECK(s.abar(2) == doctest::Approx(0.72));

    auto d = fdm::make_schedule(200, 1e-4, 0.02);
    CHECK(d.beta_at(1) == doctest::Approx(1e-4));
    CHECK(d.beta_at(200) == doctest::Approx(0.02));
    for (int t = 1; t <= 200; ++t) CHECK(d.abar(t) < d.abar(t - 1));  // strictly decreasing
    CHECK(d.abar(200) > 0.0);

    CHECK_THROWS_AS(fdm::make_schedule(0), invalid_argument);
    CHECK_THROWS_AS(fdm::make_schedule(10, 0.5, 0.2), invalid_argument);
}

TEST_CASE("forward diffusion: formula and moments") {
    auto s = fdm::make_schedule(200, 1e-4, 0.02);
    Mat z0 = Mat::Constant(3, 8, 2.0);
    Mat noise = Mat::Constant(3, 8, 1.0);
    Mat zt = fdm::forward_diffuse(z0, 50, noise, s);
    const double ab = s.abar(50);
    CHECK(zt(0, 0) == doctest::Approx(std::sqrt(ab) * 2.0 + std::sqrt(1 - ab)));
    CHECK_THROWS_AS(fdm::forward_diffuse(z0, 0, noise, s), invalid_argument);
    CHECK_THROWS_AS(fdm::forward_diffuse(z0, 201, noise, s), invalid_argument);

    // Monte-Carlo: mean sqrt(abar)*z0, variance 1-abar, within 2%
    nn::Rng rng(123);
    for (int t : {10, 100, 200}) {
        const int n_draws = 10000;
        double mean = 0, m2 = 0;
        for (int k = 0; k < n_draws; ++k) {
            Mat xi = nn::randn(rng, 1, 1, 1.0);
            Mat z = Mat::Constant(1, 1, 0.7);
            double v = fdm::forward_diffuse(z, t, xi, s)(0, 0);
            mean += v;
            m2 += v * v;
        }
        mean /= n_draws;
        const double var = m2 / n_draws - mean * mean;
        CHECK(std::abs(mean - std::sqrt(s.abar(t)) * 0.7) < 0.02);
        CHECK(std::abs(var - (1.0 - s.abar(t))) < 0.02 * std::max(1.0, var));
    }
}

TEST_CASE("lip mask pooling is coverage-preserving max") {
    synth::MaskImage m = synth::MaskImage::Zero(32, 32);
    m(5, 6) = 1;            // block (1, 1)
    m(31, 31) = 1;          // block (7, 7)
    Mat lat = fdm::lip_mask_to_latent(m, 8, 8);
    CHECK(lat.sum() == doctest::Approx(2.0));
    CHECK(lat(0, 1 * 8 + 1) == 1.0);
    CHECK(lat(0, 7 * 8 + 7) == 1.0);
}

TEST_CASE("fdm loss: oracle values") {
    Mat eps = randmat(3, 2 * 16, 41);
    Mat lip = Mat::Zero(2, 16);

    // zero lip mask falls back to plain mse
    CHECK(fdm::fdm_loss(eps, eps, lip, 1.0) == doctest::Approx(0.0));
    Mat eps_hat = eps.array() + 1.0;
    CHECK(fdm::fdm_loss(eps, eps_hat, lip, 1.0) == doctest::Approx(1.0));

    // single masked site adds sum(sq over channels)/ (3*mask_sum)
    lip(0, 3) = 1.0;  // diff is all ones, so the masked site contributes 3/(3*1)
    CHECK(fdm::fdm_loss(eps, eps_hat, lip, 1.0) == doctest::Approx(1.0 + 3.0 / 3.0));
    CHECK(fdm::fdm_loss(eps, eps_hat, lip, 0.5) == doctest::Approx(1.0 + 0.5));
}

TEST_CASE("tcl batch sampling follows the curriculum") {
    std::vector<synth::CorpusManifest::Entry> clips{{"a", "train", 60}, {"b", "train", 60}};
    auto cfg = fdm::FdmConfig{};
    nn::Rng rng(5);
    for (const auto& s : fdm::tcl_sample_batch(clips, 1, 32, rng, cfg)) {
        CHECK(s.len == cfg.kprime);
        CHECK(s.src == s.start);
        CHECK(s.start + s.len <= 60);
    }
    bool src_differs = false;
    int len_min = 1000, len_max = 0;
    for (const auto& s : fdm::tcl_sample_batch(clips, 2, 64, rng, cfg)) {
        CHECK(s.len >= cfg.kmin);
        CHECK(s.len <= cfg.kmax);
        CHECK(s.start + s.len <= 60);
        CHECK(s.src < 60);
        if (s.src != s.start) src_differs = true;
        len_min = std::min(len_min, s.len);
        len_max = std::max(len_max, s.len);
    }
    CHECK(src_differs);
    CHECK(len_min < len_max);
    CHECK_THROWS_AS(fdm::tcl_sample_batch(clips, 3, 1, rng, cfg), invalid_argument);
}

TEST_CASE("denoiser: shape, determinism, audio sensitivity") {
    auto cfg = tiny_config();
    auto m = fdm::FdmModel::create(cfg, 3);
    const int n = 4, S = cfg.hz * cfg.wz;
    auto cond = tiny_cond(n, cfg, 51);
    Mat z = randmat(3, n * S, 55);
    Mat e1 = m.predict_noise(z, 5, cond);
    CHECK(e1.rows() == 3);
    CHECK(e1.cols() == n * S);
    CHECK(e1.allFinite());
    CHECK((m.predict_noise(z, 5, cond) - e1).cwiseAbs().maxCoeff() == 0.0);

    auto cond2 = cond;
    cond2.audio(2, 0) += 1.0;
    CHECK((m.predict_noise(z, 5, cond2) - e1).cwiseAbs().maxCoeff() > 0.0);
    // the time embedding matters
    CHECK((m.predict_noise(z, 6, cond) - e1).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("denoiser gradient through fdm_loss") {
    auto cfg = tiny_config();
    auto m = fdm::FdmModel::create(cfg, 9);
    const int n = 2, S = cfg.hz * cfg.wz;
    auto cond = tiny_cond(n, cfg, 61);
    Mat z = randmat(3, n * S, 62);
    Mat eps = randmat(3, n * S, 63);
    Mat lip = Mat::Zero(n, S);
    lip(0, 5) = 1.0;
    lip(1, 9) = 1.0;

    m.ps.zero_grad();
    Var loss = fdm::fdm_loss_v(m.denoise_v(ad::constant(z), n, 4.0, cond), eps, lip, 1.0);
    ad::backward(loss);

    auto eval = [&]() {
        ad::NoGradGuard ng;
        return fdm::fdm_loss_v(m.denoise_v(ad::constant(z), n, 4.0, cond), eps, lip, 1.0)
            ->val(0, 0);
    };
    // spot-check a handful of parameters against central differences
    const double eps_fd = 1e-5;
    int checked = 0;
    for (const auto& name : {"in.w", "a.r.c1.w", "a.ta.q.w", "a.r.t.w", "down.w", "b.r.cond.w",
                             "up.w", "out.w", "a.saln.g", "c.r.ln1.b"}) {
        Var p = m.ps.get(name);
        REQUIRE(p->grad.size() > 0);
        const Eigen::Index i = p->val.rows() / 2, j = p->val.cols() / 2;
        const double orig = p->val(i, j);
        p->val(i, j) = orig + eps_fd;
        const double hi = eval();
        p->val(i, j) = orig - eps_fd;
        const double lo = eval();
        p->val(i, j) = orig;
        const double fd = (hi - lo) / (2 * eps_fd);
        const double an = p->grad(i, j);
        CHECK(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-4}) < 1e-3);
        ++checked;
    }
    CHECK(checked == 10);
}

TEST_CASE("temporal locality of the denoiser at inference") {
    auto cfg = tiny_config();
    cfg.window = 4;  // radius 2 per temporal layer, 2 temporal layers -> reach 4
    cfg.kmax = 3;
    cfg.kmin = 2;
    cfg.kprime = 2;
    auto m = fdm::FdmModel::create(cfg, 13);
    const int n = 16, S = cfg.hz * cfg.wz;
    auto cond = tiny_cond(n, cfg, 71);
    Mat z = randmat(3, n * S, 72);
    Mat base = m.predict_noise(z, 3, cond);

    Mat z2 = z;
    z2.col(15 * S + 2).setConstant(9.0);  // perturb frame 15
    Mat pert = m.predict_noise(z2, 3, cond);
    // frames farther than the layer-compounded reach are bit-identical
    for (int f = 0; f < n; ++f) {
        Mat a = base.middleCols(f * S, S), b = pert.middleCols(f * S, S);
        if (std::abs(f - 15) > 4)
            CHECK(a == b);
        else if (f == 15)
            CHECK((a - b).cwiseAbs().maxCoeff() > 0.0);
    }
}

TEST_CASE("standardize/destandardize round trip and mask clamping") {
    auto m = fdm::FdmModel::create(tiny_config(), 1);
    m.stat_mean << 0.1, -0.2, 0.5;
    m.stat_std << 2.0, 0.5, 0.25;
    Mat x = randmat(3, 32, 81);
    Mat z = m.standardize(x);
    Mat back = m.destandardize(z);
    CHECK((back.topRows(2) - x.topRows(2)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(back.row(2).minCoeff() >= 0.0);
    CHECK(back.row(2).maxCoeff() <= 1.0);
}

TEST_CASE("generate_motion: shapes, determinism, samplers") {
    auto cfg = tiny_config();
    auto m = fdm::FdmModel::create(cfg, 17);
    m.cfg.stage = 1;
    const int n = 5, S = cfg.hz * cfg.wz;
    auto cond = tiny_cond(n, cfg, 91);

    for (auto sampler : {fdm::Sampler::Ddpm, fdm::Sampler::Ddim}) {
        Mat g = fdm::generate_motion(m, cond.z_src, cond.face_mask, cond.audio, cond.delta_rho,
                                     sampler, 5, 77);
        CHECK(g.rows() == 3);
        CHECK(g.cols() == n * S);
        CHECK(g.allFinite());
        CHECK(g.row(2).minCoeff() >= 0.0);
        CHECK(g.row(2).maxCoeff() <= 1.0);
        Mat g2 = fdm::generate_motion(m, cond.z_src, cond.face_mask, cond.audio, cond.delta_rho,
                                      sampler, 5, 77);
        CHECK((g - g2).cwiseAbs().maxCoeff() == 0.0);
        Mat g3 = fdm::generate_motion(m, cond.z_src, cond.face_mask, cond.audio, cond.delta_rho,
                                      sampler, 5, 78);
        CHECK((g - g3).cwiseAbs().maxCoeff() > 0.0);
    }

    // single-frame sequence is valid
    auto c1 = tiny_cond(1, cfg, 92);
    Mat g1 = fdm::generate_motion(m, c1.z_src, c1.face_mask, c1.audio, c1.delta_rho,
                                  fdm::Sampler::Ddim, 3, 1);
    CHECK(g1.cols() == S);

    auto untrained = fdm::FdmModel::create(cfg, 18);
    CHECK_THROWS_AS(fdm::generate_motion(untrained, c1.z_src, c1.face_mask, c1.audio,
                                         c1.delta_rho, fdm::Sampler::Ddim, 3, 1),
                    invalid_argument);
}

TEST_CASE("fdm checkpoint round trip") {
    auto cfg = tiny_config();
    auto m = fdm::FdmModel::create(cfg, 23);
    m.cfg.stage = 2;
    m.stat_mean << 0.3, -0.1, 0.6;
    m.stat_std << 1.5, 0.7, 0.2;
    m.has_stats = true;
    m.train_steps = 99;
    auto dir = fs::temp_directory_path() / "dawn_fdm_ckpt";
    fs::remove_all(dir);
    fdm::save_checkpoint(m, dir);
    auto r = fdm::load_checkpoint(dir);
    CHECK(r.cfg.stage == 2);
    CHECK(r.train_steps == 99);
    CHECK((r.stat_mean - m.stat_mean).cwiseAbs().maxCoeff() < 1e-6);

    const int n = 3, S = cfg.hz * cfg.wz;
    auto cond = tiny_cond(n, cfg, 95);
    Mat z = randmat(3, n * S, 96);
    CHECK((r.predict_noise(z, 2, cond) - m.predict_noise(z, 2, cond)).cwiseAbs().maxCoeff() <
          1e-6);
}
