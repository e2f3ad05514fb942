#include <doctest.h>

#include <filesystem>

#include "dawn/lfg.hpp"
#include "test_util.hpp"

using namespace dawn;
using ad::Mat;
using synth::Image;
namespace fs = std::filesystem;

TEST_CASE("motion field pack/unpack round trip") {
    lfg::MotionField m;
    m.flow = testutil::randmat(2, 16, 1);
    m.mask = testutil::randmat(1, 16, 2);
    auto r = lfg::MotionField::unpack(m.packed());
    CHECK((r.flow - m.flow).cwiseAbs().maxCoeff() == 0.0);
    CHECK((r.mask - m.mask).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("multi-scale recon loss oracles") {
    // constant offset: every pyramid level sees the same mean L1
    Image a = Image::Zero(32, 32), b = Image::Constant(32, 32, 0.3);
    CHECK(lfg::multi_scale_recon_loss(a, b) == doctest::Approx(0.3));

    // single hot pixel: averaging preserves total mass, so every level
    // contributes 1/1024 and the pyramid mean equals 1/1024
    Image c = Image::Zero(32, 32);
    c(5, 7) = 1.0;
    CHECK(lfg::multi_scale_recon_loss(Image::Zero(32, 32), c) ==
          doctest::Approx(1.0 / 1024).epsilon(1e-9));

    CHECK(lfg::multi_scale_recon_loss(b, b) == doctest::Approx(0.0));
}

TEST_CASE("model shapes and determinism") {
    auto m = lfg::LfgModel::create({}, 7);
    synth::FaceParams p;
    p.mouth_open = 0.4;
    Image f = synth::render_frame(p, 32);
    Mat z = m.encode(f);
    CHECK(z.rows() == 32);
    CHECK(z.cols() == 64);
    Mat z2 = m.encode(f);
    CHECK((z - z2).cwiseAbs().maxCoeff() == 0.0);

    auto mf = m.predict_flow(f, f);
    CHECK(mf.flow.rows() == 2);
    CHECK(mf.flow.cols() == 64);
    CHECK(mf.flow.cwiseAbs().maxCoeff() <= 8.0);  // tanh-bounded by the grid size
    CHECK(mf.mask.minCoeff() >= 0.0);
    CHECK(mf.mask.maxCoeff() <= 1.0);

    Image dec = m.decode(z);
    CHECK(dec.rows() == 32);
    CHECK(dec.minCoeff() >= 0.0);
    CHECK(dec.maxCoeff() <= 1.0);
}

TEST_CASE("warp wrapper matches identity on zero flow") {
    auto m = lfg::LfgModel::create({}, 3);
    Mat z = testutil::randmat(32, 64, 5);
    lfg::MotionField mf;
    mf.flow = Mat::Zero(2, 64);
    mf.mask = Mat::Ones(1, 64);
    CHECK((lfg::warp(z, mf, 8, 8) - z).cwiseAbs().maxCoeff() < 1e-9);
}

TEST_CASE("checkpoint round trip preserves predictions") {
    auto m = lfg::LfgModel::create({}, 21);
    m.train_steps = 17;
    auto dir = fs::temp_directory_path() / "dawn_lfg_ckpt";
    fs::remove_all(dir);
    lfg::save_checkpoint(m, dir);
    auto r = lfg::load_checkpoint(dir);
    CHECK(r.train_steps == 17);
    CHECK(r.cfg.cz == m.cfg.cz);

    synth::FaceParams p;
    p.mouth_open = 0.8;
    Image f = synth::render_frame(p, 32);
    // parameters round-trip through float32 storage
    CHECK((r.encode(f) - m.encode(f)).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((r.reconstruct(f, f) - m.reconstruct(f, f)).cwiseAbs().maxCoeff() < 1e-5);
}

TEST_CASE("short training run decreases reconstruction loss") {
    auto dir = fs::temp_directory_path() / "dawn_lfg_train";
    fs::remove_all(dir);
    auto manifest = synth::generate_corpus(3, 20, 9, dir);

    auto init = lfg::train_lfg(manifest, {0, 4, 2e-4}, 33);
    lfg::TrainConfig tc{40, 4, 1e-3};
    auto trained = lfg::train_lfg(manifest, tc, 33);
    CHECK(trained.train_steps == 40);

    auto clip = synth::load_clip(manifest, manifest.clips[0].id);
    double before = 0, after = 0;
    for (int i : {0, 5, 10}) {
        const auto& src = clip.frames[0];
        const auto& dri = clip.frames[static_cast<std::size_t>(i)];
        before += lfg::multi_scale_recon_loss(init.reconstruct(src, dri), dri);
        after += lfg::multi_scale_recon_loss(trained.reconstruct(src, dri), dri);
    }
    CHECK(after < before);
}
