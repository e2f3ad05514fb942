#include "dawn/lfg.hpp"

#include <cmath>
#include <iostream>

#include "dawn/common.hpp"

namespace dawn::lfg {

Mat MotionField::packed() const {
    Mat p(3, flow.cols());
    p.topRows(2) = flow;
    p.row(2) = mask.row(0);
    return p;
}

MotionField MotionField::unpack(const Mat& p) {
    MotionField m;
    m.flow = p.topRows(2);
    m.mask = p.row(2);
    return m;
}

Var image_var(const Image& img) {
    Mat row(1, img.size());
    for (Eigen::Index i = 0; i < img.rows(); ++i)
        for (Eigen::Index j = 0; j < img.cols(); ++j) row(0, i * img.cols() + j) = img(i, j);
    return ad::constant(std::move(row));
}

Image image_from_row(const Mat& row, int res) {
    Image img(res, res);
    for (int i = 0; i < res; ++i)
        for (int j = 0; j < res; ++j) img(i, j) = row(0, i * res + j);
    return img;
}

LfgModel LfgModel::create(const LfgConfig& cfg, std::uint64_t seed) {
    LfgModel m;
    m.cfg = cfg;
    nn::Rng rng(seed);
    auto& ps = m.ps;
    const int w1 = cfg.enc_w1, w2 = cfg.enc_w2;
    m.e1 = nn::make_conv2d(ps, "enc.c1", 1, w1, 3, 2, 1, rng);
    m.e2 = nn::make_conv2d(ps, "enc.c2", w1, w2, 3, 2, 1, rng);
    m.e3 = nn::make_conv2d(ps, "enc.c3", w2, cfg.cz, 3, 1, 1, rng);
    m.p1 = nn::make_conv2d(ps, "pred.c1", 2, w1, 3, 2, 1, rng);
    m.p2 = nn::make_conv2d(ps, "pred.c2", w1, w2, 3, 2, 1, rng);
    m.p3 = nn::make_conv2d(ps, "pred.c3", w2, w2, 3, 1, 1, rng);
    m.p4 = nn::make_conv2d(ps, "pred.c4", w2, 3, 3, 1, 1, rng);
    m.d1 = nn::make_conv2d(ps, "dec.c1", cfg.cz, w2, 3, 1, 1, rng);
    m.d2 = nn::make_conv2d(ps, "dec.c2", w2, w1, 3, 1, 1, rng);
    m.d3 = nn::make_conv2d(ps, "dec.c3", w1, 16, 3, 1, 1, rng);
    m.d4 = nn::make_conv2d(ps, "dec.c4", 16, 1, 3, 1, 1, rng);
    return m;
}

Var LfgModel::encode_v(const Var& frame) const {
    const int r = cfg.res;
    require(frame->val.rows() == 1 && frame->val.cols() == r * r,
            "encode: frame shape mismatch with checkpoint config");
    Var x = ad::silu(e1(frame, r, r, 1));
    x = ad::silu(e2(x, r / 2, r / 2, 1));
    return e3(x, r / 4, r / 4, 1);
}

Var LfgModel::predict_flow_v(const Var& src, const Var& dri) const {
    const int r = cfg.res;
    require(src->val.cols() == r * r && dri->val.cols() == r * r,
            "predict_flow: frame shape mismatch");
    Var x = ad::concat_rows({src, dri});
    x = ad::silu(p1(x, r, r, 1));
    x = ad::silu(p2(x, r / 2, r / 2, 1));
    x = ad::silu(p3(x, r / 4, r / 4, 1));
    Var head = p4(x, r / 4, r / 4, 1);
    // flow bounded by wz via scaled tanh, mask in [0,1] via sigmoid
    Var flow = ad::scale(ad::tanh_(ad::scale(ad::slice_rows(head, 0, 2), 1.0 / cfg.wz)),
                         static_cast<double>(cfg.wz));
    Var mask = ad::sigmoid(ad::slice_rows(head, 2, 1));
    return ad::concat_rows({flow, mask});
}

Var LfgModel::decode_v(const Var& latent) const {
    const int hz = cfg.hz;
    require(latent->val.rows() == cfg.cz && latent->val.cols() == hz * cfg.wz,
            "decode: latent shape mismatch with checkpoint config");
    Var x = ad::silu(d1(latent, hz, hz, 1));
    x = ad::upsample2(x, hz, hz, 1);
    x = ad::silu(d2(x, hz * 2, hz * 2, 1));
    x = ad::upsample2(x, hz * 2, hz * 2, 1);
    x = ad::silu(d3(x, hz * 4, hz * 4, 1));
    return ad::sigmoid(d4(x, hz * 4, hz * 4, 1));
}

Mat LfgModel::encode(const Image& frame) const {
    ad::NoGradGuard ng;
    return encode_v(image_var(frame))->val;
}

MotionField LfgModel::predict_flow(const Image& src, const Image& dri) const {
    ad::NoGradGuard ng;
    return MotionField::unpack(predict_flow_v(image_var(src), image_var(dri))->val);
}

Image LfgModel::decode(const Mat& latent) const {
    ad::NoGradGuard ng;
    return image_from_row(decode_v(ad::constant(latent))->val, cfg.res);
}

Image LfgModel::reconstruct(const Image& src, const Image& dri) const {
    ad::NoGradGuard ng;
    Var s = image_var(src);
    Var z = encode_v(s);
    Var m = predict_flow_v(s, image_var(dri));
    Var warped = ad::warp_bilinear(z, ad::slice_rows(m, 0, 2), ad::slice_rows(m, 2, 1),
                                   cfg.hz, cfg.wz);
    return image_from_row(decode_v(warped)->val, cfg.res);
}

Mat warp(const Mat& latent, const MotionField& motion, int hz, int wz) {
    ad::NoGradGuard ng;
    return ad::warp_bilinear(ad::constant(latent), ad::constant(motion.flow),
                             ad::constant(motion.mask), hz, wz)
        ->val;
}

Var multi_scale_recon_loss_v(const Var& a, const Var& b, int res) {
    require(a->val.cols() == b->val.cols() && a->val.rows() == b->val.rows(),
            "recon loss shape mismatch");
    Var diff = ad::abs_(ad::sub(a, b));
    Var total = ad::mean_all(diff);
    Var da = a, db = b;
    int r = res;
    for (int s = 0; s < 2; ++s) {
        da = ad::avgpool2(da, r, r, 1);
        db = ad::avgpool2(db, r, r, 1);
        r /= 2;
        total = ad::add(total, ad::mean_all(ad::abs_(ad::sub(da, db))));
    }
    return ad::scale(total, 1.0 / 3.0);
}

double multi_scale_recon_loss(const Image& a, const Image& b) {
    require(a.rows() == b.rows() && a.cols() == b.cols(), "recon loss shape mismatch");
    ad::NoGradGuard ng;
    return multi_scale_recon_loss_v(image_var(a), image_var(b), static_cast<int>(a.rows()))
        ->val(0, 0);
}

LfgModel train_lfg(const synth::CorpusManifest& manifest, const TrainConfig& cfg,
                   std::uint64_t seed, std::ostream* log) {
    auto train_clips = manifest.split_clips("train");
    require(!train_clips.empty(), "corpus has no training clips");

    LfgModel model = LfgModel::create(LfgConfig{manifest.resolution}, seed);
    if (cfg.steps <= 0) return model;

    // preload all training frames
    std::vector<std::vector<Image>> clips;
    clips.reserve(train_clips.size());
    for (const auto& e : train_clips)
        clips.push_back(synth::load_clip(manifest, e.id).frames);

    nn::Rng rng(seed + 1);
    nn::Adam opt;
    opt.lr = cfg.lr;
    const int hz = model.cfg.hz, wz = model.cfg.wz;

    double smoothed = -1.0, initial = -1.0;
    for (int step = 0; step < cfg.steps; ++step) {
        model.ps.zero_grad();
        double batch_loss = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& clip = clips[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(clips.size()) - 1))];
            const int n = static_cast<int>(clip.size());
            const int i = rng.uniform_int(0, n - 1);
            // identity pairs keep the untouched-latent decode path on-manifold
            const int j = rng.uniform() < 0.1 ? i : rng.uniform_int(0, n - 1);
            Var src = image_var(clip[static_cast<std::size_t>(i)]);
            Var dri = image_var(clip[static_cast<std::size_t>(j)]);
            Var z = model.encode_v(src);
            Var m = model.predict_flow_v(src, dri);
            Var warped = ad::warp_bilinear(z, ad::slice_rows(m, 0, 2),
                                           ad::slice_rows(m, 2, 1), hz, wz);
            Var rec = model.decode_v(warped);
            Var loss = ad::scale(multi_scale_recon_loss_v(rec, dri, model.cfg.res),
                                 1.0 / cfg.batch);
            ad::backward(loss);
            batch_loss += loss->val(0, 0);
        }
        if (!std::isfinite(batch_loss))
            throw numeric_error("lfg training diverged at step " + std::to_string(step));
        opt.step(model.ps);
        model.train_steps++;
        smoothed = smoothed < 0 ? batch_loss : 0.98 * smoothed + 0.02 * batch_loss;
        if (initial < 0) initial = batch_loss;
        if (log && (step % 100 == 0 || step + 1 == cfg.steps))
            *log << "lfg step " << step << " loss " << batch_loss << " smoothed " << smoothed
                 << "\n";
    }
    return model;
}

void save_checkpoint(const LfgModel& model, const std::filesystem::path& dir) {
    KvFile kv;
    kv.set("kind", "lfg");
    kv.set("res", std::to_string(model.cfg.res));
    kv.set("hz", std::to_string(model.cfg.hz));
    kv.set("wz", std::to_string(model.cfg.wz));
    kv.set("cz", std::to_string(model.cfg.cz));
    kv.set("enc_w1", std::to_string(model.cfg.enc_w1));
    kv.set("enc_w2", std::to_string(model.cfg.enc_w2));
    kv.set("train_steps", std::to_string(model.train_steps));
    model.ps.save(dir, kv);
    save_kv(dir / "manifest.txt", kv);
}

LfgModel load_checkpoint(const std::filesystem::path& dir) {
    KvFile kv = load_kv(dir / "manifest.txt");
    if (kv.get_or("kind", "") != "lfg") throw io_error("not an LFG checkpoint: " + dir.string());
    LfgConfig cfg;
    cfg.res = std::stoi(kv.get("res"));
    cfg.hz = std::stoi(kv.get("hz"));
    cfg.wz = std::stoi(kv.get("wz"));
    cfg.cz = std::stoi(kv.get("cz"));
    cfg.enc_w1 = std::stoi(kv.get("enc_w1"));
    cfg.enc_w2 = std::stoi(kv.get("enc_w2"));
    LfgModel m = LfgModel::create(cfg, 0);
    m.ps.load_values(dir, kv);
    m.train_steps = std::stol(kv.get("train_steps"));
    return m;
}

}  // namespace dawn::lfg
