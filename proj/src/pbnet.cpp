#include "dawn/pbnet.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dawn/common.hpp"

namespace dawn::pbnet {

namespace {

Block make_block(nn::ParamStore& ps, const std::string& name, int width, int heads,
                 nn::Rng& rng) {
    Block b;
    b.ln1 = nn::make_layernorm(ps, name + ".ln1", width);
    b.ln2 = nn::make_layernorm(ps, name + ".ln2", width);
    b.attn = nn::make_attention(ps, name + ".attn", width, heads, true, rng);
    b.m1 = nn::make_linear(ps, name + ".m1", width, 2 * width, rng);
    b.m2 = nn::make_linear(ps, name + ".m2", 2 * width, width, rng);
    return b;
}

// one prefixed segment covering the whole sequence; prefix rope position -1
Var run_blocks(const std::vector<Block>& blocks, Var x, int n, int window) {
    std::vector<std::pair<int, int>> seg{{0, n + 1}};
    std::vector<double> pos(static_cast<std::size_t>(n) + 1);
    pos[0] = -1.0;
    for (int i = 0; i < n; ++i) pos[static_cast<std::size_t>(i) + 1] = static_cast<double>(i);
    for (const auto& b : blocks) {
        x = ad::add(x, b.attn.forward_segments(b.ln1(x), seg, &pos, window, 1));
        x = ad::add(x, b.m2(ad::silu(b.m1(b.ln2(x)))));
    }
    return x;
}

Mat rho_row(const PoseBlink& rho) { return rho.transpose(); }

}  // namespace

PbModel PbModel::create(const PbConfig& cfg, std::uint64_t seed) {
    require(cfg.window >= 2 * (cfg.train_len - 1), "train length exceeds attention window");
    PbModel m;
    m.cfg = cfg;
    nn::Rng rng(seed);
    auto& ps = m.ps;
    const int w = cfg.width;
    m.enc_in = nn::make_linear(ps, "enc.in", 8 + cfg.ca, w, rng);
    m.enc_src = nn::make_linear(ps, "enc.src", 8, w, rng);
    for (int i = 0; i < cfg.enc_layers; ++i)
        m.enc.push_back(make_block(ps, "enc.b" + std::to_string(i), w, cfg.heads, rng));
    m.mu_head = nn::make_linear(ps, "enc.mu", w, cfg.ch, rng);
    m.logsig_head = nn::make_linear(ps, "enc.ls", w, cfg.ch, rng);
    m.dec_in = nn::make_linear(ps, "dec.in", cfg.ch + cfg.ca, w, rng);
    m.dec_src = nn::make_linear(ps, "dec.src", 8, w, rng);
    for (int i = 0; i < cfg.dec_layers; ++i)
        m.dec.push_back(make_block(ps, "dec.b" + std::to_string(i), w, cfg.heads, rng));
    m.dec_out = nn::make_linear(ps, "dec.out", w, 8, rng);
    m.blink_head = nn::make_linear(ps, "dec.blink", w, 1, rng);
    // bias -2: gate nearly closed at init but with live gradients
    m.blink_head.b->val.setConstant(-2.0);
    m.blink_depth = ps.var("dec.blinkdepth", 1, 2, [](Eigen::Index r, Eigen::Index c) {
        return Mat::Constant(r, c, 0.45);  // softplus(0.45) ~ 0.94, near a full blink dip
    });
    m.d1 = nn::make_conv1d(m.dps, "d.c1", 8, 32, 4, 2, 1, rng);
    m.d2 = nn::make_conv1d(m.dps, "d.c2", 32, 64, 4, 2, 1, rng);
    m.d3 = nn::make_conv1d(m.dps, "d.c3", 64, 1, 4, 2, 1, rng);
    return m;
}

std::pair<Var, Var> PbModel::encode_v(const PoseBlink& rho_src, const Var& delta_rho,
                                      const Mat& audio) const {
    const int n = static_cast<int>(delta_rho->val.rows());
    require(delta_rho->val.cols() == 8, "delta_rho must be N x 8");
    require(audio.rows() == n && audio.cols() == cfg.ca, "audio length/channel mismatch");
    Var tok = enc_in(ad::concat_cols({delta_rho, ad::constant(audio)}));
    Var src = enc_src(ad::constant(rho_row(rho_src)));
    Var x = run_blocks(enc, ad::concat_rows({src, tok}), n, 0);
    Var body = ad::slice_rows(x, 1, n);
    return {mu_head(body), logsig_head(body)};
}

Var PbModel::decode_body_v(const PoseBlink& rho_src, const Var& h, const Mat& audio) const {
    const int n = static_cast<int>(h->val.rows());
    require(h->val.cols() == cfg.ch, "latent must be N x C_h");
    require(audio.rows() == n && audio.cols() == cfg.ca, "audio length/channel mismatch");
    Var tok = dec_in(ad::concat_cols({h, ad::constant(audio)}));
    Var src = dec_src(ad::constant(rho_row(rho_src)));
    Var x = run_blocks(dec, ad::concat_rows({src, tok}), n, cfg.window);
    return ad::slice_rows(x, 1, n);
}

Var PbModel::gate_v(const Var& body) const {
    const int n = static_cast<int>(body->val.rows());
    // 3-frame smoothing so gate bursts span at least the detector's minimum
    Mat smooth = Mat::Zero(n, n);
    for (int t = 0; t < n; ++t) {
        const int lo = std::max(0, t - 1), hi = std::min(n - 1, t + 1);
        for (int k = lo; k <= hi; ++k) smooth(t, k) = 1.0 / (hi - lo + 1);
    }
    return ad::sigmoid(ad::matmul(ad::constant(std::move(smooth)), blink_head(body)));
}

Var PbModel::decode_v(const PoseBlink& rho_src, const Var& h, const Mat& audio,
                      bool detach_blink) const {
    Var body = decode_body_v(rho_src, h, audio);
    Var out = dec_out(body);
    // structured EAR head: the smoothed gate carves a dip out of the base
    Var dip = ad::matmul(gate_v(body), ad::softplus(blink_depth));
    if (detach_blink) dip = ad::constant(dip->val);
    return ad::concat_cols(
        {ad::slice_cols(out, 0, 6), ad::sub(ad::slice_cols(out, 6, 2), dip)});
}

Var PbModel::disc_v(const Var& delta_rho) const {
    Var x = ad::transpose(delta_rho);  // (8, N)
    x = ad::silu(d1(x));
    x = ad::silu(d2(x));
    return d3(x);
}

std::pair<Mat, Mat> pb_encode(const PbModel& m, const PoseBlink& rho_src, const Mat& delta_rho,
                              const Mat& audio) {
    ad::NoGradGuard ng;
    auto [mu, ls] = m.encode_v(rho_src, ad::constant(delta_rho), audio);
    return {mu->val, ls->val};
}

Mat pb_sample_latent(const Mat& mu, const Mat& log_sigma, std::uint64_t seed) {
    require(mu.rows() == log_sigma.rows() && mu.cols() == log_sigma.cols(),
            "mu/log_sigma shape mismatch");
    nn::Rng rng(seed);
    return mu + log_sigma.array().exp().matrix().cwiseProduct(
                    nn::randn(rng, mu.rows(), mu.cols(), 1.0));
}

Mat pb_decode(const PbModel& m, const Mat& h, const Mat& audio, const PoseBlink& rho_src) {
    ad::NoGradGuard ng;
    return m.decode_v(rho_src, ad::constant(h), audio)->val;
}

Mat pb_generate(const PbModel& m, const PoseBlink& rho_src, const Mat& audio,
                std::uint64_t seed) {
    require(audio.rows() >= 1, "empty audio");
    nn::Rng rng(seed);
    Mat h = nn::randn(rng, audio.rows(), m.cfg.ch, 1.0);
    Mat delta = pb_decode(m, h, audio, rho_src);
    Mat rho = delta;
    rho.rowwise() += rho_row(rho_src).row(0);
    rho.rightCols(2) = rho.rightCols(2).cwiseMax(1e-3).cwiseMin(1.0);
    return rho;
}

Var kl_loss_v(const Var& mu, const Var& log_sigma) {
    Var var = ad::exp_(ad::scale(log_sigma, 2.0));
    Var inner = ad::sub(ad::add(ad::square(mu), var), ad::scale(log_sigma, 2.0));
    return ad::scale(ad::mean_all(ad::add_scalar(inner, -1.0)), 0.5);
}

Var bce_logits_v(const Var& logits, double target) {
    // softplus(x) - target * x, mean over patches
    Var sp = ad::softplus(logits);
    return ad::mean_all(target == 0.0 ? sp : ad::sub(sp, ad::scale(logits, target)));
}

double pb_lambda_kl(long step, long total_steps, double lambda_max) {
    const double frac = total_steps <= 0 ? 1.0 : static_cast<double>(step) / total_steps;
    if (frac <= 0.25) return 0.0;
    return lambda_max * std::min(1.0, (frac - 0.25) / 0.75);
}

PbLosses pb_losses(const PbModel& m, const PbBatchItem& item, std::uint64_t seed) {
    ad::NoGradGuard ng;
    Var delta = ad::constant(item.delta_rho);
    auto [mu, ls] = m.encode_v(item.rho_src, delta, item.audio);
    Mat h = pb_sample_latent(mu->val, ls->val, seed);
    Var delta_hat = m.decode_v(item.rho_src, ad::constant(h), item.audio);
    PbLosses out;
    out.mse = ad::mse(delta_hat, delta)->val(0, 0);
    out.kl = kl_loss_v(mu, ls)->val(0, 0);
    Var fake = m.disc_v(delta_hat);
    Var real = m.disc_v(delta);
    out.gan_g = bce_logits_v(fake, 1.0)->val(0, 0);
    out.gan_d = 0.5 * (bce_logits_v(real, 1.0)->val(0, 0) + bce_logits_v(fake, 0.0)->val(0, 0));
    return out;
}

PbModel train_pbnet(const synth::CorpusManifest& manifest, const TrainConfig& cfg,
                    std::uint64_t seed, std::ostream* log) {
    auto train_entries = manifest.split_clips("train");
    require(!train_entries.empty(), "corpus has no training clips");

    PbConfig mcfg;
    int min_frames = train_entries[0].frames;
    for (const auto& e : train_entries) min_frames = std::min(min_frames, e.frames);
    mcfg.train_len = std::min(mcfg.train_len, min_frames);
    require(mcfg.train_len >= 16, "corpus clips too short for pbnet training");

    PbModel model = PbModel::create(mcfg, seed);
    if (cfg.steps <= 0) return model;

    struct ClipData {
        Mat poses, audio;
    };
    std::vector<ClipData> clips;
    clips.reserve(train_entries.size());
    for (const auto& e : train_entries) {
        synth::ClipRecord rec = synth::load_clip(manifest, e.id);
        clips.push_back({rec.poses, rec.audio.features});
    }

    nn::Rng rng(seed + 31);
    nn::Adam gopt, dopt;
    gopt.lr = cfg.lr;
    dopt.lr = cfg.lr;
    const int L = mcfg.train_len;

    double smoothed = -1.0;
    for (int step = 0; step < cfg.steps; ++step) {
        const double lam_kl = pb_lambda_kl(step, cfg.steps, mcfg.lambda_kl_max);
        std::vector<PbBatchItem> items;
        std::vector<Mat> prior_h;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& c = clips[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(clips.size()) - 1))];
            const int n = static_cast<int>(c.poses.rows());
            const int start = rng.uniform_int(0, n - L);
            PbBatchItem it;
            it.rho_src = c.poses.row(start).transpose();
            it.delta_rho = c.poses.middleRows(start, L);
            it.delta_rho.rowwise() -= c.poses.row(start);
            it.audio = c.audio.middleRows(start, L);
            items.push_back(it);
            prior_h.push_back(nn::randn(rng, L, mcfg.ch, 1.0));
        }

        // discriminator first, on detached fakes from the current generator:
        // reconstructions plus prior-sampled decodes, so it judges exactly
        // what pb_generate produces and the generator cannot stay one update
        // ahead of it
        double d_loss = 0;
        for (int ds = 0; ds < 2; ++ds) {
            model.dps.zero_grad();
            d_loss = 0;
            for (int b = 0; b < cfg.batch; ++b) {
                const auto& it = items[static_cast<std::size_t>(b)];
                Mat hat, gen;
                {
                    ad::NoGradGuard ng;
                    auto [mu, ls] = model.encode_v(it.rho_src, ad::constant(it.delta_rho),
                                                   it.audio);
                    Mat h = mu->val + ls->val.array().exp().matrix().cwiseProduct(
                                          nn::randn(rng, L, mcfg.ch, 1.0));
                    hat = model.decode_v(it.rho_src, ad::constant(std::move(h)), it.audio)->val;
                    gen = model.decode_v(it.rho_src,
                                         ad::constant(prior_h[static_cast<std::size_t>(b)]),
                                         it.audio)
                              ->val;
                }
                Var lr_ = bce_logits_v(model.disc_v(ad::constant(it.delta_rho)), 1.0);
                Var lf1 = bce_logits_v(model.disc_v(ad::constant(std::move(hat))), 0.0);
                Var lf2 = bce_logits_v(model.disc_v(ad::constant(std::move(gen))), 0.0);
                Var dl = ad::add(ad::scale(lr_, 0.5 / cfg.batch),
                                 ad::scale(ad::add(lf1, lf2), 0.25 / cfg.batch));
                ad::backward(dl);
                d_loss += dl->val(0, 0);
            }
            dopt.step(model.dps);
        }

        model.ps.zero_grad();
        model.dps.zero_grad();
        double g_loss = 0;
        for (int b = 0; b < cfg.batch; ++b) {
            const auto& it = items[static_cast<std::size_t>(b)];
            Var delta = ad::constant(it.delta_rho);
            auto [mu, ls] = model.encode_v(it.rho_src, delta, it.audio);
            Mat xi = nn::randn(rng, L, mcfg.ch, 1.0);
            Var h = ad::add(mu, ad::mul(ad::exp_(ls), ad::constant(std::move(xi))));
            Var delta_hat = model.decode_v(it.rho_src, h, it.audio);
            Var loss = ad::scale(ad::mse(delta_hat, delta), mcfg.lambda_rec);
            if (lam_kl > 0) loss = ad::add(loss, ad::scale(kl_loss_v(mu, ls), lam_kl));
            loss = ad::add(loss, ad::scale(bce_logits_v(model.disc_v(delta_hat), 1.0),
                                           mcfg.lambda_gan));
            Var delta_gen = model.decode_v(
                it.rho_src, ad::constant(prior_h[static_cast<std::size_t>(b)]), it.audio);
            loss = ad::add(loss, ad::scale(bce_logits_v(model.disc_v(delta_gen), 1.0),
                                           mcfg.lambda_gan));
            loss = ad::scale(loss, 1.0 / cfg.batch);
            ad::backward(loss);
            g_loss += loss->val(0, 0);
        }
        if (!std::isfinite(g_loss))
            throw numeric_error("pbnet training diverged at step " + std::to_string(step));
        gopt.step(model.ps);

        model.train_steps++;
        smoothed = smoothed < 0 ? g_loss : 0.98 * smoothed + 0.02 * g_loss;
        if (log && (step % 100 == 0 || step + 1 == cfg.steps))
            *log << "pbnet step " << step << " g " << g_loss << " d " << d_loss << " lam_kl "
                 << lam_kl << " smoothed " << smoothed << "\n";
    }
    return model;
}

void save_checkpoint(const PbModel& m, const std::filesystem::path& dir) {
    KvFile kv;
    kv.set("kind", "pbnet");
    const auto& c = m.cfg;
    kv.set("ch", std::to_string(c.ch));
    kv.set("ca", std::to_string(c.ca));
    kv.set("width", std::to_string(c.width));
    kv.set("heads", std::to_string(c.heads));
    kv.set("enc_layers", std::to_string(c.enc_layers));
    kv.set("dec_layers", std::to_string(c.dec_layers));
    kv.set("window", std::to_string(c.window));
    kv.set("train_len", std::to_string(c.train_len));
    kv.set("train_steps", std::to_string(m.train_steps));
    m.ps.save(dir, kv);
    save_kv(dir / "manifest.txt", kv);
    KvFile dkv;
    m.dps.save(dir, dkv);
    save_kv(dir / "disc.txt", dkv);
}

PbModel load_checkpoint(const std::filesystem::path& dir) {
    KvFile kv = load_kv(dir / "manifest.txt");
    if (kv.get_or("kind", "") != "pbnet")
        throw io_error("not a PBNet checkpoint: " + dir.string());
    PbConfig c;
    c.ch = std::stoi(kv.get("ch"));
    c.ca = std::stoi(kv.get("ca"));
    c.width = std::stoi(kv.get("width"));
    c.heads = std::stoi(kv.get("heads"));
    c.enc_layers = std::stoi(kv.get("enc_layers"));
    c.dec_layers = std::stoi(kv.get("dec_layers"));
    c.window = std::stoi(kv.get("window"));
    c.train_len = std::stoi(kv.get("train_len"));
    PbModel m = PbModel::create(c, 0);
    m.ps.load_values(dir, kv);
    m.dps.load_values(dir, load_kv(dir / "disc.txt"));
    m.train_steps = std::stol(kv.get("train_steps"));
    return m;
}

}  // namespace dawn::pbnet
