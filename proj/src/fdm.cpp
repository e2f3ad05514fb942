#include "dawn/fdm.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>

#include "dawn/common.hpp"

namespace dawn::fdm {

DiffusionSchedule make_schedule(int T, double beta_min, double beta_max) {
    require(T >= 1, "schedule needs at least one step");
    require(beta_min > 0 && beta_max < 1 && beta_min <= beta_max, "bad beta range");
    DiffusionSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    double prod = 1.0;
    for (int i = 0; i < T; ++i) {
        double b = T == 1 ? beta_min
                          : beta_min + (beta_max - beta_min) * static_cast<double>(i) / (T - 1);
        s.beta(i) = b;
        s.alpha(i) = 1.0 - b;
        prod *= s.alpha(i);
        s.alpha_bar(i) = prod;
    }
    return s;
}

Mat forward_diffuse(const Mat& z0, int t, const Mat& noise, const DiffusionSchedule& sched) {
    require(t >= 1 && t <= sched.T, "diffusion step out of range");
    require(noise.rows() == z0.rows() && noise.cols() == z0.cols(), "noise shape mismatch");
    const double ab = sched.abar(t);
    return std::sqrt(ab) * z0 + std::sqrt(1.0 - ab) * noise;
}

Mat lip_mask_to_latent(const synth::MaskImage& mask, int hz, int wz) {
    const int bh = static_cast<int>(mask.rows()) / hz;
    const int bw = static_cast<int>(mask.cols()) / wz;
    require(bh * hz == mask.rows() && bw * wz == mask.cols(), "mask not divisible by grid");
    Mat out = Mat::Zero(1, hz * wz);
    for (int i = 0; i < hz; ++i)
        for (int j = 0; j < wz; ++j) {
            std::uint8_t m = 0;
            for (int a = 0; a < bh; ++a)
                for (int b = 0; b < bw; ++b) m = std::max(m, mask(i * bh + a, j * bw + b));
            out(0, i * wz + j) = static_cast<double>(m);
        }
    return out;
}

namespace {

// average-pool a [0,1] image onto the latent grid (soft coverage)
Mat pool_image_to_latent(const Image& img, int hz, int wz) {
    const int bh = static_cast<int>(img.rows()) / hz;
    const int bw = static_cast<int>(img.cols()) / wz;
    Mat out = Mat::Zero(1, hz * wz);
    for (int i = 0; i < hz; ++i)
        for (int j = 0; j < wz; ++j)
            out(0, i * wz + j) = img.block(i * bh, j * bw, bh, bw).mean();
    return out;
}

ResBlock make_resblock(nn::ParamStore& ps, const std::string& name, int ch, int temb_dim,
                       int cond_dim, nn::Rng& rng) {
    ResBlock r;
    r.ln1 = nn::make_channelnorm(ps, name + ".ln1", ch);
    r.ln2 = nn::make_channelnorm(ps, name + ".ln2", ch);
    r.c1 = nn::make_conv2d(ps, name + ".c1", ch, ch, 3, 1, 1, rng);
    r.c2 = nn::make_conv2d(ps, name + ".c2", ch, ch, 3, 1, 1, rng);
    r.temb = nn::make_linear(ps, name + ".t", temb_dim, ch, rng);
    r.cond = nn::make_linear(ps, name + ".cond", cond_dim, ch, rng);
    return r;
}

// x: (ch, n*H*W); temb: (1, temb_dim) const; cond_tok: (n, cond_dim) const
Var resblock_fwd(const ResBlock& r, const Var& x, int H, int W, int n, const Var& temb,
                 const Var& cond_tok, const std::vector<int>& frame_of_pos) {
    Var h = r.c1(ad::silu(r.ln1(x)), H, W, n);
    h = ad::add_colvec(h, ad::transpose(r.temb(temb)));
    Var c = ad::transpose(ad::gather_rows(r.cond(cond_tok), frame_of_pos));
    h = ad::add(h, c);
    h = r.c2(ad::silu(r.ln2(h)), H, W, n);
    return ad::add(x, h);
}

std::vector<std::pair<int, int>> frame_segments(int n, int S) {
    std::vector<std::pair<int, int>> segs;
    segs.reserve(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) segs.emplace_back(i * S, S);
    return segs;
}

// temporal attention over a (ch, n*H*W) frame-major map: permute tokens to
// site-major order, run per-site segments with RoPE, permute back
Var temporal_attn(const nn::MultiheadAttention& attn, const nn::ChannelNorm& ln, const Var& x,
                  int n, int S, int window) {
    Var tok = ad::transpose(ln(x));
    std::vector<int> perm(static_cast<std::size_t>(n) * S), inv(perm.size());
    std::vector<double> pos(perm.size());
    std::vector<std::pair<int, int>> segs;
    segs.reserve(static_cast<std::size_t>(S));
    for (int s = 0; s < S; ++s) {
        segs.emplace_back(s * n, n);
        for (int f = 0; f < n; ++f) {
            perm[static_cast<std::size_t>(s) * n + f] = f * S + s;
            inv[static_cast<std::size_t>(f) * S + s] = s * n + f;
            pos[static_cast<std::size_t>(s) * n + f] = static_cast<double>(f);
        }
    }
    Var y = attn.forward_segments(ad::gather_rows(tok, perm), segs, &pos, window, 0);
    return ad::add(x, ad::transpose(ad::gather_rows(y, inv)));
}

}  // namespace

FdmModel FdmModel::create(const FdmConfig& cfg, std::uint64_t seed) {
    require(cfg.hz > 0 && cfg.wz > 0 && cfg.window > 0, "bad fdm config");
    require(cfg.kmax <= cfg.window / 2 + 1, "training window must cover max clip length");
    FdmModel m;
    m.cfg = cfg;
    m.sched = make_schedule(cfg.T, cfg.beta_min, cfg.beta_max);
    nn::Rng rng(seed);
    auto& ps = m.ps;
    const int w1 = cfg.width1, w2 = cfg.width2;
    const int in_ch = 3 + cfg.cz + 1 + 2;  // motion + source id + face mask + grid coords
    const int cond_dim = cfg.ca + 8;
    m.L.in_c = nn::make_conv2d(ps, "in", in_ch, w1, 3, 1, 1, rng);
    m.L.ra = make_resblock(ps, "a.r", w1, cfg.temb_dim, cond_dim, rng);
    m.L.a_saln = nn::make_channelnorm(ps, "a.saln", w1);
    m.L.a_sa = nn::make_attention(ps, "a.sa", w1, cfg.heads, false, rng);
    m.L.a_taln = nn::make_channelnorm(ps, "a.taln", w1);
    m.L.a_ta = nn::make_attention(ps, "a.ta", w1, cfg.heads, true, rng);
    m.L.down = nn::make_conv2d(ps, "down", w1, w2, 3, 2, 1, rng);
    m.L.rb = make_resblock(ps, "b.r", w2, cfg.temb_dim, cond_dim, rng);
    m.L.b_taln = nn::make_channelnorm(ps, "b.taln", w2);
    m.L.b_ta = nn::make_attention(ps, "b.ta", w2, cfg.heads, true, rng);
    m.L.up = nn::make_conv2d(ps, "up", w2, w1, 3, 1, 1, rng);
    m.L.rc = make_resblock(ps, "c.r", w1, cfg.temb_dim, cond_dim, rng);
    m.L.out_ln = nn::make_channelnorm(ps, "out.ln", w1);
    m.L.out = nn::make_conv2d(ps, "out", w1, 3, 3, 1, 1, rng);
    return m;
}

Var FdmModel::denoise_v(const Var& z_t, int n, double t, const Cond& cond) const {
    const int hz = cfg.hz, wz = cfg.wz, S = hz * wz;
    require(z_t->val.rows() == 3 && z_t->val.cols() == static_cast<Eigen::Index>(n) * S,
            "denoise: motion shape mismatch");
    require(cond.audio.rows() == n && cond.audio.cols() == cfg.ca, "denoise: audio shape");
    require(cond.delta_rho.rows() == n && cond.delta_rho.cols() == 8, "denoise: pose shape");
    require(cond.z_src.rows() == cfg.cz && cond.z_src.cols() == S, "denoise: z_src shape");

    // static per-position conditioning channels, tiled over frames
    Mat zsrc_t = cond.z_src.replicate(1, n);
    Mat mask_row = pool_image_to_latent(cond.face_mask, hz, wz).replicate(1, n);
    Mat coords(2, static_cast<Eigen::Index>(n) * S);
    for (int f = 0; f < n; ++f)
        for (int i = 0; i < hz; ++i)
            for (int j = 0; j < wz; ++j) {
                const Eigen::Index p = static_cast<Eigen::Index>(f) * S + i * wz + j;
                coords(0, p) = 2.0 * j / (wz - 1) - 1.0;
                coords(1, p) = 2.0 * i / (hz - 1) - 1.0;
            }
    Var x = ad::concat_rows({z_t, ad::constant(std::move(zsrc_t)),
                             ad::constant(std::move(mask_row)), ad::constant(std::move(coords))});

    Var temb = ad::constant(nn::sinusoidal_embedding(t, cfg.temb_dim));
    Mat cond_tok(n, cfg.ca + 8);
    cond_tok << cond.audio, cond.delta_rho;
    Var ctok = ad::constant(std::move(cond_tok));

    std::vector<int> frame8(static_cast<std::size_t>(n) * S), frame4(static_cast<std::size_t>(n) * S / 4);
    for (std::size_t p = 0; p < frame8.size(); ++p) frame8[p] = static_cast<int>(p) / S;
    for (std::size_t p = 0; p < frame4.size(); ++p) frame4[p] = static_cast<int>(p) / (S / 4);

    Var h = L.in_c(x, hz, wz, n);
    h = resblock_fwd(L.ra, h, hz, wz, n, temb, ctok, frame8);
    {  // spatial attention, full within each frame
        Var tok = ad::transpose(L.a_saln(h));
        Var y = L.a_sa.forward_segments(tok, frame_segments(n, S), nullptr, 0, 0);
        h = ad::add(h, ad::transpose(y));
    }
    h = temporal_attn(L.a_ta, L.a_taln, h, n, S, cfg.window);
    Var skip = h;

    h = L.down(h, hz, wz, n);
    h = resblock_fwd(L.rb, h, hz / 2, wz / 2, n, temb, ctok, frame4);
    h = temporal_attn(L.b_ta, L.b_taln, h, n, S / 4, cfg.window);

    h = ad::upsample2(h, hz / 2, wz / 2, n);
    h = L.up(h, hz, wz, n);
    h = ad::add(h, skip);
    h = resblock_fwd(L.rc, h, hz, wz, n, temb, ctok, frame8);
    return L.out(ad::silu(L.out_ln(h)), hz, wz, n);
}

Mat FdmModel::predict_noise(const Mat& z_t, int t, const Cond& cond) const {
    ad::NoGradGuard ng;
    const int n = static_cast<int>(z_t.cols()) / (cfg.hz * cfg.wz);
    return denoise_v(ad::constant(z_t), n, static_cast<double>(t), cond)->val;
}

Mat FdmModel::standardize(const Mat& motion) const {
    Mat z = motion;
    for (int c = 0; c < 3; ++c) z.row(c) = (z.row(c).array() - stat_mean(c)) / stat_std(c);
    return z;
}

Mat FdmModel::destandardize(const Mat& z) const {
    Mat m = z;
    for (int c = 0; c < 3; ++c) m.row(c) = m.row(c).array() * stat_std(c) + stat_mean(c);
    m.row(2) = m.row(2).cwiseMax(0.0).cwiseMin(1.0);
    return m;
}

Var fdm_loss_v(const Var& eps_hat, const Mat& eps, const Mat& lip_mask_latent, double w_lip) {
    Var target = ad::constant(eps);
    Var base = ad::mse(eps_hat, target);
    const double msum = lip_mask_latent.sum();
    if (msum <= 0.0 || w_lip == 0.0) return base;
    const int n = static_cast<int>(lip_mask_latent.rows());
    const int S = static_cast<int>(lip_mask_latent.cols());
    Mat w(3, static_cast<Eigen::Index>(n) * S);
    for (int f = 0; f < n; ++f)
        for (int s = 0; s < S; ++s) w.col(static_cast<Eigen::Index>(f) * S + s).setConstant(
            lip_mask_latent(f, s));
    Var masked = ad::sum(ad::mul(ad::square(ad::sub(eps_hat, target)), ad::constant(std::move(w))));
    return ad::add(base, ad::scale(masked, w_lip / (3.0 * msum)));
}

double fdm_loss(const Mat& eps, const Mat& eps_hat, const Mat& lip_mask_latent, double w_lip) {
    ad::NoGradGuard ng;
    return fdm_loss_v(ad::constant(eps_hat), eps, lip_mask_latent, w_lip)->val(0, 0);
}

std::vector<TclSample> tcl_sample_batch(const std::vector<synth::CorpusManifest::Entry>& clips,
                                        int stage, int batch, nn::Rng& rng,
                                        const FdmConfig& cfg) {
    require(stage == 1 || stage == 2, "stage must be 1 or 2");
    require(!clips.empty(), "no clips to sample from");
    std::vector<TclSample> out;
    out.reserve(static_cast<std::size_t>(batch));
    for (int b = 0; b < batch; ++b) {
        TclSample s;
        s.clip_index = rng.uniform_int(0, static_cast<int>(clips.size()) - 1);
        const int frames = clips[static_cast<std::size_t>(s.clip_index)].frames;
        s.len = stage == 1 ? cfg.kprime : rng.uniform_int(cfg.kmin, cfg.kmax);
        require(frames >= s.len, "clip shorter than sampled window");
        s.start = rng.uniform_int(0, frames - s.len);
        s.src = stage == 1 ? s.start : rng.uniform_int(0, frames - 1);
        out.push_back(s);
    }
    return out;
}

namespace {

struct LoadedClip {
    std::vector<Image> frames;
    Mat audio;   // N x ca
    Mat poses;   // N x 8
    std::vector<synth::MaskImage> lip_masks;
    std::vector<Image> face_masks;
};

std::vector<LoadedClip> preload(const synth::CorpusManifest& manifest,
                                const std::vector<synth::CorpusManifest::Entry>& entries) {
    std::vector<LoadedClip> out;
    out.reserve(entries.size());
    for (const auto& e : entries) {
        synth::ClipRecord rec = synth::load_clip(manifest, e.id);
        LoadedClip c;
        c.frames = std::move(rec.frames);
        c.audio = rec.audio.features;
        c.poses = rec.poses;
        c.lip_masks = std::move(rec.lip_masks);
        c.face_masks.reserve(rec.face_masks.size());
        for (const auto& fm : rec.face_masks) c.face_masks.push_back(fm.cast<double>());
        out.push_back(std::move(c));
    }
    return out;
}

}  // namespace

FdmModel train_fdm(const synth::CorpusManifest& manifest, const lfg::LfgModel& lfg_model,
                   int stage, const TrainConfig& cfg, std::uint64_t seed,
                   const FdmModel* init, std::ostream* log) {
    require(stage == 1 || stage == 2, "stage must be 1 or 2");
    if (stage == 2)
        require(init != nullptr && init->cfg.stage >= 1,
                "stage 2 requires a stage-1 checkpoint");
    auto train_entries = manifest.split_clips("train");
    require(!train_entries.empty(), "corpus has no training clips");

    FdmConfig mcfg = init ? init->cfg : FdmConfig{};
    mcfg.res = manifest.resolution;
    FdmModel model = FdmModel::create(mcfg, seed);
    if (init) {
        require(init->ps.params.size() == model.ps.params.size(), "init param mismatch");
        for (std::size_t i = 0; i < model.ps.params.size(); ++i)
            model.ps.params[i].second->val = init->ps.params[i].second->val;
        model.stat_mean = init->stat_mean;
        model.stat_std = init->stat_std;
        model.has_stats = init->has_stats;
        model.train_steps = init->train_steps;
    }

    std::vector<LoadedClip> clips = preload(manifest, train_entries);
    nn::Rng rng(seed + 17);
    const int S = mcfg.hz * mcfg.wz;

    if (!model.has_stats) {
        // channel statistics of the frozen motion targets
        Eigen::Vector3d mean = Eigen::Vector3d::Zero(), sq = Eigen::Vector3d::Zero();
        long count = 0;
        const int n_pairs = 160;
        for (int k = 0; k < n_pairs; ++k) {
            const auto& c = clips[static_cast<std::size_t>(
                rng.uniform_int(0, static_cast<int>(clips.size()) - 1))];
            const int n = static_cast<int>(c.frames.size());
            Mat p = lfg_model
                        .predict_flow(c.frames[static_cast<std::size_t>(rng.uniform_int(0, n - 1))],
                                      c.frames[static_cast<std::size_t>(rng.uniform_int(0, n - 1))])
                        .packed();
            for (int ch = 0; ch < 3; ++ch) {
                mean(ch) += p.row(ch).sum();
                sq(ch) += p.row(ch).array().square().sum();
            }
            count += p.cols();
        }
        mean /= static_cast<double>(count);
        for (int ch = 0; ch < 3; ++ch)
            model.stat_std(ch) = std::max(
                1e-3, std::sqrt(std::max(0.0, sq(ch) / count - mean(ch) * mean(ch))));
        model.stat_mean = mean;
        model.has_stats = true;
    }

    nn::Adam opt;
    opt.lr = cfg.lr;
    double smoothed = -1.0;
    for (int step = 0; step < cfg.steps; ++step) {
        auto batch = tcl_sample_batch(train_entries, stage, cfg.batch, rng, mcfg);
        model.ps.zero_grad();
        double batch_loss = 0;
        for (const auto& s : batch) {
            const auto& c = clips[static_cast<std::size_t>(s.clip_index)];
            const auto src_idx = static_cast<std::size_t>(s.src);

            Mat z0(3, static_cast<Eigen::Index>(s.len) * S);
            Mat lipmask(s.len, S);
            for (int f = 0; f < s.len; ++f) {
                const auto fi = static_cast<std::size_t>(s.start + f);
                z0.middleCols(static_cast<Eigen::Index>(f) * S, S) =
                    lfg_model.predict_flow(c.frames[src_idx], c.frames[fi]).packed();
                lipmask.row(f) = lip_mask_to_latent(c.lip_masks[fi], mcfg.hz, mcfg.wz);
            }
            z0 = model.standardize(z0);

            Cond cond;
            cond.audio = c.audio.middleRows(s.start, s.len);
            cond.delta_rho = c.poses.middleRows(s.start, s.len);
            cond.delta_rho.rowwise() -= c.poses.row(s.src);
            cond.z_src = lfg_model.encode(c.frames[src_idx]);
            cond.face_mask = c.face_masks[src_idx];

            const int t = rng.uniform_int(1, mcfg.T);
            Mat noise = nn::randn(rng, 3, z0.cols(), 1.0);
            Mat z_t = forward_diffuse(z0, t, noise, model.sched);

            Var eps_hat = model.denoise_v(ad::constant(std::move(z_t)), s.len,
                                          static_cast<double>(t), cond);
            Var loss = ad::scale(fdm_loss_v(eps_hat, noise, lipmask, mcfg.w_lip),
                                 1.0 / cfg.batch);
            ad::backward(loss);
            batch_loss += loss->val(0, 0);
        }
        if (!std::isfinite(batch_loss))
            throw numeric_error("fdm training diverged at step " + std::to_string(step));
        opt.step(model.ps);
        model.train_steps++;
        smoothed = smoothed < 0 ? batch_loss : 0.98 * smoothed + 0.02 * batch_loss;
        if (log && (step % 50 == 0 || step + 1 == cfg.steps))
            *log << "fdm stage " << stage << " step " << step << " loss " << batch_loss
                 << " smoothed " << smoothed << "\n";
    }
    model.cfg.stage = std::max(model.cfg.stage, stage);
    return model;
}

Mat generate_motion(const FdmModel& model, const Mat& z_src, const Image& face_mask,
                    const Mat& audio, const Mat& delta_rho, Sampler sampler, int steps,
                    std::uint64_t seed) {
    require(model.cfg.stage >= 1, "model is untrained");
    const int n = static_cast<int>(audio.rows());
    require(n >= 1, "empty audio");
    require(delta_rho.rows() == n, "audio/pose length mismatch");
    const int S = model.cfg.hz * model.cfg.wz;
    const auto& sched = model.sched;

    Cond cond{audio, delta_rho, z_src, face_mask};
    nn::Rng rng(seed);
    Mat z = nn::randn(rng, 3, static_cast<Eigen::Index>(n) * S, 1.0);

    if (sampler == Sampler::Ddpm) {
        for (int t = sched.T; t >= 1; --t) {
            Mat eps = model.predict_noise(z, t, cond);
            const double a = sched.alpha_at(t), ab = sched.abar(t);
            z = (z - (sched.beta_at(t) / std::sqrt(1.0 - ab)) * eps) / std::sqrt(a);
            if (t > 1) z += std::sqrt(sched.posterior_var(t)) * nn::randn(rng, 3, z.cols(), 1.0);
        }
    } else {
        require(steps >= 1, "ddim needs at least one step");
        steps = std::min(steps, sched.T);
        std::vector<int> times;  // strictly decreasing, ends at 0
        for (int i = 0; i < steps; ++i)
            times.push_back(static_cast<int>(std::llround(
                static_cast<double>(sched.T) * (steps - i) / steps)));
        times.push_back(0);
        for (std::size_t i = 0; i + 1 < times.size(); ++i) {
            const int t = times[i], tp = times[i + 1];
            if (t == tp) continue;
            Mat eps = model.predict_noise(z, t, cond);
            const double ab = sched.abar(t), abp = sched.abar(tp);
            Mat x0 = (z - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
            z = std::sqrt(abp) * x0 + std::sqrt(1.0 - abp) * eps;
        }
    }
    return model.destandardize(z);
}

void save_checkpoint(const FdmModel& model, const std::filesystem::path& dir) {
    KvFile kv;
    kv.set("kind", "fdm");
    const auto& c = model.cfg;
    kv.set("hz", std::to_string(c.hz));
    kv.set("wz", std::to_string(c.wz));
    kv.set("cz", std::to_string(c.cz));
    kv.set("ca", std::to_string(c.ca));
    kv.set("width1", std::to_string(c.width1));
    kv.set("width2", std::to_string(c.width2));
    kv.set("heads", std::to_string(c.heads));
    kv.set("window", std::to_string(c.window));
    kv.set("temb_dim", std::to_string(c.temb_dim));
    kv.set("T", std::to_string(c.T));
    kv.set("kprime", std::to_string(c.kprime));
    kv.set("kmin", std::to_string(c.kmin));
    kv.set("kmax", std::to_string(c.kmax));
    kv.set("w_lip", std::to_string(c.w_lip));
    kv.set("res", std::to_string(c.res));
    kv.set("stage", std::to_string(c.stage));
    kv.set("train_steps", std::to_string(model.train_steps));
    model.ps.save(dir, kv);
    Mat stats(3, 2);
    stats.col(0) = model.stat_mean;
    stats.col(1) = model.stat_std;
    save_dten(dir / "stats.dten", tensor_from_matrix(stats));
    save_kv(dir / "manifest.txt", kv);
}

FdmModel load_checkpoint(const std::filesystem::path& dir) {
    KvFile kv = load_kv(dir / "manifest.txt");
    if (kv.get_or("kind", "") != "fdm") throw io_error("not an FDM checkpoint: " + dir.string());
    FdmConfig c;
    c.hz = std::stoi(kv.get("hz"));
    c.wz = std::stoi(kv.get("wz"));
    c.cz = std::stoi(kv.get("cz"));
    c.ca = std::stoi(kv.get("ca"));
    c.width1 = std::stoi(kv.get("width1"));
    c.width2 = std::stoi(kv.get("width2"));
    c.heads = std::stoi(kv.get("heads"));
    c.window = std::stoi(kv.get("window"));
    c.temb_dim = std::stoi(kv.get("temb_dim"));
    c.T = std::stoi(kv.get("T"));
    c.kprime = std::stoi(kv.get("kprime"));
    c.kmin = std::stoi(kv.get("kmin"));
    c.kmax = std::stoi(kv.get("kmax"));
    c.w_lip = std::stod(kv.get("w_lip"));
    c.res = std::stoi(kv.get("res"));
    c.stage = std::stoi(kv.get("stage"));
    FdmModel m = FdmModel::create(c, 0);
    m.ps.load_values(dir, kv);
    Mat stats = matrix_from_tensor(load_dten(dir / "stats.dten"));
    m.stat_mean = stats.col(0);
    m.stat_std = stats.col(1);
    m.has_stats = true;
    m.train_steps = std::stol(kv.get("train_steps"));
    return m;
}

}  // namespace dawn::fdm
