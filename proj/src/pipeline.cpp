#include "dawn/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <sstream>

#include "dawn/common.hpp"

namespace dawn::pipeline {

namespace {

double now_s() {
    return std::chrono::duration<double>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

Image mask_from_pixels(const Image& frame) {
    return (frame.array() > 0.05).cast<double>();
}

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

}  // namespace

PipelineConfig load_pipeline_config(const std::filesystem::path& file) {
    KvFile kv = load_kv(file);
    PipelineConfig c;
    c.lfg_ckpt = kv.get_or("lfg", "");
    c.pbnet_ckpt = kv.get_or("pbnet", "");
    c.fdm_ckpt = kv.get_or("fdm", "");
    c.corpus = kv.get_or("corpus", "");
    c.sampler = kv.get_or("sampler", "ddim");
    c.steps = std::stoi(kv.get_or("steps", "50"));
    c.fdm_window = std::stoi(kv.get_or("fdm_window", "80"));
    c.pbnet_window = std::stoi(kv.get_or("pbnet_window", "400"));
    c.seed = std::stoull(kv.get_or("seed", "0"));
    c.out_dir = kv.get_or("out", "");
    require(c.steps >= 1, "steps must be >= 1");
    require(c.fdm_window >= 1 && c.pbnet_window >= 1, "window values must be >= 1");
    return c;
}

Pipeline load_pipeline(const PipelineConfig& cfg, bool need_pbnet) {
    Pipeline p;
    p.lfg = lfg::load_checkpoint(cfg.lfg_ckpt);
    p.fdm = fdm::load_checkpoint(cfg.fdm_ckpt);
    p.fdm.cfg.window = cfg.fdm_window;
    if (need_pbnet) {
        require(!cfg.pbnet_ckpt.empty(), "pbnet checkpoint required");
        p.pb = pbnet::load_checkpoint(cfg.pbnet_ckpt);
        p.pb.cfg.window = cfg.pbnet_window;
        p.has_pb = true;
    }
    require(p.lfg.cfg.cz == p.fdm.cfg.cz && p.lfg.cfg.hz == p.fdm.cfg.hz,
            "lfg/fdm checkpoint latent geometry mismatch");
    return p;
}

fdm::Sampler sampler_from_string(const std::string& s) {
    if (s == "ddpm") return fdm::Sampler::Ddpm;
    if (s == "ddim") return fdm::Sampler::Ddim;
    throw invalid_argument("unknown sampler: " + s);
}

namespace {

// steps 3-4 of the inference recipe: motion diffusion + per-frame decode
struct MotionDecode {
    std::vector<Image> frames;
    double motion_s = 0, decode_s = 0;
    int sampler_invocations = 0;
};

MotionDecode run_motion_decode(const Image& src_frame, const Image& face_mask,
                               const Mat& audio, const Mat& delta_rho, const Pipeline& p,
                               const PipelineConfig& cfg, std::uint64_t seed) {
    MotionDecode out;
    const auto sampler = sampler_from_string(cfg.sampler);
    const int S = p.fdm.cfg.hz * p.fdm.cfg.wz;
    double t0 = now_s();
    Mat z_src = p.lfg.encode(src_frame);
    Mat motion = fdm::generate_motion(p.fdm, z_src, face_mask, audio, delta_rho, sampler,
                                      cfg.steps, seed);
    out.motion_s = now_s() - t0;
    out.sampler_invocations =
        sampler == fdm::Sampler::Ddpm ? p.fdm.cfg.T : std::min(cfg.steps, p.fdm.cfg.T);

    t0 = now_s();
    const int n = static_cast<int>(audio.rows());
    out.frames.reserve(static_cast<std::size_t>(n));
    for (int f = 0; f < n; ++f) {
        lfg::MotionField m = lfg::MotionField::unpack(
            motion.middleCols(static_cast<Eigen::Index>(f) * S, S));
        out.frames.push_back(
            p.lfg.decode(lfg::warp(z_src, m, p.fdm.cfg.hz, p.fdm.cfg.wz)));
    }
    out.decode_s = now_s() - t0;
    return out;
}

}  // namespace

InferResult infer(const SourceInput& src, const Mat& audio, const Pipeline& p,
                  const PipelineConfig& cfg) {
    require(p.has_pb, "infer requires a pbnet checkpoint");
    require(audio.rows() >= 1, "empty audio");
    const double t_start = now_s();

    InferResult res;
    res.report.strategy = "nar";
    PoseBlink rho_src = PoseBlink::Zero();
    if (src.pose) rho_src = *src.pose;
    else res.report.zero_source_pose = true;
    Image face_mask = src.face_mask ? *src.face_mask : mask_from_pixels(src.frame);

    double t0 = now_s();
    res.poses = pbnet::pb_generate(p.pb, rho_src, audio, cfg.seed);
    res.report.pose_s = now_s() - t0;

    Mat delta = res.poses;
    delta.rowwise() -= rho_src.transpose();
    MotionDecode md =
        run_motion_decode(src.frame, face_mask, audio, delta, p, cfg, cfg.seed + 1);
    res.frames = std::move(md.frames);
    res.report.motion_s = md.motion_s;
    res.report.decode_s = md.decode_s;
    res.report.sampler_invocations = md.sampler_invocations;
    res.report.frames = static_cast<int>(res.frames.size());
    res.report.total_s = now_s() - t_start;
    return res;
}

InferResult infer_sar(const SourceInput& src, const Mat& audio, const Pipeline& p,
                      const PipelineConfig& cfg, int chunk_len) {
    require(p.has_pb, "infer requires a pbnet checkpoint");
    require(chunk_len >= 2, "chunk length must be >= 2");
    require(chunk_len <= p.fdm.cfg.kmax, "chunk length exceeds fdm training max length");
    require(audio.rows() >= 1, "empty audio");
    const double t_start = now_s();

    InferResult res;
    res.report.strategy = "sar";
    PoseBlink rho_src = PoseBlink::Zero();
    if (src.pose) rho_src = *src.pose;
    else res.report.zero_source_pose = true;

    double t0 = now_s();
    res.poses = pbnet::pb_generate(p.pb, rho_src, audio, cfg.seed);
    res.report.pose_s = now_s() - t0;

    const int n = static_cast<int>(audio.rows());
    Image cur_frame = src.frame;
    PoseBlink cur_pose = rho_src;
    Image cur_mask = src.face_mask ? *src.face_mask : mask_from_pixels(src.frame);

    int chunk = 0;
    for (int start = 0; start < n; start += chunk_len, ++chunk) {
        const double tc = now_s();
        const int len = std::min(chunk_len, n - start);
        Mat delta = res.poses.middleRows(start, len);
        delta.rowwise() -= cur_pose.transpose();
        MotionDecode md = run_motion_decode(cur_frame, cur_mask, audio.middleRows(start, len),
                                            delta, p, cfg, cfg.seed + 1 + chunk);
        res.report.motion_s += md.motion_s;
        res.report.decode_s += md.decode_s;
        res.report.sampler_invocations += md.sampler_invocations;
        for (auto& f : md.frames) res.frames.push_back(std::move(f));
        // carry the decoded tail over as the next chunk's source
        cur_frame = res.frames.back();
        cur_pose = res.poses.row(start + len - 1).transpose();
        cur_mask = synth::face_mask_for(cur_pose, static_cast<int>(cur_frame.rows()))
                       .cast<double>();
        res.report.chunk_s.push_back(now_s() - tc);
    }
    res.report.frames = static_cast<int>(res.frames.size());
    res.report.total_s = now_s() - t_start;
    return res;
}

InferResult reenact(const SourceInput& src, const Mat& audio, const Mat& driving_poses,
                    const Pipeline& p, const PipelineConfig& cfg) {
    require(driving_poses.rows() == audio.rows() && driving_poses.cols() == 8,
            "driving clip must supply an N x 8 pose track");
    const double t_start = now_s();

    InferResult res;
    res.report.strategy = "nar";
    PoseBlink rho_src = PoseBlink::Zero();
    if (src.pose) rho_src = *src.pose;
    else res.report.zero_source_pose = true;
    Image face_mask = src.face_mask ? *src.face_mask : mask_from_pixels(src.frame);

    res.poses = driving_poses;
    Mat delta = driving_poses;
    delta.rowwise() -= rho_src.transpose();
    MotionDecode md =
        run_motion_decode(src.frame, face_mask, audio, delta, p, cfg, cfg.seed + 1);
    res.frames = std::move(md.frames);
    res.report.motion_s = md.motion_s;
    res.report.decode_s = md.decode_s;
    res.report.sampler_invocations = md.sampler_invocations;
    res.report.frames = static_cast<int>(res.frames.size());
    res.report.total_s = now_s() - t_start;
    return res;
}

namespace {

SourceInput source_from_clip(const synth::ClipRecord& rec) {
    SourceInput s;
    s.frame = rec.frames.front();
    s.pose = rec.poses.row(0).transpose();
    s.face_mask = rec.face_masks.front().cast<double>();
    return s;
}

std::vector<Image> head(const std::vector<Image>& v, int n) {
    return {v.begin(), v.begin() + n};
}

}  // namespace

std::vector<SweepRow> extrapolation_sweep(const Pipeline& p, const PipelineConfig& cfg,
                                          const synth::CorpusManifest& manifest,
                                          const std::vector<int>& lengths, int n_clips) {
    require(!lengths.empty(), "no lengths given");
    auto test_clips = manifest.split_clips("test");
    require(!test_clips.empty(), "corpus has no held-out clips");
    n_clips = std::min<int>(n_clips, static_cast<int>(test_clips.size()));
    const int max_len = *std::max_element(lengths.begin(), lengths.end());

    std::vector<synth::ClipRecord> clips;
    for (int i = 0; i < n_clips; ++i) {
        auto rec = synth::load_clip(manifest, test_clips[static_cast<std::size_t>(i)].id);
        require(static_cast<int>(rec.frames.size()) >= max_len,
                "held-out clip " + rec.clip_id + " shorter than sweep length " +
                    std::to_string(max_len));
        clips.push_back(std::move(rec));
    }

    std::vector<SweepRow> rows;
    for (int len : lengths) {
        require(len >= 2, "sweep length must be >= 2");
        SweepRow row;
        row.length = len;
        std::vector<Image> gen_all, ref_all;
        double lip_sum = 0, dr_sum = 0;
        int dr_count = 0;
        for (const auto& rec : clips) {
            PipelineConfig c = cfg;
            InferResult res = infer(source_from_clip(rec), rec.audio.features.topRows(len),
                                    p, c);
            lip_sum += metrics::lip_sync_corr(res.frames, res.poses,
                                              rec.audio.features.col(0).head(len));
            std::vector<Image> ref = head(rec.frames, len);
            if (len >= 50) {
                dr_sum += metrics::degradation_rate(res.frames, ref, 25,
                                                    metrics::Embedder::LfgEncoderPooled,
                                                    &p.lfg)
                              .dr;
                ++dr_count;
            }
            gen_all.insert(gen_all.end(), res.frames.begin(), res.frames.end());
            ref_all.insert(ref_all.end(), ref.begin(), ref.end());
        }
        auto fa = metrics::embed_frames(gen_all, metrics::Embedder::LfgEncoderPooled, &p.lfg);
        auto fb = metrics::embed_frames(ref_all, metrics::Embedder::LfgEncoderPooled, &p.lfg);
        row.frechet = metrics::frechet_distance(fa, fb);
        row.fvd16 = metrics::fvd_window(fa, fb, 16);
        row.fvd32 = metrics::fvd_window(fa, fb, 32);
        row.lip_corr = lip_sum / n_clips;
        if (dr_count > 0) row.dr25 = dr_sum / dr_count;
        rows.push_back(row);
    }
    return rows;
}

std::vector<StrategyRow> bench_strategies(const Pipeline& p, const PipelineConfig& cfg,
                                          const synth::CorpusManifest& manifest, int length,
                                          int n_clips) {
    auto test_clips = manifest.split_clips("test");
    require(!test_clips.empty(), "corpus has no held-out clips");
    n_clips = std::min<int>(n_clips, static_cast<int>(test_clips.size()));
    require(n_clips >= 1, "need at least one clip");

    std::vector<StrategyRow> rows(2);
    rows[0].strategy = "nar";
    rows[1].strategy = "sar";
    std::vector<std::vector<double>> times(2);
    std::vector<double> fre(2, 0), dr25(2, 0), dr50(2, 0), lip(2, 0);

    for (int i = 0; i < n_clips; ++i) {
        auto rec = synth::load_clip(manifest, test_clips[static_cast<std::size_t>(i)].id);
        require(static_cast<int>(rec.frames.size()) >= length, "clip shorter than bench length");
        SourceInput src = source_from_clip(rec);
        Mat audio = rec.audio.features.topRows(length);
        std::vector<Image> ref = head(rec.frames, length);

        for (int s = 0; s < 2; ++s) {
            InferResult res = s == 0 ? infer(src, audio, p, cfg)
                                     : infer_sar(src, audio, p, cfg, 40);
            times[static_cast<std::size_t>(s)].push_back(res.report.total_s);
            rows[static_cast<std::size_t>(s)].frames = res.report.frames;
            auto fa =
                metrics::embed_frames(res.frames, metrics::Embedder::LfgEncoderPooled, &p.lfg);
            auto fb = metrics::embed_frames(ref, metrics::Embedder::LfgEncoderPooled, &p.lfg);
            fre[static_cast<std::size_t>(s)] += metrics::frechet_distance(fa, fb);
            dr25[static_cast<std::size_t>(s)] +=
                metrics::degradation_rate(res.frames, ref, 25,
                                          metrics::Embedder::LfgEncoderPooled, &p.lfg)
                    .dr;
            dr50[static_cast<std::size_t>(s)] +=
                metrics::degradation_rate(res.frames, ref, 50,
                                          metrics::Embedder::LfgEncoderPooled, &p.lfg)
                    .dr;
            lip[static_cast<std::size_t>(s)] += metrics::lip_sync_corr(
                res.frames, res.poses, rec.audio.features.col(0).head(length));
        }
    }
    for (int s = 0; s < 2; ++s) {
        auto& t = times[static_cast<std::size_t>(s)];
        std::sort(t.begin(), t.end());
        rows[static_cast<std::size_t>(s)].median_seconds = t[t.size() / 2];
        rows[static_cast<std::size_t>(s)].frechet = fre[static_cast<std::size_t>(s)] / n_clips;
        rows[static_cast<std::size_t>(s)].dr25 = dr25[static_cast<std::size_t>(s)] / n_clips;
        rows[static_cast<std::size_t>(s)].dr50 = dr50[static_cast<std::size_t>(s)] / n_clips;
        rows[static_cast<std::size_t>(s)].lip_corr = lip[static_cast<std::size_t>(s)] / n_clips;
    }
    return rows;
}

void write_infer_outputs(const std::filesystem::path& dir, const InferResult& res) {
    std::filesystem::create_directories(dir);
    const auto n = static_cast<std::uint32_t>(res.frames.size());
    require(n >= 1, "no frames to write");
    const auto h = static_cast<std::uint32_t>(res.frames[0].rows());
    const auto w = static_cast<std::uint32_t>(res.frames[0].cols());
    Tensor t;
    t.dtype = Tensor::DType::F32;
    t.dims = {n, h, w};
    t.f32.reserve(static_cast<std::size_t>(n) * h * w);
    for (const auto& f : res.frames)
        for (std::uint32_t i = 0; i < h; ++i)
            for (std::uint32_t j = 0; j < w; ++j) t.f32.push_back(static_cast<float>(f(i, j)));
    save_dten(dir / "frames.dten", t);
    save_dten(dir / "poses.dten", tensor_from_matrix(res.poses));

    KvFile rep;
    rep.set("strategy", res.report.strategy);
    rep.set("frames", std::to_string(res.report.frames));
    rep.set("zero_source_pose", res.report.zero_source_pose ? "1" : "0");
    rep.set("sampler_invocations", std::to_string(res.report.sampler_invocations));
    save_kv(dir / "report.txt", rep);

    KvFile tim;  // wall clock lives apart from the deterministic artifacts
    tim.set("pose_s", fmt(res.report.pose_s));
    tim.set("motion_s", fmt(res.report.motion_s));
    tim.set("decode_s", fmt(res.report.decode_s));
    tim.set("total_s", fmt(res.report.total_s));
    for (std::size_t i = 0; i < res.report.chunk_s.size(); ++i)
        tim.entries.emplace_back("chunk_s", fmt(res.report.chunk_s[i]));
    save_kv(dir / "timings.txt", tim);
}

std::vector<Image> read_frames_dten(const std::filesystem::path& file) {
    Tensor t = load_dten(file);
    require(t.dims.size() == 3 && t.dtype == Tensor::DType::F32,
            "frames tensor must be rank-3 f32");
    const std::uint32_t n = t.dims[0], h = t.dims[1], w = t.dims[2];
    std::vector<Image> out;
    out.reserve(n);
    std::size_t k = 0;
    for (std::uint32_t f = 0; f < n; ++f) {
        Image img(h, w);
        for (std::uint32_t i = 0; i < h; ++i)
            for (std::uint32_t j = 0; j < w; ++j) img(i, j) = t.f32[k++];
        out.push_back(std::move(img));
    }
    return out;
}

std::string sweep_text(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    for (const auto& r : rows) {
        os << "length = " << r.length << "\n"
           << "frechet = " << fmt(r.frechet) << "\n"
           << "fvd16 = " << fmt(r.fvd16) << "\n"
           << "fvd32 = " << fmt(r.fvd32) << "\n"
           << "lip_corr = " << fmt(r.lip_corr) << "\n";
        if (r.dr25) os << "dr_25 = " << fmt(*r.dr25) << "\n";
        os << "\n";
    }
    return os.str();
}

std::string sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << "length,frechet,fvd16,fvd32,lip_corr,dr25\n";
    for (const auto& r : rows) {
        os << r.length << "," << fmt(r.frechet) << "," << fmt(r.fvd16) << "," << fmt(r.fvd32)
           << "," << fmt(r.lip_corr) << ",";
        if (r.dr25) os << fmt(*r.dr25);
        os << "\n";
    }
    return os.str();
}

std::string bench_text(const std::vector<StrategyRow>& rows) {
    std::ostringstream os;
    for (const auto& r : rows)
        os << "strategy = " << r.strategy << "\n"
           << "frames = " << r.frames << "\n"
           << "median_seconds = " << fmt(r.median_seconds) << "\n"
           << "frechet = " << fmt(r.frechet) << "\n"
           << "dr_25 = " << fmt(r.dr25) << "\n"
           << "dr_50 = " << fmt(r.dr50) << "\n"
           << "lip_corr = " << fmt(r.lip_corr) << "\n\n";
    return os.str();
}

std::string bench_csv(const std::vector<StrategyRow>& rows) {
    std::ostringstream os;
    os << "strategy,frames,median_seconds,frechet,dr25,dr50,lip_corr\n";
    for (const auto& r : rows)
        os << r.strategy << "," << r.frames << "," << fmt(r.median_seconds) << ","
           << fmt(r.frechet) << "," << fmt(r.dr25) << "," << fmt(r.dr50) << ","
           << fmt(r.lip_corr) << "\n";
    return os.str();
}

}  // namespace dawn::pipeline
