#include "dawn/synth.hpp"

#include <cmath>
#include <random>
#include <sstream>

#include "dawn/common.hpp"
#include "dawn/nn.hpp"

namespace dawn::synth {

namespace {

// Canonical face geometry in normalized [0,1]^2 coordinates.
constexpr double kHeadCx = 0.5, kHeadCy = 0.5, kHeadRx = 0.32, kHeadRy = 0.40;
constexpr double kEyeDx = 0.13, kEyeCy = 0.38, kEyeRx = 0.07, kEyeRyMax = 0.055;
constexpr double kMouthCx = 0.5, kMouthCy = 0.70, kMouthRx = 0.12, kMouthRyMax = 0.09;
constexpr double kHoleTone = 0.1;
constexpr double kAaBand = 0.05;   // anti-aliasing half-width in normalized d units
constexpr double kLipDilate = 1.15;

Eigen::Matrix2d pose_matrix(const Eigen::Matrix<double, 6, 1>& pose) {
    const double shy = pose(0), shp = pose(1), roll = pose(2), s = std::exp(pose(5));
    Eigen::Matrix2d shear;
    shear << 1.0, shy, shp, 1.0;
    Eigen::Matrix2d rot;
    rot << std::cos(roll), -std::sin(roll), std::sin(roll), std::cos(roll);
    return s * rot * shear;
}

// pixel-space normalized point for a canonical point q
Eigen::Vector2d pose_forward(const Eigen::Matrix<double, 6, 1>& pose, const Eigen::Vector2d& q) {
    Eigen::Vector2d c(0.5, 0.5), t(pose(3), pose(4));
    return c + pose_matrix(pose) * (q - c) + t;
}

Eigen::Vector2d pose_inverse(const Eigen::Matrix<double, 6, 1>& pose, const Eigen::Vector2d& p) {
    Eigen::Vector2d c(0.5, 0.5), t(pose(3), pose(4));
    return c + pose_matrix(pose).inverse() * (p - c - t);
}

double ellipse_d(const Eigen::Vector2d& q, double cx, double cy, double rx, double ry) {
    const double dx = (q.x() - cx) / rx, dy = (q.y() - cy) / ry;
    return std::sqrt(dx * dx + dy * dy);
}

double coverage(double d) {
    return std::min(1.0, std::max(0.0, 0.5 + (1.0 - d) / (2.0 * kAaBand)));
}

double bilinear_at(const Image& img, double row, double col) {
    const int H = static_cast<int>(img.rows()), W = static_cast<int>(img.cols());
    row = std::min(std::max(row, 0.0), H - 1.0);
    col = std::min(std::max(col, 0.0), W - 1.0);
    int r0 = std::min(static_cast<int>(row), H - 2), c0 = std::min(static_cast<int>(col), W - 2);
    if (H == 1) r0 = 0;
    if (W == 1) c0 = 0;
    const double wr = row - r0, wc = col - c0;
    const int r1 = std::min(r0 + 1, H - 1), c1 = std::min(c0 + 1, W - 1);
    return (1 - wr) * ((1 - wc) * img(r0, c0) + wc * img(r0, c1)) +
           wr * ((1 - wc) * img(r1, c0) + wc * img(r1, c1));
}

double raw_mouth_measure(const Image& frame, const Eigen::Matrix<double, 6, 1>& pose, int res) {
    constexpr int kGx = 16, kGy = 12;
    double acc = 0;
    for (int gy = 0; gy < kGy; ++gy)
        for (int gx = 0; gx < kGx; ++gx) {
            const double qx = kMouthCx + kMouthRx * (2.0 * (gx + 0.5) / kGx - 1.0);
            const double qy = kMouthCy + kMouthRyMax * (2.0 * (gy + 0.5) / kGy - 1.0);
            Eigen::Vector2d p = pose_forward(pose, {qx, qy});
            acc += kFaceTone - bilinear_at(frame, p.y() * res - 0.5, p.x() * res - 0.5);
        }
    return acc / (kGx * kGy);
}

double mouth_measure_scale(int res) {
    // calibrate once per resolution on the canonical full-open render
    static thread_local int cached_res = -1;
    static thread_local double cached_scale = 1.0;
    if (cached_res != res) {
        FaceParams p;
        p.mouth_open = 1.0;
        Image f = render_frame(p, res);
        cached_scale = 1.0 / raw_mouth_measure(f, p.pose, res);
        cached_res = res;
    }
    return cached_scale;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
    std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
}

Tensor tensor_from_images(const std::vector<Image>& imgs) {
    Tensor t;
    const auto n = static_cast<std::uint32_t>(imgs.size());
    const auto res = static_cast<std::uint32_t>(imgs[0].rows());
    t.dims = {n, res, res};
    t.f32.reserve(static_cast<std::size_t>(n) * res * res);
    for (const auto& img : imgs)
        for (Eigen::Index i = 0; i < img.rows(); ++i)
            for (Eigen::Index j = 0; j < img.cols(); ++j)
                t.f32.push_back(static_cast<float>(img(i, j)));
    return t;
}

Tensor tensor_from_masks(const std::vector<MaskImage>& masks) {
    Tensor t;
    t.dtype = Tensor::DType::U8;
    const auto n = static_cast<std::uint32_t>(masks.size());
    const auto res = static_cast<std::uint32_t>(masks[0].rows());
    t.dims = {n, res, res};
    t.u8.reserve(static_cast<std::size_t>(n) * res * res);
    for (const auto& m : masks)
        for (Eigen::Index i = 0; i < m.rows(); ++i)
            for (Eigen::Index j = 0; j < m.cols(); ++j) t.u8.push_back(m(i, j));
    return t;
}

}  // namespace

void FaceParams::validate() const {
    require(std::abs(pose(2)) <= M_PI / 4 + 1e-12, "roll out of range");
    require(std::abs(pose(3)) <= 0.25 && std::abs(pose(4)) <= 0.25, "translation out of range");
    require(std::abs(pose(5)) <= 0.3 + 1e-12, "log-scale out of range");
    require(mouth_open >= 0.0 && mouth_open <= 1.0, "mouth_open out of range");
    require(ear_left > 0.0 && ear_left <= 1.0 && ear_right > 0.0 && ear_right <= 1.0,
            "eye aspect ratio out of range");
    require(pose.allFinite(), "pose must be finite");
}

AudioTrack synth_audio_features(int duration_frames, std::uint64_t seed) {
    require(duration_frames >= 1, "duration_frames must be positive");
    nn::Rng rng(mix_seed(seed, 0xA0D10));
    const int N = duration_frames;

    Eigen::VectorXd raw = Eigen::VectorXd::Zero(N);
    int t = 0;
    bool on = rng.uniform() < 0.5;
    while (t < N) {
        if (on) {
            const int len = rng.uniform_int(4, 10);
            const double amp = 0.5 + 0.45 * rng.uniform();
            for (int i = 0; i < len && t < N; ++i) raw(t++) = amp;
        } else {
            t += rng.uniform_int(2, 8);
        }
        on = !on;
    }

    // 3-frame moving average, edge-clamped
    Eigen::VectorXd env(N);
    for (int i = 0; i < N; ++i) {
        const double a = raw(std::max(0, i - 1));
        const double b = raw(i);
        const double c = raw(std::min(N - 1, i + 1));
        env(i) = std::min(1.0, std::max(0.0, (a + b + c) / 3.0));
    }

    Eigen::VectorXd diff = Eigen::VectorXd::Zero(N);
    for (int i = 1; i < N; ++i) diff(i) = env(i) - env(i - 1);

    auto delayed = [&](int d, int i) { return env(std::max(0, i - d)); };

    AudioTrack track;
    track.features.resize(N, kAudioChannels);
    for (int i = 0; i < N; ++i) {
        track.features(i, 0) = env(i);
        track.features(i, 1) = delayed(1, i);
        track.features(i, 2) = delayed(2, i);
        track.features(i, 3) = diff(i);
        track.features(i, 4) = std::max(0.0, diff(i));
        track.features(i, 5) = env(i) * env(i);
        track.features(i, 6) = 0.5 * (env(i) + delayed(3, i));
        track.features(i, 7) = std::abs(diff(i));
    }
    return track;
}

Image render_frame(const FaceParams& params, int res) {
    params.validate();
    Image img = Image::Zero(res, res);
    const double mouth_ry = kMouthRyMax * params.mouth_open;
    for (int i = 0; i < res; ++i)
        for (int j = 0; j < res; ++j) {
            const Eigen::Vector2d p((j + 0.5) / res, (i + 0.5) / res);
            const Eigen::Vector2d q = pose_inverse(params.pose, p);
            double v = 0.0;
            const double head = coverage(ellipse_d(q, kHeadCx, kHeadCy, kHeadRx, kHeadRy));
            v += head * (kFaceTone - v);
            auto hole = [&](double cx, double cy, double rx, double ry) {
                if (ry < 1e-9 || rx < 1e-9) return;
                const double cov = coverage(ellipse_d(q, cx, cy, rx, ry));
                v += cov * (kHoleTone - v);
            };
            hole(kHeadCx - kEyeDx, kEyeCy, kEyeRx, kEyeRyMax * params.ear_left);
            hole(kHeadCx + kEyeDx, kEyeCy, kEyeRx, kEyeRyMax * params.ear_right);
            hole(kMouthCx, kMouthCy, kMouthRx, mouth_ry);
            img(i, j) = v;
        }
    return img;
}

double measure_mouth_open(const Image& frame, const PoseBlink& pose, int res) {
    const Eigen::Matrix<double, 6, 1> p6 = pose.head<6>();
    return raw_mouth_measure(frame, p6, res) * mouth_measure_scale(res);
}

MaskImage lip_mask_for(const PoseBlink& pose, int res) {
    MaskImage m(res, res);
    const Eigen::Matrix<double, 6, 1> p6 = pose.head<6>();
    for (int i = 0; i < res; ++i)
        for (int j = 0; j < res; ++j) {
            const Eigen::Vector2d q =
                pose_inverse(p6, {(j + 0.5) / res, (i + 0.5) / res});
            const bool lip = ellipse_d(q, kMouthCx, kMouthCy, kMouthRx * kLipDilate,
                                       kMouthRyMax * kLipDilate) <= 1.0;
            const bool face = ellipse_d(q, kHeadCx, kHeadCy, kHeadRx, kHeadRy) <= 1.0;
            m(i, j) = (lip && face) ? 1 : 0;
        }
    return m;
}

MaskImage face_mask_for(const PoseBlink& pose, int res) {
    MaskImage m(res, res);
    const Eigen::Matrix<double, 6, 1> p6 = pose.head<6>();
    for (int i = 0; i < res; ++i)
        for (int j = 0; j < res; ++j) {
            const Eigen::Vector2d q =
                pose_inverse(p6, {(j + 0.5) / res, (i + 0.5) / res});
            m(i, j) = ellipse_d(q, kHeadCx, kHeadCy, kHeadRx, kHeadRy) <= 1.0 ? 1 : 0;
        }
    return m;
}

namespace {

struct PoseWalk {
    // second-order bounded random walk: OU on velocity, reflect at bounds
    Eigen::Matrix<double, 6, 1> x = Eigen::Matrix<double, 6, 1>::Zero();
    Eigen::Matrix<double, 6, 1> v = Eigen::Matrix<double, 6, 1>::Zero();
    Eigen::Matrix<double, 6, 1> bound;

    PoseWalk() { bound << 0.22, 0.22, 0.35, 0.18, 0.18, 0.22; }

    void step(nn::Rng& rng) {
        for (int d = 0; d < 6; ++d) {
            v(d) += -0.15 * v(d) + 0.01 * bound(d) * rng.normal();
            x(d) += v(d);
            if (x(d) > bound(d)) {
                x(d) = 2 * bound(d) - x(d);
                v(d) = -v(d);
            } else if (x(d) < -bound(d)) {
                x(d) = -2 * bound(d) - x(d);
                v(d) = -v(d);
            }
        }
    }
};

}  // namespace

CorpusManifest generate_corpus(int clips, int frames_per_clip, std::uint64_t seed,
                               const std::filesystem::path& out_dir, int res) {
    require(clips >= 1, "clips must be >= 1");
    require(frames_per_clip >= 16, "frames_per_clip must be >= 16");

    std::error_code ec;
    std::filesystem::create_directories(out_dir / "clips", ec);
    if (ec) throw io_error("cannot create corpus directory " + out_dir.string());

    CorpusManifest manifest;
    manifest.dir = out_dir;
    manifest.seed = seed;
    manifest.resolution = res;

    const int first_test = (clips * 9 + 9) / 10;  // 90/10 split by clip index

    for (int c = 0; c < clips; ++c) {
        char idbuf[16];
        std::snprintf(idbuf, sizeof idbuf, "%04d", c);
        const std::string id = idbuf;
        const int N = frames_per_clip;

        AudioTrack audio = synth_audio_features(N, mix_seed(seed, 2 * c));
        nn::Rng rng(mix_seed(seed, 2 * c + 1));

        PoseWalk walk;
        double ear_base = 0.8;
        Eigen::VectorXd ear(N);
        Eigen::MatrixXd poses(N, 8);
        std::vector<Image> frames;
        std::vector<MaskImage> lips, faces;
        frames.reserve(N);

        // blink schedule: sparse 3-frame V dips, no overlap
        std::vector<double> ear_trace(N);
        for (int i = 0; i < N; ++i) {
            ear_base += 0.02 * (0.8 - ear_base) + 0.004 * rng.normal();
            ear_base = std::min(0.95, std::max(0.65, ear_base));
            ear_trace[i] = ear_base;
        }
        for (int i = 0; i < N - 2; ++i) {
            if (rng.uniform() < 0.4 / 25.0) {
                const double sh = 0.1 + 0.25 * (ear_trace[i] - 0.1);
                ear_trace[i] = sh;
                ear_trace[i + 1] = 0.1;
                ear_trace[i + 2] = sh;
                i += 5;  // refractory gap keeps blinks disjoint
            }
        }

        for (int i = 0; i < N; ++i) {
            walk.step(rng);
            FaceParams fp;
            fp.pose = walk.x;
            fp.mouth_open = mouth_transfer(audio.features(i, 0));
            fp.ear_left = fp.ear_right = ear_trace[i];
            poses.row(i).head<6>() = fp.pose.transpose();
            poses(i, 6) = fp.ear_left;
            poses(i, 7) = fp.ear_right;
            frames.push_back(render_frame(fp, res));
            PoseBlink pb = poses.row(i).transpose();
            lips.push_back(lip_mask_for(pb, res));
            faces.push_back(face_mask_for(pb, res));
        }

        const auto clip_dir = out_dir / "clips" / id;
        std::filesystem::create_directories(clip_dir, ec);
        if (ec) throw io_error("cannot create clip directory " + clip_dir.string());
        save_dten(clip_dir / "frames.dten", tensor_from_images(frames));
        {
            Tensor t = tensor_from_matrix(audio.features);
            save_dten(clip_dir / "audio.dten", t);
        }
        save_dten(clip_dir / "poses.dten", tensor_from_matrix(poses));
        save_dten(clip_dir / "lip_masks.dten", tensor_from_masks(lips));
        save_dten(clip_dir / "face_masks.dten", tensor_from_masks(faces));

        manifest.clips.push_back({id, c >= first_test ? "test" : "train", N});
    }

    KvFile kv;
    kv.set("format_version", "1");
    kv.set("seed", std::to_string(seed));
    kv.set("resolution", std::to_string(res));
    kv.set("fps", "25");
    kv.set("clip_count", std::to_string(clips));
    for (const auto& e : manifest.clips)
        kv.entries.emplace_back("clip", e.id + " " + e.split + " " + std::to_string(e.frames));
    save_kv(out_dir / "manifest.txt", kv);
    return manifest;
}

CorpusManifest load_manifest(const std::filesystem::path& dir) {
    KvFile kv = load_kv(dir / "manifest.txt");
    CorpusManifest m;
    m.dir = dir;
    m.version = std::stoi(kv.get("format_version"));
    m.seed = std::stoull(kv.get("seed"));
    m.resolution = std::stoi(kv.get("resolution"));
    m.fps = std::stoi(kv.get_or("fps", "25"));
    for (const auto& line : kv.all("clip")) {
        std::istringstream ss(line);
        CorpusManifest::Entry e;
        ss >> e.id >> e.split >> e.frames;
        if (!std::filesystem::exists(dir / "clips" / e.id / "frames.dten"))
            throw io_error("manifest lists missing clip " + e.id);
        m.clips.push_back(e);
    }
    return m;
}

std::vector<CorpusManifest::Entry> CorpusManifest::split_clips(const std::string& split) const {
    std::vector<Entry> out;
    for (const auto& e : clips)
        if (e.split == split) out.push_back(e);
    return out;
}

ClipRecord load_clip(const CorpusManifest& manifest, const std::string& clip_id) {
    const auto dir = manifest.dir / "clips" / clip_id;
    ClipRecord clip;
    clip.clip_id = clip_id;
    clip.fps = manifest.fps;

    Tensor tf = load_dten(dir / "frames.dten");
    const int N = static_cast<int>(tf.dims[0]);
    const int res = static_cast<int>(tf.dims[1]);
    clip.frames.resize(N, Image(res, res));
    std::size_t k = 0;
    for (int n = 0; n < N; ++n)
        for (int i = 0; i < res; ++i)
            for (int j = 0; j < res; ++j) clip.frames[n](i, j) = tf.f32[k++];

    clip.audio.features = matrix_from_tensor(load_dten(dir / "audio.dten"));
    clip.poses = matrix_from_tensor(load_dten(dir / "poses.dten"));

    auto load_masks = [&](const char* name, std::vector<MaskImage>& out) {
        Tensor t = load_dten(dir / name);
        out.resize(N, MaskImage(res, res));
        std::size_t p = 0;
        for (int n = 0; n < N; ++n)
            for (int i = 0; i < res; ++i)
                for (int j = 0; j < res; ++j) out[n](i, j) = t.u8[p++];
    };
    load_masks("lip_masks.dten", clip.lip_masks);
    load_masks("face_masks.dten", clip.face_masks);
    return clip;
}

}  // namespace dawn::synth
