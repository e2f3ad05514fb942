#include "dawn/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "dawn/common.hpp"
#include "dawn/nn.hpp"

namespace dawn::metrics {

Embedder embedder_from_string(const std::string& s) {
    if (s == "lfg" || s == "lfg-encoder-pooled") return Embedder::LfgEncoderPooled;
    if (s == "proj" || s == "random-projection") return Embedder::RandomProjection;
    throw invalid_argument("unknown embedder: " + s);
}

FeatureSet embed_frames(const std::vector<Image>& frames, Embedder embedder,
                        const lfg::LfgModel* lfg_model, std::uint64_t proj_seed) {
    require(!frames.empty(), "no frames to embed");
    FeatureSet out;
    if (embedder == Embedder::LfgEncoderPooled) {
        require(lfg_model != nullptr, "lfg-encoder embedder needs a checkpoint");
        const int d = lfg_model->cfg.cz;
        out.embedder = "lfg-encoder-pooled";
        out.features.resize(static_cast<Eigen::Index>(frames.size()), d);
        for (std::size_t i = 0; i < frames.size(); ++i)
            out.features.row(static_cast<Eigen::Index>(i)) =
                lfg_model->encode(frames[i]).rowwise().mean().transpose();
    } else {
        const auto px = static_cast<Eigen::Index>(frames[0].size());
        const int d = 32;
        nn::Rng rng(proj_seed);
        Mat proj = nn::randn(rng, px, d, 1.0 / std::sqrt(static_cast<double>(px)));
        out.embedder = "random-projection";
        out.features.resize(static_cast<Eigen::Index>(frames.size()), d);
        for (std::size_t i = 0; i < frames.size(); ++i) {
            require(frames[i].size() == px, "inconsistent frame sizes");
            Eigen::Map<const Eigen::VectorXd> flat(frames[i].data(), px);
            out.features.row(static_cast<Eigen::Index>(i)) = flat.transpose() * proj;
        }
    }
    return out;
}

namespace {

Mat covariance(const Mat& x) {
    const auto m = x.rows();
    Mat centered = x.rowwise() - x.colwise().mean();
    Mat cov = centered.transpose() * centered / std::max<double>(1.0, static_cast<double>(m - 1));
    cov.diagonal().array() += 1e-6;
    return cov;
}

Mat psd_sqrt(const Mat& a) {
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (a + a.transpose()));
    Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
    return es.eigenvectors() * ev.asDiagonal() * es.eigenvectors().transpose();
}

}  // namespace

double frechet_distance(const FeatureSet& a, const FeatureSet& b) {
    require(a.features.cols() == b.features.cols(), "feature dimensionality mismatch");
    require(a.features.rows() >= 2 && b.features.rows() >= 2, "need at least 2 rows per set");
    Eigen::VectorXd mu_a = a.features.colwise().mean();
    Eigen::VectorXd mu_b = b.features.colwise().mean();
    Mat ca = covariance(a.features), cb = covariance(b.features);
    Mat ra = psd_sqrt(ca);
    Mat inner = ra * cb * ra;
    Eigen::SelfAdjointEigenSolver<Mat> es(0.5 * (inner + inner.transpose()));
    const double tr_sqrt = es.eigenvalues().cwiseMax(0.0).cwiseSqrt().sum();
    const double d = (mu_a - mu_b).squaredNorm() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    return std::max(0.0, d);
}

DrResult degradation_rate(const std::vector<Image>& gen, const std::vector<Image>& ref, int n,
                          Embedder embedder, const lfg::LfgModel* lfg_model) {
    require(n >= 2, "window too small");
    require(static_cast<int>(gen.size()) >= 2 * n && static_cast<int>(ref.size()) >= 2 * n,
            "sequences shorter than 2n frames");
    auto window = [](const std::vector<Image>& v, std::size_t start, int n_) {
        return std::vector<Image>(v.begin() + static_cast<std::ptrdiff_t>(start),
                                  v.begin() + static_cast<std::ptrdiff_t>(start) + n_);
    };
    const auto nn_ = static_cast<std::size_t>(n);
    DrResult r;
    r.fid_st = frechet_distance(embed_frames(window(gen, 0, n), embedder, lfg_model),
                                embed_frames(window(ref, 0, n), embedder, lfg_model));
    r.fid_ed = frechet_distance(embed_frames(window(gen, gen.size() - nn_, n), embedder, lfg_model),
                                embed_frames(window(ref, ref.size() - nn_, n), embedder, lfg_model));
    if (r.fid_st < 1e-6)
        throw numeric_error("degradation rate undefined: starting FID below 1e-6");
    r.dr = r.fid_ed / r.fid_st - 1.0;
    return r;
}

namespace {

double rolling_median(const Eigen::VectorXd& x, Eigen::Index center, int window) {
    const Eigen::Index half = window / 2;
    const Eigen::Index lo = std::max<Eigen::Index>(0, center - half);
    const Eigen::Index hi = std::min<Eigen::Index>(x.size() - 1, center + half);
    std::vector<double> buf(x.data() + lo, x.data() + hi + 1);
    auto mid = buf.begin() + static_cast<std::ptrdiff_t>(buf.size() / 2);
    std::nth_element(buf.begin(), mid, buf.end());
    if (buf.size() % 2 == 1) return *mid;
    double hi_v = *mid;
    double lo_v = *std::max_element(buf.begin(), mid);
    return 0.5 * (lo_v + hi_v);
}

}  // namespace

double blink_rate(const Mat& ear_trace, double fps) {
    require(ear_trace.rows() >= 3 && ear_trace.cols() == 2, "ear trace must be N x 2, N >= 3");
    require(fps > 0, "fps must be positive");
    const Eigen::Index n = ear_trace.rows();
    Eigen::VectorXd mean_ear = ear_trace.rowwise().mean();
    int blinks = 0, run = 0;
    for (Eigen::Index t = 0; t < n; ++t) {
        const bool below = mean_ear(t) < 0.5 * rolling_median(mean_ear, t, 25);
        if (below) {
            ++run;
        } else {
            if (run >= 2) ++blinks;  // counted on recovery
            run = 0;
        }
    }
    return blinks * fps / static_cast<double>(n);
}

double beat_align(const Eigen::VectorXd& envelope, const Mat& poses, double sigma) {
    const Eigen::Index n = envelope.size();
    require(n >= 5 && poses.rows() == n, "need N >= 5 aligned samples");
    require(sigma > 0, "sigma must be positive");

    Eigen::VectorXd diff = envelope.tail(n - 1) - envelope.head(n - 1);
    std::vector<double> sorted(diff.data(), diff.data() + diff.size());
    std::sort(sorted.begin(), sorted.end());
    const double thresh = sorted[static_cast<std::size_t>(0.75 * (sorted.size() - 1))];

    std::vector<double> audio_beats, motion_beats;
    for (Eigen::Index t = 1; t + 1 < diff.size(); ++t)
        if (diff(t) > diff(t - 1) && diff(t) >= diff(t + 1) && diff(t) > thresh)
            audio_beats.push_back(static_cast<double>(t));

    Eigen::VectorXd vel(n - 1);
    for (Eigen::Index t = 0; t + 1 < n; ++t) vel(t) = (poses.row(t + 1) - poses.row(t)).norm();
    for (Eigen::Index t = 1; t + 1 < vel.size(); ++t)
        if (vel(t) < vel(t - 1) && vel(t) <= vel(t + 1))
            motion_beats.push_back(static_cast<double>(t));

    if (audio_beats.empty() || motion_beats.empty())
        throw numeric_error("beat_align: no beats detected (signal too flat)");

    double score = 0;
    for (double b : audio_beats) {
        double best = std::numeric_limits<double>::infinity();
        for (double m : motion_beats) best = std::min(best, (b - m) * (b - m));
        score += std::exp(-best / (2.0 * sigma * sigma));
    }
    return score / static_cast<double>(audio_beats.size());
}

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    require(a.size() == b.size() && a.size() >= 2, "pearson: length mismatch");
    Eigen::VectorXd da = a.array() - a.mean();
    Eigen::VectorXd db = b.array() - b.mean();
    const double na = da.norm(), nb = db.norm();
    if (na < 1e-12 || nb < 1e-12) throw numeric_error("pearson: zero-variance series");
    return da.dot(db) / (na * nb);
}

double lip_sync_corr(const std::vector<Image>& frames, const Mat& poses,
                     const Eigen::VectorXd& envelope) {
    const auto n = static_cast<Eigen::Index>(frames.size());
    require(poses.rows() == n && envelope.size() == n, "lip_sync_corr: length mismatch");
    Eigen::VectorXd mouth(n), target(n);
    for (Eigen::Index t = 0; t < n; ++t) {
        mouth(t) = synth::measure_mouth_open(frames[static_cast<std::size_t>(t)],
                                             poses.row(t).transpose());
        target(t) = synth::mouth_transfer(envelope(t));
    }
    return pearson(mouth, target);
}

double fvd_window(const FeatureSet& a, const FeatureSet& b, int window) {
    require(window >= 1, "window must be positive");
    auto pool = [window](const Mat& f) {
        const Eigen::Index m = f.rows() - window + 1;
        require(m >= 2, "too few frames for windowed Frechet");
        Mat out(m, f.cols());
        for (Eigen::Index i = 0; i < m; ++i) out.row(i) = f.middleRows(i, window).colwise().mean();
        return out;
    };
    FeatureSet pa{pool(a.features), a.embedder}, pb{pool(b.features), b.embedder};
    return frechet_distance(pa, pb);
}

namespace {

std::string fmt(double v) {
    std::ostringstream os;
    os.precision(6);
    os << v;
    return os.str();
}

void put(std::ostringstream& os, const char* name, const std::optional<double>& v) {
    if (v) os << name << " = " << fmt(*v) << "\n";
}

}  // namespace

std::string report_text(const MetricsReport& r) {
    std::ostringstream os;
    if (!r.clip_id.empty()) os << "clip_id = " << r.clip_id << "\n";
    put(os, "frechet", r.frechet);
    put(os, "dr_25", r.dr_25);
    put(os, "dr_50", r.dr_50);
    put(os, "blink_rate", r.blink);
    put(os, "bas", r.bas);
    put(os, "lip_corr", r.lip_corr);
    os << "wall_clock_s = " << fmt(r.wall_clock_s) << "\n";
    return os.str();
}

std::string report_csv(const std::vector<MetricsReport>& rows) {
    std::ostringstream os;
    os << "clip_id,frechet,dr25,dr50,blink_rate,bas,lip_corr\n";
    auto cell = [&os](const std::optional<double>& v) {
        os << ",";
        if (v) os << fmt(*v);
    };
    for (const auto& r : rows) {
        os << r.clip_id;
        cell(r.frechet);
        cell(r.dr_25);
        cell(r.dr_50);
        cell(r.blink);
        cell(r.bas);
        cell(r.lip_corr);
        os << "\n";
    }
    return os.str();
}

}  // namespace dawn::metrics
