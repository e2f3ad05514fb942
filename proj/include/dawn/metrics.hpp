#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dawn/lfg.hpp"
#include "dawn/synth.hpp"

namespace dawn::metrics {

using Mat = Eigen::MatrixXd;
using synth::Image;

enum class Embedder { LfgEncoderPooled, RandomProjection };

Embedder embedder_from_string(const std::string& s);

struct FeatureSet {
    Mat features;  // M x d
    std::string embedder;
};

FeatureSet embed_frames(const std::vector<Image>& frames, Embedder embedder,
                        const lfg::LfgModel* lfg_model = nullptr,
                        std::uint64_t proj_seed = 7);

double frechet_distance(const FeatureSet& a, const FeatureSet& b);

struct DrResult {
    double dr, fid_st, fid_ed;
};

DrResult degradation_rate(const std::vector<Image>& gen, const std::vector<Image>& ref, int n,
                          Embedder embedder, const lfg::LfgModel* lfg_model = nullptr);

// ear_trace: N x 2 (left, right); blink = mean EAR below 0.5x rolling median
// (window 25) for >= 2 consecutive frames
double blink_rate(const Mat& ear_trace, double fps);

double beat_align(const Eigen::VectorXd& envelope, const Mat& poses, double sigma = 3.0);

double lip_sync_corr(const std::vector<Image>& frames, const Mat& poses,
                     const Eigen::VectorXd& envelope);

double pearson(const Eigen::VectorXd& a, const Eigen::VectorXd& b);

// FVD analogue: Frechet distance over features averaged in sliding windows.
double fvd_window(const FeatureSet& a, const FeatureSet& b, int window);

struct MetricsReport {
    std::string clip_id;
    std::optional<double> frechet, dr_25, dr_50, blink, bas, lip_corr;
    double wall_clock_s = 0.0;
};

// `metric = value` lines for one report
std::string report_text(const MetricsReport& r);
// CSV with header clip_id,frechet,dr25,dr50,blink_rate,bas,lip_corr
std::string report_csv(const std::vector<MetricsReport>& rows);

}  // namespace dawn::metrics
