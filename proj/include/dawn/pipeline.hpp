#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dawn/fdm.hpp"
#include "dawn/lfg.hpp"
#include "dawn/metrics.hpp"
#include "dawn/pbnet.hpp"
#include "dawn/synth.hpp"

namespace dawn::pipeline {

using Mat = Eigen::MatrixXd;
using synth::Image;
using synth::PoseBlink;

struct PipelineConfig {
    std::filesystem::path lfg_ckpt, pbnet_ckpt, fdm_ckpt, corpus;
    std::string sampler = "ddim";
    int steps = 50;
    int fdm_window = 80;
    int pbnet_window = 400;
    std::uint64_t seed = 0;
    std::filesystem::path out_dir;
};

PipelineConfig load_pipeline_config(const std::filesystem::path& file);

struct Pipeline {
    lfg::LfgModel lfg;
    pbnet::PbModel pb;
    fdm::FdmModel fdm;
    bool has_pb = false;
};

// loads checkpoints, applies the config's attention-window overrides
Pipeline load_pipeline(const PipelineConfig& cfg, bool need_pbnet = true);

struct SourceInput {
    Image frame;
    std::optional<PoseBlink> pose;  // absent -> zero pose, flagged in report
    std::optional<Image> face_mask; // absent -> derived from pixels
};

struct RunReport {
    std::string strategy;  // "nar" | "sar"
    int frames = 0;
    bool zero_source_pose = false;
    int sampler_invocations = 0;
    double pose_s = 0, motion_s = 0, decode_s = 0, total_s = 0;
    std::vector<double> chunk_s;  // per-chunk wall clock (sar)
};

struct InferResult {
    std::vector<Image> frames;
    Mat poses;  // N x 8 (driving/applied pose track)
    RunReport report;
};

fdm::Sampler sampler_from_string(const std::string& s);

InferResult infer(const SourceInput& src, const Mat& audio, const Pipeline& p,
                  const PipelineConfig& cfg);

InferResult infer_sar(const SourceInput& src, const Mat& audio, const Pipeline& p,
                      const PipelineConfig& cfg, int chunk_len = 40);

// reenactment bypasses PBNet: driving clip supplies audio and pose track
InferResult reenact(const SourceInput& src, const Mat& audio, const Mat& driving_poses,
                    const Pipeline& p, const PipelineConfig& cfg);

struct SweepRow {
    int length = 0;
    double frechet = 0, fvd16 = 0, fvd32 = 0, lip_corr = 0;
    std::optional<double> dr25;
};

std::vector<SweepRow> extrapolation_sweep(const Pipeline& p, const PipelineConfig& cfg,
                                          const synth::CorpusManifest& manifest,
                                          const std::vector<int>& lengths, int n_clips = 6);

struct StrategyRow {
    std::string strategy;
    int frames = 0;
    double median_seconds = 0;
    double frechet = 0, dr25 = 0, dr50 = 0, lip_corr = 0;
};

std::vector<StrategyRow> bench_strategies(const Pipeline& p, const PipelineConfig& cfg,
                                          const synth::CorpusManifest& manifest, int length,
                                          int n_clips = 5);

// Deterministic artifacts (frames/poses/report) plus wall-clock timings in a
// separate file so byte-identical reruns hold for the data outputs.
void write_infer_outputs(const std::filesystem::path& dir, const InferResult& res);
std::vector<Image> read_frames_dten(const std::filesystem::path& file);

std::string sweep_text(const std::vector<SweepRow>& rows);
std::string sweep_csv(const std::vector<SweepRow>& rows);
std::string bench_text(const std::vector<StrategyRow>& rows);
std::string bench_csv(const std::vector<StrategyRow>& rows);

}  // namespace dawn::pipeline
