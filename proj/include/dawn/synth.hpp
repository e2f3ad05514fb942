#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dawn/dten.hpp"

namespace dawn::synth {

using Image = Eigen::MatrixXd;                                       // res x res, [0,1]
using MaskImage = Eigen::Matrix<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic>;
using PoseBlink = Eigen::Matrix<double, 8, 1>;  // 6 pose dims + left/right EAR

// Pose layout: [yaw-shear, pitch-shear, roll, tx, ty, log-scale].
struct FaceParams {
    Eigen::Matrix<double, 6, 1> pose = Eigen::Matrix<double, 6, 1>::Zero();
    double mouth_open = 0.0;
    double ear_left = 1.0;
    double ear_right = 1.0;

    void validate() const;
};

struct AudioTrack {
    Eigen::MatrixXd features;  // N x 8, channel 0 is the envelope
    Eigen::VectorXd envelope() const { return features.col(0); }
    Eigen::Index length() const { return features.rows(); }
};

struct ClipRecord {
    std::string clip_id;
    int fps = 25;
    std::vector<Image> frames;
    AudioTrack audio;
    Eigen::MatrixXd poses;  // N x 8
    std::vector<MaskImage> lip_masks, face_masks;
};

struct CorpusManifest {
    std::filesystem::path dir;
    struct Entry {
        std::string id;
        std::string split;  // "train" | "test"
        int frames;
    };
    std::vector<Entry> clips;
    std::uint64_t seed = 0;
    int version = 1;
    int resolution = 32;
    int fps = 25;

    std::vector<Entry> split_clips(const std::string& split) const;
};

inline constexpr int kAudioChannels = 8;
inline constexpr double kFaceTone = 0.8;
inline constexpr double kMouthTransferGain = 1.2;

// Speech-like envelope plus 7 deterministic derived channels.
AudioTrack synth_audio_features(int duration_frames, std::uint64_t seed);

Image render_frame(const FaceParams& params, int res = 32);

// Inverse-transforms the canonical mouth box by the pose and reads back the
// degree of mouth opening; calibrated so a full-open canonical render gives 1.
double measure_mouth_open(const Image& frame, const PoseBlink& pose, int res = 32);

MaskImage lip_mask_for(const PoseBlink& pose, int res = 32);
MaskImage face_mask_for(const PoseBlink& pose, int res = 32);

CorpusManifest generate_corpus(int clips, int frames_per_clip, std::uint64_t seed,
                               const std::filesystem::path& out_dir, int res = 32);

CorpusManifest load_manifest(const std::filesystem::path& dir);
ClipRecord load_clip(const CorpusManifest& manifest, const std::string& clip_id);

inline double mouth_transfer(double envelope) {
    return std::min(1.0, std::max(0.0, kMouthTransferGain * envelope));
}

}  // namespace dawn::synth
