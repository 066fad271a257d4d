// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Manifests, the lossless frame-stack container, clip sampling, EF labels
// and the synthetic echo-like generator.

#pragma once

#include "tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace discovr::data {

enum class Split { train, val, test };
enum class Label { normal, abnormal, unlabeled };

std::string_view to_string(Split s);
std::string_view to_string(Label l);
Split parse_split(std::string_view s);
Label parse_label(std::string_view s);

// Exact header of every manifest file.
inline constexpr std::string_view kManifestHeader = "video_path,split,label,ef,view,patient_id";

struct ManifestRecord {
  std::string video_path;  // relative paths resolve against the manifest directory
  Split split = Split::train;
  Label label = Label::unlabeled;
  std::optional<double> ef;
  std::string view;
  std::string patient_id;
};

struct Manifest {
  std::filesystem::path base_dir;
  std::vector<ManifestRecord> records;

  std::filesystem::path resolve(const ManifestRecord& r) const;
  std::vector<ManifestRecord> split(Split s) const;
};

// abnormal iff ef < 45 or ef > 75.
Label label_from_ef(double ef);

Manifest load_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestRecord>& records);

// Records eligible for pretraining: train split and labeled normal.
std::vector<ManifestRecord> pretraining_records(const std::vector<ManifestRecord>& records);

// Frame stack in (t, y, x, c) order with intensities in [0, 1].
struct Video {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;

  std::size_t frame_size() const { return static_cast<std::size_t>(height) * width * channels; }
};

enum class DType : std::uint8_t { u8 = 0, f32 = 1 };

// Self-describing container: magic, version, T/H/W/C, dtype, raw samples.
void write_video(const std::filesystem::path& path, const Video& video, DType dtype = DType::u8);
// u8 samples scale by 1/255; f32 samples are min-max scaled per channel.
Video read_video(const std::filesystem::path& path);

// Hook for other video formats, keyed by lowercase extension including the
// dot. ".dvid" is built in.
using VideoDecoder = std::function<Video(const std::filesystem::path&)>;
void register_decoder(const std::string& extension, VideoDecoder decoder);
Video load_video(const std::filesystem::path& path);

// Bilinear resize to size x size and channel adaptation (grayscale
// replicated; other mismatches rejected).
Video conform(const Video& video, int size, int channels);

// (frames - 1) * stride + 1.
int clip_span(int frames, int stride);
// Number of valid random starts; 1 for videos shorter than the span.
int valid_starts(int video_frames, int frames, int stride);

// Frames start + j * stride, wrapped cyclically past the end of the video.
tokenizer::VideoClip extract_clip(const Video& video, int start, int frames, int stride, std::string source_id = {});
tokenizer::VideoClip sample_clip(const Video& video, int frames, int stride, Rng& rng, std::string source_id = {});
// Non-overlapping consecutive clips; a single loop-padded clip for short
// videos.
std::vector<tokenizer::VideoClip> tile_clips(const Video& video, int frames, int stride, std::string source_id = {});

struct SyntheticConfig {
  int n_per_class = 50;       // per split
  int n_train_per_class = 0;  // overrides n_per_class for the train split when > 0
  int frames = 96;
  int height = 64;
  int width = 64;
  int channels = 1;
  // Fractional contraction of the chamber axes over a beat.
  double normal_amplitude_min = 0.28;
  double normal_amplitude_max = 0.40;
  double abnormal_amplitude_min = 0.06;
  double abnormal_amplitude_max = 0.16;
  double period_min = 18.0;  // frames per beat
  double period_max = 30.0;
  double wall_thickness = 0.18;  // relative to the chamber semi-axis
  double wall_delta = 0.0;       // added wall thickness for the abnormal class
  double speckle = 0.25;         // static multiplicative texture strength
  double frame_noise = 0.02;     // per-frame additive noise
  // Scales the per-video spread of size, aspect, position, tilt and gain;
  // 0 draws every video at the centre of each range.
  double nuisance = 1.0;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SyntheticDataset {
  std::filesystem::path manifest;  // all splits
  std::filesystem::path train_manifest, val_manifest, test_manifest;
  std::vector<ManifestRecord> records;
};

// Writes videos/<id>.dvid, masks/<id>.dvid (chamber masks, 1 channel) and
// manifest.csv plus per-split manifests under `out_dir`.
SyntheticDataset synth_generate(const SyntheticConfig& cfg, const std::filesystem::path& out_dir);

// Path of the chamber-mask stack written next to a synthetic video.
std::filesystem::path mask_path_for(const std::filesystem::path& video_path);

// Frame-difference energy: mean absolute change between frames `lag` apart.
double motion_energy(const Video& video, int lag);

// (max - min) / max of the per-frame count of dark samples, with "dark"
// meaning below half the median sample of the whole video. On echo-like
// input this tracks the fractional area change of the blood pool and is
// insensitive to gain, chamber size and static speckle.
double chamber_contraction(const Video& video);

}  // namespace discovr::data
