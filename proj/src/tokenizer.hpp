// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Space-time tube tokens for the video branch, 2-D patch tokens for the
// image branch, exact-ratio random masks and the tube <-> frame-patch map.

#pragma once

#include "autograd.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace discovr {

using Rng = std::mt19937_64;

namespace tokenizer {

inline constexpr int kPatchSize = 16;
inline constexpr int kTubeFrames = 2;

struct FrameSpan {
  int start = 0;
  int stride = 1;
};

// Frame stack stored (t, y, x, c) row-major with intensities in [0, 1].
struct VideoClip {
  int frames = 0;
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;
  std::string source_id;
  FrameSpan span;

  VideoClip() = default;
  VideoClip(int t, int h, int w, int c);

  float& at(int t, int y, int x, int c) {
    return data[((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c];
  }
  float at(int t, int y, int x, int c) const {
    return data[((static_cast<std::size_t>(t) * height + y) * width + x) * channels + c];
  }
  // Throws GeometryError when T is odd or H/W are not multiples of 16.
  void validate() const;
};

struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> data;  // (y, x, c) row-major

  float at(int y, int x, int c) const {
    return data[(static_cast<std::size_t>(y) * width + x) * channels + c];
  }
};

Image frame_of(const VideoClip& clip, int t);

struct GridPos {
  int t = 0;
  int h = 0;
  int w = 0;
  friend bool operator==(const GridPos&, const GridPos&) = default;
};

struct TokenGrid {
  int t = 1;
  int h = 1;
  int w = 1;
  int size() const { return t * h * w; }
  int index(const GridPos& p) const { return (p.t * h + p.h) * w + p.w; }
  GridPos position(int index) const { return {index / (h * w), (index / w) % h, index % w}; }
  friend bool operator==(const TokenGrid&, const TokenGrid&) = default;
};

// B samples of L tokens each; positions are shared across the batch.
struct TokenBatch {
  std::vector<ad::Matrix> tokens;
  std::vector<GridPos> positions;
  TokenGrid grid;
  bool has_class_slot = false;

  int batch() const { return static_cast<int>(tokens.size()); }
  int length() const { return static_cast<int>(positions.size()); }
  int token_dim() const { return tokens.empty() ? 0 : static_cast<int>(tokens.front().cols()); }
  // Flat position-table indices in token order.
  std::vector<ad::Index> position_indices() const;
};

TokenGrid video_grid(int frames, int height, int width);
TokenGrid image_grid(int height, int width);
inline int tube_dim(int channels) { return kTubeFrames * kPatchSize * kPatchSize * channels; }
inline int patch_dim(int channels) { return kPatchSize * kPatchSize * channels; }

// One token per 2x16x16 tube in (t, h, w) row-major order; each token is the
// tube flattened as (dt, y, x, c).
TokenBatch tubify(const VideoClip& clip);
TokenBatch tubify(const std::vector<VideoClip>& clips);
// Inverse of tubify for a single-sample batch.
VideoClip untubify(const TokenBatch& batch, int channels);

TokenBatch patchify_frame(const Image& frame);

struct MaskSpec {
  std::vector<bool> masked;
  double ratio = 0.0;
  std::uint64_t seed = 0;

  int length() const { return static_cast<int>(masked.size()); }
  int num_masked() const;
  int num_visible() const { return length() - num_masked(); }
  std::vector<ad::Index> visible_indices() const;
  std::vector<ad::Index> masked_indices() const;
};

// round-half-up(ratio * length); the exact count every mask uses.
int masked_count(int length, double ratio);

// Uniform random subset of exactly masked_count(length, ratio) positions.
// Draws one 64-bit seed from rng and records it in the result.
MaskSpec make_mask(int length, double ratio, Rng& rng);
MaskSpec make_mask_from_seed(int length, double ratio, std::uint64_t seed);

struct TubeFrames {
  int first_frame = 0;
  int second_frame = 0;
  int patch = 0;  // index into the per-frame patch grid
};

struct TubeFrameMap {
  TokenGrid video;
  TokenGrid image;
  std::vector<TubeFrames> tubes;  // indexed by flat tube index

  const TubeFrames& at(int tube_index) const { return tubes.at(static_cast<std::size_t>(tube_index)); }
};

TubeFrameMap build_tube_frame_map(int frames, int height, int width);

}  // namespace tokenizer
}  // namespace discovr
