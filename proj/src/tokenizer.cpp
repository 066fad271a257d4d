// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "tokenizer.hpp"

#include "errors.hpp"

#include <algorithm>

#include <cmath>
#include <numeric>

namespace discovr::tokenizer {

namespace {

void check_spatial(int height, int width) {
  if (height <= 0 || width <= 0 || height % kPatchSize != 0 || width % kPatchSize != 0) {
    throw GeometryError("spatial size " + std::to_string(height) + "x" + std::to_string(width) +
                        " is not a positive multiple of " + std::to_string(kPatchSize));
  }
}

void check_video(int frames, int height, int width) {
  if (frames <= 0 || frames % kTubeFrames != 0) {
    throw GeometryError("frame count " + std::to_string(frames) + " is not a positive multiple of " +
                        std::to_string(kTubeFrames));
  }
  check_spatial(height, width);
}

}  // namespace

VideoClip::VideoClip(int t, int h, int w, int c)
    : frames(t), height(h), width(w), channels(c),
      data(static_cast<std::size_t>(t) * h * w * c, 0.0f) {}

void VideoClip::validate() const {
  check_video(frames, height, width);
  if (channels <= 0) throw GeometryError("clip has no channels");
  if (data.size() != static_cast<std::size_t>(frames) * height * width * channels) {
    throw GeometryError("clip buffer size does not match its geometry");
  }
}

Image frame_of(const VideoClip& clip, int t) {
  if (t < 0 || t >= clip.frames) throw GeometryError("frame index out of range");
  Image img{clip.height, clip.width, clip.channels, {}};
  const std::size_t n = static_cast<std::size_t>(clip.height) * clip.width * clip.channels;
  const auto begin = clip.data.begin() + static_cast<std::ptrdiff_t>(n * t);
  img.data.assign(begin, begin + static_cast<std::ptrdiff_t>(n));
  return img;
}

std::vector<ad::Index> TokenBatch::position_indices() const {
  std::vector<ad::Index> out;
  out.reserve(positions.size());
  for (const auto& p : positions) out.push_back(grid.index(p));
  return out;
}

TokenGrid video_grid(int frames, int height, int width) {
  check_video(frames, height, width);
  return {frames / kTubeFrames, height / kPatchSize, width / kPatchSize};
}

TokenGrid image_grid(int height, int width) {
  check_spatial(height, width);
  return {1, height / kPatchSize, width / kPatchSize};
}

TokenBatch tubify(const VideoClip& clip) { return tubify(std::vector<VideoClip>{clip}); }

TokenBatch tubify(const std::vector<VideoClip>& clips) {
  if (clips.empty()) throw GeometryError("tubify: empty clip list");
  const VideoClip& first = clips.front();
  first.validate();
  TokenBatch batch;
  batch.grid = video_grid(first.frames, first.height, first.width);
  const int length = batch.grid.size();
  for (int i = 0; i < length; ++i) batch.positions.push_back(batch.grid.position(i));

  const int c = first.channels;
  const int dim = tube_dim(c);
  for (const auto& clip : clips) {
    clip.validate();
    if (clip.frames != first.frames || clip.height != first.height || clip.width != first.width ||
        clip.channels != c) {
      throw GeometryError("tubify: clips in a batch must share geometry");
    }
    ad::Matrix tokens(length, dim);
    for (int i = 0; i < length; ++i) {
      const GridPos p = batch.positions[static_cast<std::size_t>(i)];
      int k = 0;
      for (int dt = 0; dt < kTubeFrames; ++dt) {
        for (int y = 0; y < kPatchSize; ++y) {
          for (int x = 0; x < kPatchSize; ++x) {
            for (int ch = 0; ch < c; ++ch) {
              tokens(i, k++) = clip.at(p.t * kTubeFrames + dt, p.h * kPatchSize + y, p.w * kPatchSize + x, ch);
            }
          }
        }
      }
    }
    batch.tokens.push_back(std::move(tokens));
  }
  return batch;
}

VideoClip untubify(const TokenBatch& batch, int channels) {
  if (batch.batch() != 1) throw ShapeError("untubify expects a single-sample batch");
  if (batch.token_dim() != tube_dim(channels)) throw ShapeError("untubify: token dim does not match channels");
  VideoClip clip(batch.grid.t * kTubeFrames, batch.grid.h * kPatchSize, batch.grid.w * kPatchSize, channels);
  const ad::Matrix& tokens = batch.tokens.front();
  for (int i = 0; i < batch.length(); ++i) {
    const GridPos p = batch.positions[static_cast<std::size_t>(i)];
    int k = 0;
    for (int dt = 0; dt < kTubeFrames; ++dt) {
      for (int y = 0; y < kPatchSize; ++y) {
        for (int x = 0; x < kPatchSize; ++x) {
          for (int ch = 0; ch < channels; ++ch) {
            clip.at(p.t * kTubeFrames + dt, p.h * kPatchSize + y, p.w * kPatchSize + x, ch) =
                static_cast<float>(tokens(i, k++));
          }
        }
      }
    }
  }
  return clip;
}

TokenBatch patchify_frame(const Image& frame) {
  TokenBatch batch;
  batch.grid = image_grid(frame.height, frame.width);
  if (frame.channels <= 0 ||
      frame.data.size() != static_cast<std::size_t>(frame.height) * frame.width * frame.channels) {
    throw GeometryError("patchify_frame: buffer size does not match geometry");
  }
  const int length = batch.grid.size();
  const int c = frame.channels;
  ad::Matrix tokens(length, patch_dim(c));
  for (int i = 0; i < length; ++i) {
    const GridPos p = batch.grid.position(i);
    batch.positions.push_back(p);
    int k = 0;
    for (int y = 0; y < kPatchSize; ++y) {
      for (int x = 0; x < kPatchSize; ++x) {
        for (int ch = 0; ch < c; ++ch) tokens(i, k++) = frame.at(p.h * kPatchSize + y, p.w * kPatchSize + x, ch);
      }
    }
  }
  batch.tokens.push_back(std::move(tokens));
  return batch;
}

int MaskSpec::num_masked() const { return static_cast<int>(std::count(masked.begin(), masked.end(), true)); }

std::vector<ad::Index> MaskSpec::visible_indices() const {
  std::vector<ad::Index> out;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (!masked[i]) out.push_back(static_cast<ad::Index>(i));
  }
  return out;
}

std::vector<ad::Index> MaskSpec::masked_indices() const {
  std::vector<ad::Index> out;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    if (masked[i]) out.push_back(static_cast<ad::Index>(i));
  }
  return out;
}

int masked_count(int length, double ratio) {
  if (!(ratio >= 0.0 && ratio < 1.0)) {
    throw ConfigError("mask ratio must lie in [0, 1), got " + std::to_string(ratio));
  }
  if (length <= 0) throw ConfigError("mask length must be positive");
  const int count = static_cast<int>(std::floor(ratio * length + 0.5));
  if (ratio > 0.0) {
    if (length < 2) throw ConfigError("masking needs at least 2 tokens");
    if (count >= length) {
      throw ConfigError("mask ratio " + std::to_string(ratio) + " leaves no visible token out of " +
                        std::to_string(length));
    }
    if (count == 0) {
      throw ConfigError("mask ratio " + std::to_string(ratio) + " masks no token out of " + std::to_string(length));
    }
  }
  return count;
}

MaskSpec make_mask_from_seed(int length, double ratio, std::uint64_t seed) {
  const int count = masked_count(length, ratio);
  MaskSpec spec;
  spec.masked.assign(static_cast<std::size_t>(length), false);
  spec.ratio = ratio;
  spec.seed = seed;
  // Partial Fisher-Yates: the first `count` slots form a uniform subset.
  Rng local(seed);
  std::vector<int> order(static_cast<std::size_t>(length));
  std::iota(order.begin(), order.end(), 0);
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, length - 1);
    std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(local))]);
    spec.masked[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = true;
  }
  return spec;
}

MaskSpec make_mask(int length, double ratio, Rng& rng) { return make_mask_from_seed(length, ratio, rng()); }

TubeFrameMap build_tube_frame_map(int frames, int height, int width) {
  TubeFrameMap map;
  map.video = video_grid(frames, height, width);
  map.image = image_grid(height, width);
  map.tubes.reserve(static_cast<std::size_t>(map.video.size()));
  for (int i = 0; i < map.video.size(); ++i) {
    const GridPos p = map.video.position(i);
    map.tubes.push_back({kTubeFrames * p.t, kTubeFrames * p.t + 1, map.image.index({0, p.h, p.w})});
  }
  return map;
}

}  // namespace discovr::tokenizer
