// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Semantic cluster distillation: prototype scoring, Sinkhorn-Knopp soft
// assignments and the symmetric stop-gradient cross entropy between
// reconstructed video tokens and image-teacher patch features.

#pragma once

#include "autograd.hpp"
#include "tokenizer.hpp"

#include <optional>
#include <string_view>
#include <vector>

namespace discovr::scd {

// Whether Sinkhorn consumes the temperature-scaled scores or the raw
// cosine similarities.
enum class SinkhornInput { scaled, raw };
// How the two frames of a tube are pooled into one image target.
enum class Pool { mean, first_frame };

std::string_view to_string(SinkhornInput v);
std::string_view to_string(Pool v);
SinkhornInput parse_sinkhorn_input(std::string_view s);
Pool parse_pool(std::string_view s);

struct ScdConfig {
  int num_prototypes = 3000;
  double temperature = 0.1;
  double epsilon = 0.05;
  int iterations = 10;
  SinkhornInput sinkhorn_input = SinkhornInput::scaled;
  Pool pool = Pool::mean;
  bool normalize_prototypes = true;

  void validate() const;
};

struct PrototypeBank {
  ad::Tensor weights;  // K x D

  int size() const { return static_cast<int>(weights.rows()); }
  int dim() const { return static_cast<int>(weights.cols()); }
  void normalize_rows();
};

PrototypeBank init_prototypes(int count, int dim, Rng& rng);

struct ScoreMatrix {
  ad::Tensor scores;  // R x K
  double temperature = 0.1;
};

// s[r, k] = <normalize(feature_r), P_k> / tau.
ScoreMatrix prototype_scores(const ad::Tensor& features, const PrototypeBank& bank, double temperature);

struct AssignmentMatrix {
  ad::Matrix q;  // R x K, rows sum to 1
};

// Sinkhorn-Knopp on exp(scores / eps) with uniform marginals (1/R rows,
// 1/K columns): `iterations` column-then-row rescalings, then rows scaled to
// sum 1. Computed in the log domain; the result is a constant.
AssignmentMatrix sinkhorn(const ad::Matrix& scores, double epsilon, int iterations);

// Per-frame patch features of one clip, indexed by frame. Frames the image
// teacher did not process are empty.
using FrameFeatures = std::vector<std::optional<ad::Matrix>>;

// Image target for every masked tube, in ascending tube order: the mean of
// the tube's two frame-patch features, or the first frame's feature.
ad::Matrix align_image_targets(const FrameFeatures& frames, const tokenizer::MaskSpec& mask,
                               const tokenizer::TubeFrameMap& map, Pool pool);

// CE(s_v, q_i) + CE(s_i, q_v) with CE(s, q) = mean_r -sum_k q[r,k] log softmax(s[r])[k].
ad::Tensor scd_loss(const ad::Tensor& s_v, const ad::Tensor& s_i, const AssignmentMatrix& q_v,
                    const AssignmentMatrix& q_i);

// Sinkhorn targets held fixed while probing the loss with finite differences.
struct TargetCache {
  std::vector<AssignmentMatrix> q_v;
  std::vector<AssignmentMatrix> q_i;
  bool frozen = false;
  std::size_t cursor = 0;

  void rewind() { cursor = 0; }
};

struct ScdResult {
  ad::Tensor loss;
  AssignmentMatrix q_v;
  AssignmentMatrix q_i;
};

// Full objective for a batch of flattened masked tokens: `video_tokens` are
// decoder outputs (carry gradient), `image_targets` are detached image
// teacher features. With a frozen cache, its targets replace the Sinkhorn
// outputs; otherwise the computed targets are appended to it.
ScdResult scd_objective(const ad::Tensor& video_tokens, const ad::Matrix& image_targets, const PrototypeBank& bank,
                        const ScdConfig& cfg, TargetCache* cache = nullptr);

}  // namespace discovr::scd
