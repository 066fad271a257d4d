// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "scd.hpp"

#include "backbone.hpp"
#include "errors.hpp"

#include <cmath>

namespace discovr::scd {

namespace {

double log_sum_exp(const Eigen::Ref<const Eigen::ArrayXd>& v) {
  const double m = v.maxCoeff();
  return m + std::log((v - m).exp().sum());
}

}  // namespace

std::string_view to_string(SinkhornInput v) { return v == SinkhornInput::scaled ? "scaled" : "raw"; }
std::string_view to_string(Pool v) { return v == Pool::mean ? "mean" : "first_frame"; }

SinkhornInput parse_sinkhorn_input(std::string_view s) {
  if (s == "scaled") return SinkhornInput::scaled;
  if (s == "raw") return SinkhornInput::raw;
  throw ConfigError("unknown sinkhorn input '" + std::string(s) + "' (expected scaled|raw)");
}

Pool parse_pool(std::string_view s) {
  if (s == "mean") return Pool::mean;
  if (s == "first_frame") return Pool::first_frame;
  throw ConfigError("unknown scd pool '" + std::string(s) + "' (expected mean|first_frame)");
}

void ScdConfig::validate() const {
  if (num_prototypes < 1) throw ConfigError("num_prototypes must be >= 1");
  if (!(temperature > 0.0)) throw ConfigError("scd temperature must be positive");
  if (!(epsilon > 0.0)) throw ConfigError("sinkhorn epsilon must be positive");
  if (iterations < 1) throw ConfigError("sinkhorn iterations must be >= 1");
}

void PrototypeBank::normalize_rows() {
  ad::Matrix& w = weights.mutable_value();
  for (ad::Index r = 0; r < w.rows(); ++r) {
    const double n = w.row(r).norm();
    if (n > 0.0) w.row(r) /= n;
  }
}

PrototypeBank init_prototypes(int count, int dim, Rng& rng) {
  if (count < 1 || dim < 1) throw ConfigError("prototype bank needs positive size");
  PrototypeBank bank{ad::parameter(backbone::trunc_normal(count, dim, 1.0, rng))};
  bank.normalize_rows();
  return bank;
}

ScoreMatrix prototype_scores(const ad::Tensor& features, const PrototypeBank& bank, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("prototype_scores: temperature must be positive");
  if (features.cols() != bank.dim()) {
    throw ShapeError("prototype_scores: feature dim " + std::to_string(features.cols()) + " != prototype dim " +
                     std::to_string(bank.dim()));
  }
  ad::Tensor s = ad::scale(ad::matmul_nt(ad::l2_normalize_rows(features), bank.weights), 1.0 / temperature);
  return {s, temperature};
}

AssignmentMatrix sinkhorn(const ad::Matrix& scores, double epsilon, int iterations) {
  if (!(epsilon > 0.0)) throw ConfigError("sinkhorn: epsilon must be positive");
  if (iterations < 1) throw ConfigError("sinkhorn: iterations must be >= 1");
  if (!scores.allFinite()) throw NumericError("sinkhorn: non-finite scores");
  const ad::Index rows = scores.rows();
  const ad::Index cols = scores.cols();
  if (rows == 0) return {ad::Matrix(0, cols)};

  const double log_rows = std::log(static_cast<double>(rows));
  const double log_cols = std::log(static_cast<double>(cols));
  ad::Matrix log_q = scores / epsilon;
  log_q.array() -= log_q.maxCoeff();
  {
    Eigen::Map<const Eigen::ArrayXd> flat(log_q.data(), log_q.size());
    log_q.array() -= log_sum_exp(flat);
  }
  Eigen::ArrayXd buffer;
  for (int it = 0; it < iterations; ++it) {
    for (ad::Index k = 0; k < cols; ++k) {
      buffer = log_q.col(k).array();
      log_q.col(k).array() -= log_sum_exp(buffer) + log_cols;
    }
    for (ad::Index r = 0; r < rows; ++r) {
      buffer = log_q.row(r).transpose().array();
      log_q.row(r).array() -= log_sum_exp(buffer) + log_rows;
    }
  }
  log_q.array() += log_rows;
  return {log_q.array().exp().matrix()};
}

ad::Matrix align_image_targets(const FrameFeatures& frames, const tokenizer::MaskSpec& mask,
                               const tokenizer::TubeFrameMap& map, Pool pool) {
  if (mask.length() != map.video.size()) throw ShapeError("align_image_targets: mask length != tube count");
  const auto masked = mask.masked_indices();
  ad::Index dim = -1;
  auto frame_features = [&](int frame) -> const ad::Matrix& {
    if (frame < 0 || static_cast<std::size_t>(frame) >= frames.size() || !frames[static_cast<std::size_t>(frame)]) {
      throw DataError("align_image_targets: missing features for frame " + std::to_string(frame));
    }
    const ad::Matrix& f = *frames[static_cast<std::size_t>(frame)];
    if (f.rows() != map.image.size()) throw ShapeError("align_image_targets: frame patch count mismatch");
    if (dim < 0) dim = f.cols();
    if (f.cols() != dim) throw ShapeError("align_image_targets: inconsistent feature dims");
    return f;
  };

  ad::Matrix out;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    const auto& tube = map.at(static_cast<int>(masked[i]));
    const ad::Matrix& first = frame_features(tube.first_frame);
    if (out.size() == 0) out.resize(static_cast<ad::Index>(masked.size()), dim);
    if (pool == Pool::mean) {
      const ad::Matrix& second = frame_features(tube.second_frame);
      out.row(static_cast<ad::Index>(i)) = 0.5 * (first.row(tube.patch) + second.row(tube.patch));
    } else {
      out.row(static_cast<ad::Index>(i)) = first.row(tube.patch);
    }
  }
  if (masked.empty()) out.resize(0, 0);
  return out;
}

ad::Tensor scd_loss(const ad::Tensor& s_v, const ad::Tensor& s_i, const AssignmentMatrix& q_v,
                    const AssignmentMatrix& q_i) {
  if (s_v.rows() != s_i.rows() || s_v.cols() != s_i.cols()) throw ShapeError("scd_loss: score shapes differ");
  std::vector<ad::Tensor> terms{ad::soft_cross_entropy(s_v, q_i.q, 1.0), ad::soft_cross_entropy(s_i, q_v.q, 1.0)};
  return ad::sum_all(ad::concat_rows(terms));
}

ScdResult scd_objective(const ad::Tensor& video_tokens, const ad::Matrix& image_targets, const PrototypeBank& bank,
                        const ScdConfig& cfg, TargetCache* cache) {
  if (video_tokens.rows() != image_targets.rows() || video_tokens.cols() != image_targets.cols()) {
    throw ShapeError("scd_objective: video and image token shapes differ");
  }
  ScoreMatrix s_v = prototype_scores(video_tokens, bank, cfg.temperature);
  ScoreMatrix s_i = prototype_scores(ad::constant(image_targets), bank, cfg.temperature);

  ScdResult result;
  const bool replay = cache && cache->frozen;
  if (replay) {
    if (cache->cursor >= cache->q_v.size()) throw ShapeError("scd_objective: frozen target cache exhausted");
    result.q_v = cache->q_v[cache->cursor];
    result.q_i = cache->q_i[cache->cursor];
    ++cache->cursor;
  } else {
    const double input_scale = cfg.sinkhorn_input == SinkhornInput::raw ? cfg.temperature : 1.0;
    result.q_v = sinkhorn(s_v.scores.value() * input_scale, cfg.epsilon, cfg.iterations);
    result.q_i = sinkhorn(s_i.scores.value() * input_scale, cfg.epsilon, cfg.iterations);
    if (cache) {
      cache->q_v.push_back(result.q_v);
      cache->q_i.push_back(result.q_i);
    }
  }
  result.loss = scd_loss(s_v.scores, s_i.scores, result.q_v, result.q_i);
  if (!std::isfinite(result.loss.item())) throw NumericError("SCD loss is not finite");
  return result;
}

}  // namespace discovr::scd
