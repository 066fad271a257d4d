// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "distill.hpp"

#include "errors.hpp"

#include <algorithm>
#include <cmath>

namespace discovr::distill {

void DistillConfig::validate(bool allow_frozen_teacher) const {
  const bool momentum_ok = ema_momentum >= 0.0 && (ema_momentum < 1.0 || (allow_frozen_teacher && ema_momentum == 1.0));
  if (!momentum_ok) throw ConfigError("ema_momentum must lie in [0, 1)");
  if (!(student_temp > 0.0) || !(teacher_temp_start > 0.0) || !(teacher_temp_end > 0.0)) {
    throw ConfigError("temperatures must be positive");
  }
  if (teacher_temp_warmup_epochs < 0) throw ConfigError("teacher_temp_warmup_epochs must be >= 0");
  if (video_views < 1 || image_views < 1) throw ConfigError("masked view counts must be >= 1");
  if (!(center_momentum >= 0.0 && center_momentum < 1.0)) throw ConfigError("center_momentum must lie in [0, 1)");
}

void ema_update(const backbone::ParamList& teacher, const backbone::ParamList& student, double momentum) {
  if (teacher.size() != student.size()) throw ShapeError("ema_update: parameter lists differ in length");
  for (std::size_t i = 0; i < teacher.size(); ++i) {
    if (teacher[i].name != student[i].name) {
      throw ShapeError("ema_update: parameter '" + teacher[i].name + "' paired with '" + student[i].name + "'");
    }
    ad::Tensor t = teacher[i].tensor;
    const ad::Matrix& s = student[i].tensor.value();
    if (t.rows() != s.rows() || t.cols() != s.cols()) {
      throw ShapeError("ema_update: shape mismatch on '" + teacher[i].name + "'");
    }
    if (momentum == 1.0) continue;
    ad::Matrix& tv = t.mutable_value();
    tv = momentum * tv + (1.0 - momentum) * s;
  }
}

ProbDist sharpen(const ad::Matrix& logits, double tau, const ad::Matrix* center) {
  if (!(tau > 0.0)) throw ConfigError("sharpen: temperature must be positive");
  if (!logits.allFinite()) throw NumericError("sharpen: non-finite logits");
  ad::Matrix x = logits;
  if (center) {
    if (center->rows() != 1 || center->cols() != logits.cols()) throw ShapeError("sharpen: center shape mismatch");
    x.rowwise() -= center->row(0);
  }
  x /= tau;
  return {ad::softmax_rows(x)};
}

ad::Tensor soft_cross_entropy(const ProbDist& target, const ad::Tensor& student_logits, double student_temp) {
  if (!(student_temp > 0.0)) throw ConfigError("soft_cross_entropy: temperature must be positive");
  return ad::soft_cross_entropy(student_logits, target.rows, 1.0 / student_temp);
}

double entropy(const ProbDist& p) {
  double h = 0.0;
  for (ad::Index i = 0; i < p.rows.size(); ++i) {
    const double v = p.rows.data()[i];
    if (v > 0.0) h -= v * std::log(v);
  }
  return h / static_cast<double>(std::max<ad::Index>(p.rows.rows(), 1));
}

double teacher_temp(double epoch, const DistillConfig& cfg) {
  if (epoch < 0.0) throw ConfigError("teacher_temp: epoch must be >= 0");
  if (cfg.teacher_temp_warmup_epochs == 0 || epoch >= cfg.teacher_temp_warmup_epochs) return cfg.teacher_temp_end;
  const double frac = epoch / cfg.teacher_temp_warmup_epochs;
  return cfg.teacher_temp_start + frac * (cfg.teacher_temp_end - cfg.teacher_temp_start);
}

ad::Matrix update_center(const ad::Matrix& center, const ad::Matrix& teacher_logits, double momentum) {
  if (center.rows() != 1 || center.cols() != teacher_logits.cols()) throw ShapeError("update_center: shape mismatch");
  if (teacher_logits.rows() == 0) return center;
  return momentum * center + (1.0 - momentum) * teacher_logits.colwise().mean();
}

SslResult masked_ssl_loss(const Branch& branch, const ad::Matrix& tokens, std::span<const ad::Index> positions,
                          std::span<const tokenizer::MaskSpec> views, double teacher_tau, double student_tau) {
  if (views.empty()) throw ConfigError("masked_ssl_loss: at least one masked view is required");
  SslResult result;
  {
    ad::NoGradGuard no_grad;
    const auto teacher_out = backbone::encode(*branch.teacher, tokens, positions);
    result.teacher_logits = backbone::project(*branch.teacher_head, teacher_out.cls).value();
  }
  result.teacher_probs = sharpen(result.teacher_logits, teacher_tau, branch.center);

  std::vector<ad::Tensor> terms;
  terms.reserve(views.size());
  for (const auto& mask : views) {
    auto out = backbone::encode(*branch.student, tokens, positions, &mask);
    ad::Tensor logits = backbone::project(*branch.student_head, out.cls);
    terms.push_back(soft_cross_entropy(result.teacher_probs, logits, student_tau));
    result.student_views.push_back(std::move(out));
  }
  result.loss = ad::scale(ad::sum_all(ad::concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
  if (!std::isfinite(result.loss.item())) throw NumericError("self-distillation loss is not finite");
  return result;
}

SslResult video_ssl_loss(const Branch& branch, const tokenizer::VideoClip& clip,
                         std::span<const tokenizer::MaskSpec> views, double teacher_tau, double student_tau) {
  const auto batch = tokenizer::tubify(clip);
  if (!(batch.grid == branch.student->config.grid)) throw GeometryError("clip grid does not match the video encoder");
  const auto positions = batch.position_indices();
  return masked_ssl_loss(branch, batch.tokens.front(), positions, views, teacher_tau, student_tau);
}

SslResult image_ssl_loss(const Branch& branch, const tokenizer::Image& frame,
                         std::span<const tokenizer::MaskSpec> views, double teacher_tau, double student_tau) {
  const auto batch = tokenizer::patchify_frame(frame);
  if (!(batch.grid == branch.student->config.grid)) throw GeometryError("frame grid does not match the image encoder");
  const auto positions = batch.position_indices();
  return masked_ssl_loss(branch, batch.tokens.front(), positions, views, teacher_tau, student_tau);
}

}  // namespace discovr::distill
