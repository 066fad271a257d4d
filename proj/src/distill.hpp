// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Student/teacher self-distillation: EMA teachers, temperature sharpening,
// teacher centering and the masked-view distillation losses used by both
// the video and the image branch.

#pragma once

#include "autograd.hpp"
#include "backbone.hpp"
#include "tokenizer.hpp"

#include <span>
#include <vector>

namespace discovr::distill {

struct DistillConfig {
  double ema_momentum = 0.996;
  double student_temp = 0.1;
  double teacher_temp_start = 0.04;
  double teacher_temp_end = 0.07;
  int teacher_temp_warmup_epochs = 30;
  int video_views = 4;
  int image_views = 4;
  double center_momentum = 0.9;
  bool centering = true;

  // Momentum 1 freezes the teacher and is only meaningful in tests.
  void validate(bool allow_frozen_teacher = false) const;
};

// Row-stochastic matrix.
struct ProbDist {
  ad::Matrix rows;
};

// teacher <- momentum * teacher + (1 - momentum) * student, elementwise.
void ema_update(const backbone::ParamList& teacher, const backbone::ParamList& student, double momentum);

// softmax((logits - center) / tau) per row, max-subtracted.
ProbDist sharpen(const ad::Matrix& logits, double tau, const ad::Matrix* center = nullptr);

// Mean over rows of H(target, softmax(student_logits / tau_s)). The target
// is a constant, so no gradient reaches whatever produced it.
ad::Tensor soft_cross_entropy(const ProbDist& target, const ad::Tensor& student_logits, double student_temp);

// Mean row entropy, in nats.
double entropy(const ProbDist& p);

// Linear warmup from start to end over the warmup epochs, constant after.
double teacher_temp(double epoch, const DistillConfig& cfg);

// momentum * center + (1 - momentum) * mean over rows of teacher_logits.
ad::Matrix update_center(const ad::Matrix& center, const ad::Matrix& teacher_logits, double momentum);

// One branch of the student/teacher pair.
struct Branch {
  const backbone::EncoderParams* student = nullptr;
  const backbone::EncoderParams* teacher = nullptr;
  const backbone::HeadParams* student_head = nullptr;
  const backbone::HeadParams* teacher_head = nullptr;
  const ad::Matrix* center = nullptr;  // null disables centering
};

struct SslResult {
  ad::Tensor loss;                                    // 1x1
  ad::Matrix teacher_logits;                          // 1 x out_dim, uncentered
  ProbDist teacher_probs;                             // 1 x out_dim
  std::vector<backbone::EncoderOutput> student_views;  // one per mask
};

// Teacher sees all tokens, the student each masked view; the loss is the
// mean over views of H(P_t, P_s). Used for both video tubes and frame
// patches.
SslResult masked_ssl_loss(const Branch& branch, const ad::Matrix& tokens, std::span<const ad::Index> positions,
                          std::span<const tokenizer::MaskSpec> views, double teacher_tau, double student_tau);

// Video branch over one clip.
SslResult video_ssl_loss(const Branch& branch, const tokenizer::VideoClip& clip,
                         std::span<const tokenizer::MaskSpec> views, double teacher_tau, double student_tau);
// Image branch over one frame.
SslResult image_ssl_loss(const Branch& branch, const tokenizer::Image& frame,
                         std::span<const tokenizer::MaskSpec> views, double teacher_tau, double student_tau);

}  // namespace discovr::distill
