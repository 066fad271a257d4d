// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Pretraining step: the combined video/image/cluster objective, AdamW with
// decoupled weight decay, EMA teachers, schedules and checkpoints.

#pragma once

#include "autograd.hpp"
#include "backbone.hpp"
#include "distill.hpp"
#include "scd.hpp"
#include "tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace discovr::trainer {

struct TrainConfig {
  std::uint64_t seed = 0;
  backbone::Variant variant = backbone::Variant::base;
  int frames_per_clip = 64;
  int clip_stride = 3;
  int image_size = 112;
  int channels = 3;
  // Intensity standardization; pretraining fills unset values from the
  // pixel statistics of its videos.
  std::optional<double> input_mean;
  std::optional<double> input_std;
  double mask_ratio = 0.9;
  std::optional<double> image_mask_ratio;  // follows mask_ratio when unset

  int epochs = 400;
  double base_lr = 1.5e-4;
  double weight_decay = 0.05;
  int warmup_epochs = 40;
  int batch_size = 8;
  double grad_clip = 3.0;

  distill::DistillConfig distill;
  scd::ScdConfig scd;

  backbone::HeadKind head = backbone::HeadKind::mlp;
  int head_hidden = 2048;
  int head_bottleneck = 256;
  int head_out_dim = 4096;
  int decoder_depth = 2;
  // Frames per clip fed to the image self-distillation branch each step.
  int image_frames_per_clip = 2;

  bool loss_vid = true;
  bool loss_img = true;
  bool loss_scd = true;
  double w_vid = 1.0;
  double w_img = 1.0;
  double w_scd = 1.0;

  // Random-start clips drawn from each pretraining video per epoch.
  int clips_per_video = 1;

  int checkpoint_every = 50;  // epochs; 0 writes only the final checkpoint
  int log_every = 1;          // steps

  double effective_image_mask_ratio() const { return image_mask_ratio.value_or(mask_ratio); }
  tokenizer::TokenGrid video_grid() const;
  tokenizer::TokenGrid image_grid() const;
  backbone::EncoderConfig video_encoder() const;
  backbone::EncoderConfig image_encoder() const;
  backbone::HeadConfig head_config(int in_dim) const;
  // Throws ConfigError on any violated invariant, including masks that would
  // leave no visible token.
  void validate() const;
  // Short label naming the ablation axes of this run.
  std::string run_label() const;
};

// Every parameter group of the framework plus the teacher centers.
struct Model {
  backbone::EncoderParams video_student, video_teacher;
  backbone::EncoderParams image_student, image_teacher;
  backbone::DecoderParams video_decoder;
  backbone::HeadParams video_head_student, video_head_teacher;
  backbone::HeadParams image_head_student, image_head_teacher;
  scd::PrototypeBank prototypes;
  ad::Matrix video_center, image_center;

  // Checkpoint groups: video_student, video_teacher, image_student,
  // image_teacher, video_decoder, heads, prototypes.
  std::vector<std::pair<std::string, backbone::ParamList>> groups() const;
  // Optimized parameters, named "<group>/<param>". Teachers are excluded.
  backbone::ParamList trainable() const;
  backbone::ParamList teachers() const;
};

// Students and teachers start identical.
Model init_model(const TrainConfig& cfg, Rng& rng);

struct AdamMoments {
  ad::Matrix m;
  ad::Matrix v;
};

struct TrainState {
  Model model;
  std::vector<AdamMoments> moments;  // aligned with model.trainable()
  std::int64_t step = 0;
  int epoch = 0;
  std::int64_t steps_per_epoch = 1;
  Rng rng;
};

TrainState init_state(const TrainConfig& cfg);

// Random choices of one step, drawn up front so the loss is a deterministic
// function of parameters.
struct ClipPlan {
  std::vector<tokenizer::MaskSpec> video_views;
  std::vector<int> image_frames;
  std::vector<std::vector<tokenizer::MaskSpec>> image_views;  // per image frame
};
using StepPlan = std::vector<ClipPlan>;

StepPlan plan_step(const std::vector<tokenizer::VideoClip>& clips, const TrainConfig& cfg, Rng& rng);

struct LossBreakdown {
  ad::Tensor total;
  double vid = 0.0;
  double img = 0.0;
  double scd = 0.0;
  ad::Matrix video_teacher_logits;  // B x out_dim
  ad::Matrix image_teacher_logits;  // frames x out_dim
};

// w_vid * L_vid + w_img * L_img + w_scd * L_scd over enabled terms.
LossBreakdown total_loss(const std::vector<tokenizer::VideoClip>& clips, const StepPlan& plan, const Model& model,
                         const TrainConfig& cfg, double teacher_tau, scd::TargetCache* cache = nullptr);

double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t steps_per_epoch);

struct StepStats {
  std::int64_t step = 0;
  int epoch = 0;
  double lr = 0.0;
  double tau_t = 0.0;
  double loss_total = 0.0;
  double loss_vid = 0.0;
  double loss_img = 0.0;
  double loss_scd = 0.0;
  double grad_norm = 0.0;
};

// Forward/backward, clipped AdamW on students/decoder/heads/prototypes, EMA
// of both teachers, center update. Throws NumericError on a non-finite loss.
StepStats train_step(TrainState& state, const std::vector<tokenizer::VideoClip>& clips, const TrainConfig& cfg);

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const TrainState& state, const TrainConfig& cfg, const std::filesystem::path& path);
struct LoadedCheckpoint {
  TrainConfig config;
  TrainState state;
};
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace discovr::trainer
