// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Shared fixtures for the unit tests: seeded generators, a tiny training
// profile and a central finite-difference gradient checker.
#pragma once

#include "autograd.hpp"
#include "errors.hpp"
#include "tokenizer.hpp"
#include "trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <unistd.h>

namespace discovr::testing {

inline ad::Matrix random_matrix(ad::Index rows, ad::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  ad::Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline tokenizer::VideoClip random_clip(int t, int h, int w, int c, Rng& rng) {
  tokenizer::VideoClip clip(t, h, w, c);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& x : clip.data) x = u(rng);
  return clip;
}

// Smallest geometry that exercises every branch: 4 frames of 32x32 give 8
// tubes and 4 patches per frame.
inline trainer::TrainConfig tiny_config() {
  trainer::TrainConfig c;
  c.seed = 11;
  c.variant = backbone::Variant::test;
  c.frames_per_clip = 4;
  c.clip_stride = 1;
  c.image_size = 32;
  c.channels = 1;
  c.input_mean = 0.5;
  c.input_std = 0.3;
  c.mask_ratio = 0.5;
  c.epochs = 4;
  c.warmup_epochs = 1;
  c.batch_size = 2;
  c.base_lr = 1e-3;
  c.head_hidden = 16;
  c.head_bottleneck = 8;
  c.head_out_dim = 12;
  c.scd.num_prototypes = 6;
  c.distill.video_views = 2;
  c.distill.image_views = 2;
  c.distill.teacher_temp_warmup_epochs = 2;
  c.image_frames_per_clip = 2;
  c.checkpoint_every = 0;
  return c;
}

inline std::vector<tokenizer::VideoClip> tiny_clips(const trainer::TrainConfig& c, int n, Rng& rng) {
  std::vector<tokenizer::VideoClip> clips;
  for (int i = 0; i < n; ++i) clips.push_back(random_clip(c.frames_per_clip, c.image_size, c.image_size, c.channels, rng));
  return clips;
}

// Parameters start with a zero gradient buffer; nodes never reached stay empty.
inline double grad_norm(const ad::Tensor& t) { return t.grad().size() == 0 ? 0.0 : t.grad().norm(); }

struct GradCheck {
  int checked = 0;
  double worst = 0.0;  // largest relative error seen
};

// Compares d(loss)/d(param) from one backward pass against central
// differences at `samples` random entries drawn across `params`. `loss` must
// rebuild the graph on every call and be deterministic.
inline GradCheck check_gradients(const std::function<ad::Tensor()>& loss, const std::vector<ad::Tensor>& params,
                                 int samples, Rng& rng, double h = 1e-5) {
  for (auto p : params) p.zero_grad();
  ad::backward(loss());
  GradCheck out;
  std::uniform_int_distribution<std::size_t> pick_param(0, params.size() - 1);
  for (int s = 0; s < samples; ++s) {
    ad::Tensor p = params[pick_param(rng)];
    std::uniform_int_distribution<ad::Index> pick(0, p.value().size() - 1);
    const ad::Index i = pick(rng);
    const double analytic = p.grad().size() == 0 ? 0.0 : p.grad().data()[i];
    double& w = p.mutable_value().data()[i];
    const double saved = w;
    double plus = 0.0, minus = 0.0;
    {
      ad::NoGradGuard g;
      w = saved + h;
      plus = loss().item();
      w = saved - h;
      minus = loss().item();
    }
    w = saved;
    const double numeric = (plus - minus) / (2.0 * h);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
    out.worst = std::max(out.worst, std::abs(analytic - numeric) / denom);
    ++out.checked;
  }
  return out;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("discovr_test_" + name + "_" + std::to_string(::getpid()));
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace discovr::testing
