// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Run-level drivers: pretraining over a manifest into an append-only run
// directory, and the end-to-end evaluation protocols.

#pragma once

#include "config.hpp"
#include "data.hpp"
#include "eval.hpp"
#include "trainer.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace discovr::pipeline {

// True when DISCOVR_DETERMINISTIC=1 is set.
bool deterministic_mode();

struct LoadedVideo {
  data::ManifestRecord record;
  std::filesystem::path path;
  data::Video video;  // conformed to the model geometry
};

std::vector<LoadedVideo> load_videos(const data::Manifest& manifest, const std::vector<data::ManifestRecord>& records,
                                     int image_size, int channels);

// Mean and standard deviation over every sample of every video.
std::pair<double, double> pixel_statistics(const std::vector<LoadedVideo>& videos);

struct PretrainOptions {
  trainer::TrainConfig config;
  std::filesystem::path manifest;
  std::filesystem::path out_dir;
  bool force = false;
  // Validates and writes the run manifest without allocating the model.
  bool dry_run = false;
  std::optional<std::filesystem::path> resume;
  std::string code_version = "unknown";
  std::function<void(const trainer::StepStats&)> on_step;
};

struct PretrainResult {
  std::filesystem::path run_dir;
  std::filesystem::path final_checkpoint;  // empty for dry runs
  config::json run_manifest;
  std::int64_t steps = 0;
  std::optional<trainer::StepStats> last;
};

// Run directory layout: config.json, run_manifest.json, metrics.jsonl,
// checkpoints/epoch_NNNN.ckpt, checkpoints/final.ckpt. An existing non-empty
// directory is refused unless `force` is set.
PretrainResult pretrain(const PretrainOptions& options);

// Encoder used by the embedding protocols.
const backbone::EncoderParams& embedding_encoder(const trainer::Model& model, eval::EmbeddingSource source);

// Clip embeddings of `videos` (tiled clips), labels from the manifest.
eval::EmbeddingSet embed_videos(const backbone::EncoderParams& encoder, const std::vector<LoadedVideo>& videos,
                                const trainer::TrainConfig& cfg, const std::string& split);

// Runs the configured protocol and returns the report document.
config::json evaluate(const trainer::TrainConfig& train_cfg, const trainer::Model& model, const data::Manifest& manifest,
                      const eval::EvalConfig& cfg);

struct EvalOptions {
  eval::EvalConfig config;
  std::filesystem::path checkpoint;
  std::filesystem::path manifest;
  std::optional<std::filesystem::path> report;  // JSON; a .csv row is written next to it
};

config::json evaluate_checkpoint(const EvalOptions& options);

// Header and one row summarizing a report for table assembly.
std::string report_csv(const config::json& report);

}  // namespace discovr::pipeline
