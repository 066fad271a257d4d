// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "pipeline.hpp"

#include "errors.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <numeric>
#include <sstream>

namespace discovr::pipeline {

namespace fs = std::filesystem;
using config::json;

namespace {

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void prepare_run_dir(const fs::path& dir, bool force) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_empty(dir, ec)) {
    if (!force) {
      throw ConfigError("run directory " + dir.string() + " is not empty; pass --force or choose a new --out");
    }
    for (const char* name : {"metrics.jsonl", "config.json", "run_manifest.json", "nan_dump.json"}) fs::remove(dir / name, ec);
    fs::remove_all(dir / "checkpoints", ec);
  }
  fs::create_directories(dir / "checkpoints", ec);
  if (ec) throw IoError("cannot create run directory " + dir.string() + ": " + ec.message());
}

json stats_json(const trainer::StepStats& s) {
  return {{"step", s.step},         {"epoch", s.epoch},       {"lr", s.lr},
          {"loss_total", s.loss_total}, {"loss_vid", s.loss_vid}, {"loss_img", s.loss_img},
          {"loss_scd", s.loss_scd}, {"tau_t", s.tau_t},       {"grad_norm", s.grad_norm}};
}

json metrics_json(const eval::MetricsReport& m) {
  return {{"accuracy", m.accuracy},
          {"balanced_accuracy", m.balanced_accuracy},
          {"precision", m.precision},
          {"recall", m.recall},
          {"f1", m.f1},
          {"f1_mode", std::string(eval::to_string(m.f1_mode))},
          {"f1_macro", m.f1_macro},
          {"f1_binary", m.f1_binary},
          {"auc", m.auc},
          {"confusion", {{"tp", m.tp}, {"fp", m.fp}, {"fn", m.fn}, {"tn", m.tn}}}};
}

std::vector<LoadedVideo> labeled_split(const data::Manifest& manifest, data::Split split, const trainer::TrainConfig& cfg) {
  std::vector<data::ManifestRecord> records;
  for (const auto& r : manifest.split(split)) {
    if (r.label != data::Label::unlabeled) records.push_back(r);
  }
  return load_videos(manifest, records, cfg.image_size, cfg.channels);
}

int count_padded(const std::vector<LoadedVideo>& videos, const trainer::TrainConfig& cfg) {
  const int span = data::clip_span(cfg.frames_per_clip, cfg.clip_stride);
  return static_cast<int>(std::count_if(videos.begin(), videos.end(),
                                        [&](const LoadedVideo& v) { return v.video.frames < span; }));
}

struct ClipPredictions {
  std::vector<int> preds;
  std::vector<double> scores;
};

json classification_report(const eval::EmbeddingSet& test, const ClipPredictions& clip, const eval::EvalConfig& cfg) {
  const auto videos = eval::aggregate_by_video(test, clip.preds, clip.scores);
  const auto m = eval::compute_metrics(videos.preds, videos.scores, videos.labels, cfg.f1_mode);
  json out = metrics_json(m);
  out["n_videos"] = videos.video_ids.size();
  out["n_clips"] = test.size();
  return out;
}

std::vector<std::uint8_t> binarize(const data::Video& mask, int frame) {
  std::vector<std::uint8_t> out(mask.frame_size());
  const float* src = mask.data.data() + mask.frame_size() * static_cast<std::size_t>(frame);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = src[i] >= 0.5f ? 1 : 0;
  return out;
}

// Frame samples of the first tiled clip of each video with its chamber mask.
std::vector<eval::SegSample> seg_samples(const backbone::EncoderParams& encoder, const std::vector<LoadedVideo>& videos,
                                         const trainer::TrainConfig& cfg, int frames_per_video) {
  std::vector<eval::SegSample> out;
  const auto grid = cfg.image_grid();
  for (const auto& v : videos) {
    const fs::path mask_file = data::mask_path_for(v.path);
    if (!fs::exists(mask_file)) {
      throw ConfigError("segment protocol needs masks; none found for " + v.path.string() + " (expected " +
                        mask_file.string() + ")");
    }
    const data::Video mask = data::conform(data::load_video(mask_file), cfg.image_size, 1);
    if (mask.frames != v.video.frames) throw DataError("mask frame count differs from video: " + mask_file.string());
    const auto clip = data::tile_clips(v.video, cfg.frames_per_clip, cfg.clip_stride, v.record.video_path).front();
    const ad::Matrix tokens = eval::clip_token_features(encoder, clip);
    const int take = std::min(frames_per_video, clip.frames);
    for (int i = 0; i < take; ++i) {
      const int j = static_cast<int>((static_cast<long>(i) * clip.frames) / take);
      const int source = (clip.span.start + j * clip.span.stride) % v.video.frames;
      out.push_back({eval::frame_token_features(tokens, j, grid.h, grid.w), binarize(mask, source)});
    }
  }
  return out;
}

}  // namespace

bool deterministic_mode() {
  const char* v = std::getenv("DISCOVR_DETERMINISTIC");
  return v != nullptr && std::string(v) == "1";
}

std::vector<LoadedVideo> load_videos(const data::Manifest& manifest, const std::vector<data::ManifestRecord>& records,
                                     int image_size, int channels) {
  std::vector<LoadedVideo> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    LoadedVideo v;
    v.record = r;
    v.path = manifest.resolve(r);
    v.video = data::conform(data::load_video(v.path), image_size, channels);
    out.push_back(std::move(v));
  }
  return out;
}

std::pair<double, double> pixel_statistics(const std::vector<LoadedVideo>& videos) {
  double sum = 0.0, sum_sq = 0.0;
  std::size_t n = 0;
  for (const auto& v : videos) {
    for (const float x : v.video.data) {
      sum += x;
      sum_sq += static_cast<double>(x) * x;
    }
    n += v.video.data.size();
  }
  if (n == 0) return {0.0, 1.0};
  const double mean = sum / static_cast<double>(n);
  return {mean, std::sqrt(std::max(0.0, sum_sq / static_cast<double>(n) - mean * mean))};
}

PretrainResult pretrain(const PretrainOptions& options) {
  options.config.validate();
  if (deterministic_mode()) Eigen::setNbThreads(1);
  const data::Manifest manifest = data::load_manifest(options.manifest);
  const auto records = data::pretraining_records(manifest.records);
  if (records.empty()) throw DataError("manifest has no train-split normal videos to pretrain on");

  PretrainResult result;
  result.run_dir = options.out_dir;
  prepare_run_dir(options.out_dir, options.force);

  const auto videos = load_videos(manifest, records, options.config.image_size, options.config.channels);
  trainer::TrainConfig cfg = options.config;
  if (!cfg.input_mean || !cfg.input_std) {
    const auto [mean, stddev] = pixel_statistics(videos);
    if (!cfg.input_mean) cfg.input_mean = mean;
    if (!cfg.input_std) cfg.input_std = stddev > 1e-6 ? stddev : 1.0;
  }

  const auto samples = static_cast<std::int64_t>(records.size()) * cfg.clips_per_video;
  const std::int64_t steps_per_epoch = (samples + cfg.batch_size - 1) / cfg.batch_size;
  json run_manifest = {
      {"label", cfg.run_label()},
      {"code_version", options.code_version},
      {"seed", cfg.seed},
      {"deterministic", deterministic_mode()},
      {"created_at", utc_now()},
      {"data", fs::absolute(options.manifest).string()},
      {"pretrain_videos", records.size()},
      {"steps_per_epoch", steps_per_epoch},
      {"parameters",
       {{"video_encoder", backbone::count_parameters(cfg.video_encoder())},
        {"image_encoder", backbone::count_parameters(cfg.image_encoder())}}},
      {"dry_run", options.dry_run},
      {"layout",
       {{"config", "config.json"},
        {"metrics", "metrics.jsonl"},
        {"checkpoints", "checkpoints/epoch_NNNN.ckpt"},
        {"final", "checkpoints/final.ckpt"}}},
      {"config", config::train_to_json(cfg)}};
  config::write_json_file(options.out_dir / "config.json", config::train_to_json(cfg));
  config::write_json_file(options.out_dir / "run_manifest.json", run_manifest);
  result.run_manifest = run_manifest;
  if (options.dry_run) return result;

  trainer::TrainState state;
  if (options.resume) {
    auto loaded = trainer::load_checkpoint(*options.resume);
    if (config::train_to_json(loaded.config).dump() != config::train_to_json(cfg).dump()) {
      json a = config::train_to_json(loaded.config), b = config::train_to_json(cfg);
      a.erase("epochs");
      b.erase("epochs");
      if (a != b) throw ConfigError("resume: checkpoint configuration differs from the requested one");
    }
    state = std::move(loaded.state);
    if (state.steps_per_epoch != steps_per_epoch) throw ConfigError("resume: steps per epoch changed");
  } else {
    state = trainer::init_state(cfg);
    state.steps_per_epoch = steps_per_epoch;
  }

  std::ofstream metrics(options.out_dir / "metrics.jsonl", std::ios::app);
  if (!metrics) throw IoError("cannot open metrics.jsonl in " + options.out_dir.string());

  std::optional<trainer::StepStats> last;
  try {
    while (state.epoch < cfg.epochs) {
      std::vector<std::size_t> order(static_cast<std::size_t>(samples));
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i % videos.size();
      std::shuffle(order.begin(), order.end(), state.rng);
      for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
        const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
        std::vector<tokenizer::VideoClip> clips;
        for (std::size_t i = start; i < end; ++i) {
          const auto& v = videos[order[i]];
          clips.push_back(data::sample_clip(v.video, cfg.frames_per_clip, cfg.clip_stride, state.rng, v.record.video_path));
        }
        last = trainer::train_step(state, clips, cfg);
        ++result.steps;
        if (last->step % cfg.log_every == 0) metrics << stats_json(*last).dump() << '\n' << std::flush;
        if (options.on_step) options.on_step(*last);
      }
      ++state.epoch;
      if (cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 && state.epoch < cfg.epochs) {
        char name[32];
        std::snprintf(name, sizeof name, "epoch_%04d.ckpt", state.epoch);
        trainer::save_checkpoint(state, cfg, options.out_dir / "checkpoints" / name);
      }
    }
  } catch (const NumericError& e) {
    json dump = {{"error", e.what()}, {"step", state.step}, {"epoch", state.epoch}};
    if (last) dump["last_stats"] = stats_json(*last);
    config::write_json_file(options.out_dir / "nan_dump.json", dump);
    throw;
  }
  result.final_checkpoint = options.out_dir / "checkpoints" / "final.ckpt";
  trainer::save_checkpoint(state, cfg, result.final_checkpoint);
  result.last = last;
  return result;
}

const backbone::EncoderParams& embedding_encoder(const trainer::Model& model, eval::EmbeddingSource source) {
  return source == eval::EmbeddingSource::teacher ? model.video_teacher : model.video_student;
}

eval::EmbeddingSet embed_videos(const backbone::EncoderParams& encoder, const std::vector<LoadedVideo>& videos,
                                const trainer::TrainConfig& cfg, const std::string& split) {
  eval::EmbeddingSet set;
  set.split = split;
  std::vector<ad::Matrix> rows;
  for (const auto& v : videos) {
    for (const auto& clip : data::tile_clips(v.video, cfg.frames_per_clip, cfg.clip_stride, v.record.video_path)) {
      rows.push_back(eval::extract_embedding(encoder, clip));
      set.labels.push_back(v.record.label == data::Label::abnormal ? eval::kAbnormal : eval::kNormal);
      set.video_ids.push_back(v.record.video_path);
      set.ef.push_back(v.record.ef ? *v.record.ef : std::nan(""));
    }
  }
  set.vectors.resize(static_cast<ad::Index>(rows.size()), encoder.config.width);
  for (std::size_t i = 0; i < rows.size(); ++i) set.vectors.row(static_cast<ad::Index>(i)) = rows[i].row(0);
  return set;
}

json evaluate(const trainer::TrainConfig& train_cfg, const trainer::Model& model, const data::Manifest& manifest,
              const eval::EvalConfig& cfg) {
  cfg.validate();
  if (deterministic_mode()) Eigen::setNbThreads(1);
  const auto& encoder = embedding_encoder(model, cfg.embedding_source);
  json report = {{"protocol", std::string(eval::to_string(cfg.protocol))},
                 {"label", train_cfg.run_label()},
                 {"embedding_source", std::string(eval::to_string(cfg.embedding_source))},
                 {"eval_config", config::eval_to_json(cfg)},
                 {"train_config", config::train_to_json(train_cfg)}};

  switch (cfg.protocol) {
    case eval::Protocol::knn:
    case eval::Protocol::probe: {
      const auto train_videos = labeled_split(manifest, data::Split::train, train_cfg);
      const auto val_videos = labeled_split(manifest, data::Split::val, train_cfg);
      const auto test_videos = labeled_split(manifest, data::Split::test, train_cfg);
      if (test_videos.empty()) throw ConfigError("manifest has no labeled test videos");
      const auto test = embed_videos(encoder, test_videos, train_cfg, "test");
      const auto val = embed_videos(encoder, val_videos, train_cfg, "val");
      ClipPredictions clip;
      if (cfg.protocol == eval::Protocol::knn) {
        if (train_videos.empty()) throw ConfigError("knn protocol needs labeled train videos");
        const auto train = embed_videos(encoder, train_videos, train_cfg, "train");
        int k = cfg.knn_k;
        if (k == 0) {
          if (val_videos.empty()) throw ConfigError("knn protocol selects k on the val split, which is empty");
          k = eval::select_k(train, val, cfg.knn_k_grid, cfg.knn_temp);
        }
        k = std::min<int>(k, static_cast<int>(train.size()));
        for (const auto& v : eval::knn_classify_all(train, test.vectors, k, cfg.knn_temp)) {
          clip.preds.push_back(v.label);
          clip.scores.push_back(v.abnormal_score);
        }
        report["k"] = k;
        report["n_train_clips"] = train.size();
        report["loop_padded_videos"] = count_padded(train_videos, train_cfg) + count_padded(val_videos, train_cfg) +
                                       count_padded(test_videos, train_cfg);
      } else {
        if (val_videos.empty()) throw ConfigError("probe protocol trains on the val split, which is empty");
        // Unit-norm features rescaled to unit per-dimension variance scale.
        const double s = std::sqrt(static_cast<double>(encoder.config.width));
        const auto probe = eval::linear_probe(eval::l2_normalized(val.vectors) * s, val.labels, cfg.probe_epochs,
                                              cfg.probe_lr, cfg.probe_batch_size, cfg.seed);
        const ad::Matrix p = probe.probabilities(eval::l2_normalized(test.vectors) * s);
        for (ad::Index i = 0; i < p.rows(); ++i) {
          clip.preds.push_back(p(i, eval::kAbnormal) > p(i, eval::kNormal) ? eval::kAbnormal : eval::kNormal);
          clip.scores.push_back(p(i, eval::kAbnormal));
        }
        report["n_probe_clips"] = val.size();
        report["loop_padded_videos"] = count_padded(val_videos, train_cfg) + count_padded(test_videos, train_cfg);
      }
      report["metrics"] = classification_report(test, clip, cfg);
      break;
    }
    case eval::Protocol::segment: {
      const auto train_videos = load_videos(manifest, manifest.split(data::Split::train), train_cfg.image_size,
                                            train_cfg.channels);
      const auto test_videos = load_videos(manifest, manifest.split(data::Split::test), train_cfg.image_size,
                                           train_cfg.channels);
      if (train_videos.empty() || test_videos.empty()) throw ConfigError("segment protocol needs train and test videos");
      const auto train = seg_samples(encoder, train_videos, train_cfg, cfg.seg_frames_per_video);
      const auto test = seg_samples(encoder, test_videos, train_cfg, cfg.seg_frames_per_video);
      Rng rng(cfg.seed);
      const auto grid = train_cfg.image_grid();
      auto head = eval::init_seg_head(encoder.config.width, cfg.seg_dim, grid.h, grid.w, 2, rng);
      const double loss = eval::train_seg_head(head, train, cfg.seg_epochs, cfg.seg_lr, cfg.seed);
      report["metrics"] = {{"dice", eval::evaluate_seg_head(head, test)},
                           {"final_train_loss", loss},
                           {"n_train_frames", train.size()},
                           {"n_test_frames", test.size()}};
      break;
    }
    case eval::Protocol::regress_ef: {
      auto with_ef = [&](data::Split split) {
        auto records = manifest.split(split);
        for (const auto& r : records) {
          if (!r.ef) throw ConfigError("regress-ef protocol needs an ef value for every video; missing for " + r.video_path);
        }
        return load_videos(manifest, records, train_cfg.image_size, train_cfg.channels);
      };
      const auto train_videos = with_ef(data::Split::train);
      const auto test_videos = with_ef(data::Split::test);
      if (train_videos.empty() || test_videos.empty()) throw ConfigError("regress-ef protocol needs train and test videos");
      std::vector<double> video_targets;
      for (const auto& v : test_videos) video_targets.push_back(*v.record.ef);
      std::vector<double> video_preds;
      if (cfg.ef_mode == eval::EfMode::probe) {
        const auto train = embed_videos(encoder, train_videos, train_cfg, "train");
        const auto test = embed_videos(encoder, test_videos, train_cfg, "test");
        const auto reg = eval::fit_ridge(train.vectors, train.ef, cfg.ef_ridge);
        const auto clip_preds = reg.predict(test.vectors);
        // Mean over the clips of each video, in video order.
        std::size_t at = 0;
        for (const auto& v : test_videos) {
          double sum = 0.0;
          int n = 0;
          while (at < test.size() && test.video_ids[at] == v.record.video_path) {
            sum += clip_preds[at++];
            ++n;
          }
          video_preds.push_back(sum / n);
        }
      } else {
        std::vector<tokenizer::VideoClip> clips;
        std::vector<double> targets;
        for (const auto& v : train_videos) {
          for (auto& c : data::tile_clips(v.video, train_cfg.frames_per_clip, train_cfg.clip_stride)) {
            clips.push_back(std::move(c));
            targets.push_back(*v.record.ef);
          }
        }
        const auto reg = eval::finetune_regressor(encoder, clips, targets, cfg.ef_finetune_blocks, cfg.ef_epochs,
                                                  cfg.ef_lr, cfg.seed);
        for (const auto& v : test_videos) {
          double sum = 0.0;
          int n = 0;
          for (const auto& c : data::tile_clips(v.video, train_cfg.frames_per_clip, train_cfg.clip_stride)) {
            sum += reg.predict(c);
            ++n;
          }
          video_preds.push_back(sum / n);
        }
      }
      const auto errors = eval::regression_errors(video_preds, video_targets);
      report["metrics"] = {{"mae", errors.mae},
                           {"rmse", errors.rmse},
                           {"ef_mode", std::string(eval::to_string(cfg.ef_mode))},
                           {"n_videos", video_targets.size()}};
      break;
    }
  }
  return report;
}

json evaluate_checkpoint(const EvalOptions& options) {
  const auto loaded = trainer::load_checkpoint(options.checkpoint);
  const data::Manifest manifest = data::load_manifest(options.manifest);
  json report = evaluate(loaded.config, loaded.state.model, manifest, options.config);
  report["checkpoint"] = fs::absolute(options.checkpoint).string();
  report["step"] = loaded.state.step;
  report["data"] = fs::absolute(options.manifest).string();
  if (options.report) {
    config::write_json_file(*options.report, report);
    fs::path csv = *options.report;
    csv.replace_extension(".csv");
    std::ofstream out(csv, std::ios::trunc);
    if (!out) throw IoError("cannot write " + csv.string());
    out << report_csv(report);
  }
  return report;
}

std::string report_csv(const json& report) {
  static const char* kColumns[] = {"balanced_accuracy", "f1", "auc", "precision", "recall", "accuracy", "dice", "mae", "rmse"};
  std::ostringstream header, row;
  header << "label,protocol";
  row << report.value("label", std::string()) << ',' << report.value("protocol", std::string());
  const json& m = report.contains("metrics") ? report["metrics"] : json::object();
  for (const char* c : kColumns) {
    header << ',' << c;
    row << ',';
    if (m.contains(c) && m[c].is_number()) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", m[c].get<double>());
      row << buf;
    }
  }
  return header.str() + "\n" + row.str() + "\n";
}

}  // namespace discovr::pipeline
