// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "discovr/discovr.h"

#include "config.hpp"
#include "errors.hpp"
#include "pipeline.hpp"
#include "scd.hpp"

#include <cstdlib>
#include <cstring>
#include <new>
#include <string>
#include <variant>

#ifndef DISCOVR_CODE_VERSION
#define DISCOVR_CODE_VERSION "unknown"
#endif

using namespace discovr;

struct discovr_config {
  discovr_config_kind kind;
  std::variant<trainer::TrainConfig, eval::EvalConfig, data::SyntheticConfig> value;
};

struct discovr_trainer {
  trainer::TrainConfig config;
  trainer::TrainState state;
};

namespace {

thread_local std::string g_last_error;

discovr_status fail(discovr_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

// Runs `body`, translating exceptions into status codes.
template <typename F>
discovr_status guarded(F&& body) {
  try {
    g_last_error.clear();
    body();
    return DISCOVR_OK;
  } catch (const ConfigError& e) {
    return fail(DISCOVR_ERR_CONFIG, e.what());
  } catch (const GeometryError& e) {
    return fail(DISCOVR_ERR_GEOMETRY, e.what());
  } catch (const ShapeError& e) {
    return fail(DISCOVR_ERR_SHAPE, e.what());
  } catch (const DataError& e) {
    return fail(DISCOVR_ERR_DATA, e.what());
  } catch (const CorruptionError& e) {
    return fail(DISCOVR_ERR_CORRUPT, e.what());
  } catch (const VersionError& e) {
    return fail(DISCOVR_ERR_VERSION, e.what());
  } catch (const NumericError& e) {
    return fail(DISCOVR_ERR_NUMERIC, e.what());
  } catch (const IoError& e) {
    return fail(DISCOVR_ERR_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(DISCOVR_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(DISCOVR_ERR_INTERNAL, e.what());
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void require(bool ok, const char* what) {
  if (!ok) throw ConfigError(std::string("invalid argument: ") + what);
}

template <typename T>
const config::Schema<T>& schema_of();
template <>
const config::Schema<trainer::TrainConfig>& schema_of() {
  return config::train_schema();
}
template <>
const config::Schema<eval::EvalConfig>& schema_of() {
  return config::eval_schema();
}
template <>
const config::Schema<data::SyntheticConfig>& schema_of() {
  return config::synth_schema();
}

struct KeyInfo {
  const std::string* name = nullptr;
  const std::string* type = nullptr;
  const std::string* help = nullptr;
};

template <typename T>
std::size_t key_count() {
  return schema_of<T>().size();
}

template <typename T>
KeyInfo key_info(std::size_t i) {
  const auto& s = schema_of<T>();
  if (i >= s.size()) return {};
  return {&s[i].key, &s[i].type, &s[i].help};
}

KeyInfo key_info(discovr_config_kind kind, std::size_t i) {
  switch (kind) {
    case DISCOVR_CONFIG_TRAIN: return key_info<trainer::TrainConfig>(i);
    case DISCOVR_CONFIG_EVAL: return key_info<eval::EvalConfig>(i);
    case DISCOVR_CONFIG_SYNTH: return key_info<data::SyntheticConfig>(i);
  }
  return {};
}

tokenizer::VideoClip clip_from(const float* data, int frames, int height, int width, int channels) {
  require(data != nullptr, "clip buffer is null");
  require(frames > 0 && height > 0 && width > 0 && channels > 0, "clip dimensions must be positive");
  tokenizer::VideoClip clip(frames, height, width, channels);
  std::memcpy(clip.data.data(), data, clip.data.size() * sizeof(float));
  return clip;
}

template <typename T>
T& expect(discovr_config* c, discovr_config_kind kind, const char* what) {
  require(c != nullptr, "config is null");
  if (c->kind != kind) throw ConfigError(std::string(what) + " requires a different config kind");
  return std::get<T>(c->value);
}

template <typename T>
const T& expect(const discovr_config* c, discovr_config_kind kind, const char* what) {
  return expect<T>(const_cast<discovr_config*>(c), kind, what);
}

}  // namespace

extern "C" {

const char* discovr_version(void) { return DISCOVR_CODE_VERSION; }

const char* discovr_status_string(discovr_status status) {
  switch (status) {
    case DISCOVR_OK: return "ok";
    case DISCOVR_ERR_INVALID_ARGUMENT: return "invalid argument";
    case DISCOVR_ERR_CONFIG: return "configuration error";
    case DISCOVR_ERR_DATA: return "data error";
    case DISCOVR_ERR_IO: return "i/o error";
    case DISCOVR_ERR_CORRUPT: return "corrupt input";
    case DISCOVR_ERR_VERSION: return "unsupported version";
    case DISCOVR_ERR_NUMERIC: return "numeric failure";
    case DISCOVR_ERR_GEOMETRY: return "geometry error";
    case DISCOVR_ERR_SHAPE: return "shape error";
    case DISCOVR_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* discovr_last_error(void) { return g_last_error.c_str(); }

void discovr_free(void* ptr) { std::free(ptr); }

discovr_status discovr_config_create(discovr_config_kind kind, discovr_config** out) {
  if (!out) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "out is null");
  return guarded([&] {
    auto* c = new discovr_config{kind, trainer::TrainConfig{}};
    switch (kind) {
      case DISCOVR_CONFIG_TRAIN: break;
      case DISCOVR_CONFIG_EVAL: c->value = eval::EvalConfig{}; break;
      case DISCOVR_CONFIG_SYNTH: c->value = data::SyntheticConfig{}; break;
      default:
        delete c;
        throw ConfigError("unknown config kind");
    }
    *out = c;
  });
}

void discovr_config_destroy(discovr_config* config) { delete config; }

discovr_status discovr_config_set(discovr_config* config, const char* key, const char* value) {
  if (!config || !key || !value) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "config, key and value are required");
  return guarded([&] {
    std::visit([&](auto& cfg) { config::apply_text(cfg, key, value, schema_of<std::decay_t<decltype(cfg)>>()); },
               config->value);
  });
}

discovr_status discovr_config_load_json(discovr_config* config, const char* json_text) {
  if (!config || !json_text) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "config and json are required");
  return guarded([&] {
    config::json j;
    try {
      j = config::json::parse(json_text);
    } catch (const config::json::parse_error& e) {
      throw ConfigError(std::string("invalid JSON: ") + e.what());
    }
    std::visit([&](auto& cfg) { config::apply_json(cfg, j, schema_of<std::decay_t<decltype(cfg)>>()); }, config->value);
  });
}

discovr_status discovr_config_load_file(discovr_config* config, const char* path) {
  if (!config || !path) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "config and path are required");
  return guarded([&] {
    const auto j = config::load_json_file(path);
    std::visit([&](auto& cfg) { config::apply_json(cfg, j, schema_of<std::decay_t<decltype(cfg)>>()); }, config->value);
  });
}

discovr_status discovr_config_to_json(const discovr_config* config, char** out) {
  if (!config || !out) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "config and out are required");
  return guarded([&] {
    const auto j = std::visit(
        [](const auto& cfg) { return config::to_json(cfg, schema_of<std::decay_t<decltype(cfg)>>()); }, config->value);
    *out = dup_string(j.dump(2));
  });
}

discovr_status discovr_config_validate(const discovr_config* config) {
  if (!config) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "config is null");
  return guarded([&] { std::visit([](const auto& cfg) { cfg.validate(); }, config->value); });
}

size_t discovr_config_key_count(discovr_config_kind kind) {
  switch (kind) {
    case DISCOVR_CONFIG_TRAIN: return key_count<trainer::TrainConfig>();
    case DISCOVR_CONFIG_EVAL: return key_count<eval::EvalConfig>();
    case DISCOVR_CONFIG_SYNTH: return key_count<data::SyntheticConfig>();
  }
  return 0;
}

const char* discovr_config_key_name(discovr_config_kind kind, size_t index) {
  const auto info = key_info(kind, index);
  return info.name ? info.name->c_str() : nullptr;
}

const char* discovr_config_key_type(discovr_config_kind kind, size_t index) {
  const auto info = key_info(kind, index);
  return info.type ? info.type->c_str() : nullptr;
}

const char* discovr_config_key_help(discovr_config_kind kind, size_t index) {
  const auto info = key_info(kind, index);
  return info.help ? info.help->c_str() : nullptr;
}

discovr_status discovr_synth_generate(const discovr_config* synth, const char* out_dir, char** manifest_out) {
  if (!out_dir) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "out_dir is required");
  return guarded([&] {
    const auto& cfg = expect<data::SyntheticConfig>(synth, DISCOVR_CONFIG_SYNTH, "discovr_synth_generate");
    const auto ds = data::synth_generate(cfg, out_dir);
    if (manifest_out) *manifest_out = dup_string(ds.manifest.string());
  });
}

discovr_status discovr_pretrain(const discovr_config* train, const char* manifest, const char* out_dir, unsigned flags,
                                const char* resume_checkpoint, discovr_step_callback callback, void* user_data,
                                char** result_out) {
  if (!manifest || !out_dir) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "manifest and out_dir are required");
  return guarded([&] {
    pipeline::PretrainOptions o;
    o.config = expect<trainer::TrainConfig>(train, DISCOVR_CONFIG_TRAIN, "discovr_pretrain");
    o.manifest = manifest;
    o.out_dir = out_dir;
    o.force = (flags & DISCOVR_PRETRAIN_FORCE) != 0;
    o.dry_run = (flags & DISCOVR_PRETRAIN_DRY_RUN) != 0;
    if (resume_checkpoint) o.resume = resume_checkpoint;
    o.code_version = DISCOVR_CODE_VERSION;
    if (callback) {
      o.on_step = [&](const trainer::StepStats& s) {
        const config::json j = {{"step", s.step},         {"epoch", s.epoch},       {"lr", s.lr},
                                {"loss_total", s.loss_total}, {"loss_vid", s.loss_vid}, {"loss_img", s.loss_img},
                                {"loss_scd", s.loss_scd}, {"tau_t", s.tau_t}};
        callback(j.dump().c_str(), user_data);
      };
    }
    const auto r = pipeline::pretrain(o);
    if (result_out) {
      config::json j = {{"run_dir", r.run_dir.string()},
                        {"final_checkpoint", r.final_checkpoint.string()},
                        {"steps", r.steps},
                        {"run_manifest", r.run_manifest}};
      if (r.last) j["final_loss"] = r.last->loss_total;
      *result_out = dup_string(j.dump(2));
    }
  });
}

discovr_status discovr_evaluate(const discovr_config* eval_cfg, const char* checkpoint, const char* manifest,
                                const char* report_path, char** report_out) {
  if (!checkpoint || !manifest) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "checkpoint and manifest are required");
  return guarded([&] {
    pipeline::EvalOptions o;
    o.config = expect<eval::EvalConfig>(eval_cfg, DISCOVR_CONFIG_EVAL, "discovr_evaluate");
    o.checkpoint = checkpoint;
    o.manifest = manifest;
    if (report_path) o.report = report_path;
    const auto report = pipeline::evaluate_checkpoint(o);
    if (report_out) *report_out = dup_string(report.dump(2));
  });
}

discovr_status discovr_trainer_create(const discovr_config* train, discovr_trainer** out) {
  if (!out) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "out is null");
  return guarded([&] {
    const auto& cfg = expect<trainer::TrainConfig>(train, DISCOVR_CONFIG_TRAIN, "discovr_trainer_create");
    auto* t = new discovr_trainer{cfg, trainer::init_state(cfg)};
    *out = t;
  });
}

discovr_status discovr_trainer_load(const char* checkpoint, discovr_trainer** out) {
  if (!checkpoint || !out) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "checkpoint and out are required");
  return guarded([&] {
    auto loaded = trainer::load_checkpoint(checkpoint);
    *out = new discovr_trainer{std::move(loaded.config), std::move(loaded.state)};
  });
}

void discovr_trainer_destroy(discovr_trainer* trainer) { delete trainer; }

discovr_status discovr_trainer_save(const discovr_trainer* t, const char* path) {
  if (!t || !path) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "trainer and path are required");
  return guarded([&] { trainer::save_checkpoint(t->state, t->config, path); });
}

discovr_status discovr_trainer_step_count(const discovr_trainer* t, int64_t* out) {
  if (!t || !out) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "trainer and out are required");
  *out = t->state.step;
  return DISCOVR_OK;
}

discovr_status discovr_trainer_step(discovr_trainer* t, const float* clips, int batch, int frames, int height, int width,
                                    int channels, double* loss_out) {
  if (!t || !clips || batch <= 0) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "trainer, clips and batch > 0 are required");
  return guarded([&] {
    std::vector<tokenizer::VideoClip> batch_clips;
    const std::size_t clip_size = static_cast<std::size_t>(frames) * height * width * channels;
    for (int b = 0; b < batch; ++b) {
      batch_clips.push_back(clip_from(clips + clip_size * static_cast<std::size_t>(b), frames, height, width, channels));
    }
    const auto stats = trainer::train_step(t->state, batch_clips, t->config);
    if (loss_out) *loss_out = stats.loss_total;
  });
}

discovr_status discovr_trainer_embed(const discovr_trainer* t, const float* clip, int frames, int height, int width,
                                     int channels, double* out) {
  if (!t || !clip || !out) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "trainer, clip and out are required");
  return guarded([&] {
    const auto z = eval::extract_embedding(t->state.model.video_teacher, clip_from(clip, frames, height, width, channels));
    std::memcpy(out, z.data(), sizeof(double) * static_cast<std::size_t>(z.size()));
  });
}

int discovr_trainer_embedding_dim(const discovr_trainer* t) { return t ? t->state.model.video_teacher.config.width : 0; }

discovr_status discovr_sinkhorn(const double* scores, int rows, int cols, double epsilon, int iterations, double* out) {
  if (!scores || !out || rows <= 0 || cols <= 0) {
    return fail(DISCOVR_ERR_INVALID_ARGUMENT, "scores, out and positive dimensions are required");
  }
  return guarded([&] {
    const Eigen::Map<const ad::Matrix> s(scores, rows, cols);
    const auto q = scd::sinkhorn(s, epsilon, iterations);
    std::memcpy(out, q.q.data(), sizeof(double) * static_cast<std::size_t>(q.q.size()));
  });
}

discovr_status discovr_label_from_ef(double ef, int* abnormal) {
  if (!abnormal) return fail(DISCOVR_ERR_INVALID_ARGUMENT, "abnormal is null");
  return guarded([&] { *abnormal = data::label_from_ef(ef) == data::Label::abnormal ? 1 : 0; });
}

}  // extern "C"
