// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "config.hpp"

#include "errors.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <type_traits>

namespace discovr::config {

namespace {

template <typename V>
struct Codec;

template <>
struct Codec<int> {
  static constexpr const char* type = "int";
  static json encode(int v) { return v; }
  static int decode(const json& j) {
    if (!j.is_number_integer()) throw ConfigError("expected an integer, got " + j.dump());
    const auto v = j.get<std::int64_t>();
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) {
      throw ConfigError("integer out of range: " + j.dump());
    }
    return static_cast<int>(v);
  }
  static int parse(const std::string& s) {
    int v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw ConfigError("expected an integer, got '" + s + "'");
    return v;
  }
};

template <>
struct Codec<std::uint64_t> {
  static constexpr const char* type = "uint";
  static json encode(std::uint64_t v) { return v; }
  static std::uint64_t decode(const json& j) {
    if (j.is_number_unsigned()) return j.get<std::uint64_t>();
    if (j.is_number_integer() && j.get<std::int64_t>() >= 0) return static_cast<std::uint64_t>(j.get<std::int64_t>());
    throw ConfigError("expected a non-negative integer, got " + j.dump());
  }
  static std::uint64_t parse(const std::string& s) {
    std::uint64_t v = 0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) {
      throw ConfigError("expected a non-negative integer, got '" + s + "'");
    }
    return v;
  }
};

template <>
struct Codec<double> {
  static constexpr const char* type = "float";
  static json encode(double v) { return v; }
  static double decode(const json& j) {
    if (!j.is_number()) throw ConfigError("expected a number, got " + j.dump());
    return j.get<double>();
  }
  static double parse(const std::string& s) {
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(s, &used);
    } catch (const std::exception&) {
      throw ConfigError("expected a number, got '" + s + "'");
    }
    if (used != s.size()) throw ConfigError("expected a number, got '" + s + "'");
    return v;
  }
};

template <>
struct Codec<bool> {
  static constexpr const char* type = "bool";
  static json encode(bool v) { return v; }
  static bool decode(const json& j) {
    if (!j.is_boolean()) throw ConfigError("expected true or false, got " + j.dump());
    return j.get<bool>();
  }
  static bool parse(const std::string& s) {
    if (s == "true" || s == "1" || s == "on") return true;
    if (s == "false" || s == "0" || s == "off") return false;
    throw ConfigError("expected true or false, got '" + s + "'");
  }
};

template <>
struct Codec<std::optional<double>> {
  static constexpr const char* type = "float|null";
  static json encode(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }
  static std::optional<double> decode(const json& j) {
    if (j.is_null()) return std::nullopt;
    return Codec<double>::decode(j);
  }
  static std::optional<double> parse(const std::string& s) {
    if (s.empty() || s == "none" || s == "null") return std::nullopt;
    return Codec<double>::parse(s);
  }
};

template <>
struct Codec<std::vector<int>> {
  static constexpr const char* type = "int-list";
  static json encode(const std::vector<int>& v) { return v; }
  static std::vector<int> decode(const json& j) {
    if (!j.is_array()) throw ConfigError("expected a list of integers, got " + j.dump());
    std::vector<int> out;
    for (const auto& e : j) out.push_back(Codec<int>::decode(e));
    return out;
  }
  static std::vector<int> parse(const std::string& s) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(Codec<int>::parse(item));
    return out;
  }
};

template <typename T, typename V, typename Access>
Field<T> field(std::string key, std::string help, Access access) {
  Field<T> f;
  f.key = std::move(key);
  f.type = Codec<V>::type;
  f.help = std::move(help);
  f.get = [access](const T& c) { return Codec<V>::encode(access(const_cast<T&>(c))); };
  f.set = [access](T& c, const json& j) { access(c) = Codec<V>::decode(j); };
  f.set_text = [access](T& c, const std::string& s) { access(c) = Codec<V>::parse(s); };
  return f;
}

// Enumerations travel as strings.
template <typename T, typename E, typename Access, typename ToString, typename Parse>
Field<T> enum_field(std::string key, std::string help, Access access, ToString to_str, Parse parse) {
  Field<T> f;
  f.key = std::move(key);
  f.type = "string";
  f.help = std::move(help);
  f.get = [access, to_str](const T& c) { return json(std::string(to_str(access(const_cast<T&>(c))))); };
  f.set = [access, parse](T& c, const json& j) {
    if (!j.is_string()) throw ConfigError("expected a string, got " + j.dump());
    access(c) = parse(j.get<std::string>());
  };
  f.set_text = [access, parse](T& c, const std::string& s) { access(c) = parse(s); };
  return f;
}

#define DISCOVR_ACCESS(expr) [](auto& c) -> auto& { return c.expr; }

Schema<trainer::TrainConfig> build_train_schema() {
  using T = trainer::TrainConfig;
  Schema<T> s;
  s.push_back(field<T, std::uint64_t>("seed", "random seed for initialization, masks and sampling", DISCOVR_ACCESS(seed)));
  s.push_back(enum_field<T, backbone::Variant>(
      "variant", "encoder size: test|small|base", DISCOVR_ACCESS(variant),
      [](backbone::Variant v) { return backbone::to_string(v); }, backbone::parse_variant));
  s.push_back(field<T, int>("frames_per_clip", "frames per video clip (even)", DISCOVR_ACCESS(frames_per_clip)));
  s.push_back(field<T, int>("clip_stride", "temporal stride between clip frames", DISCOVR_ACCESS(clip_stride)));
  s.push_back(field<T, int>("image_size", "square frame size in pixels (multiple of 16)", DISCOVR_ACCESS(image_size)));
  s.push_back(field<T, int>("channels", "input channels", DISCOVR_ACCESS(channels)));
  s.push_back(field<T, std::optional<double>>("input_mean", "intensity subtracted before patch projection (null estimates it from the pretraining videos)", DISCOVR_ACCESS(input_mean)));
  s.push_back(field<T, std::optional<double>>("input_std", "intensity scale applied before patch projection (null estimates it from the pretraining videos)", DISCOVR_ACCESS(input_std)));
  s.push_back(field<T, double>("mask_ratio", "fraction of video tubes masked per view", DISCOVR_ACCESS(mask_ratio)));
  s.push_back(field<T, std::optional<double>>("image_mask_ratio", "fraction of frame patches masked (null follows mask_ratio)",
                                              DISCOVR_ACCESS(image_mask_ratio)));
  s.push_back(field<T, int>("epochs", "training epochs", DISCOVR_ACCESS(epochs)));
  s.push_back(field<T, double>("base_lr", "peak learning rate", DISCOVR_ACCESS(base_lr)));
  s.push_back(field<T, double>("weight_decay", "decoupled weight decay", DISCOVR_ACCESS(weight_decay)));
  s.push_back(field<T, int>("warmup_epochs", "linear warmup epochs", DISCOVR_ACCESS(warmup_epochs)));
  s.push_back(field<T, int>("batch_size", "clips per step", DISCOVR_ACCESS(batch_size)));
  s.push_back(field<T, double>("grad_clip", "global gradient norm clip", DISCOVR_ACCESS(grad_clip)));
  s.push_back(field<T, double>("ema_momentum", "teacher EMA momentum", DISCOVR_ACCESS(distill.ema_momentum)));
  s.push_back(field<T, double>("student_temp", "student softmax temperature", DISCOVR_ACCESS(distill.student_temp)));
  s.push_back(field<T, double>("teacher_temp_start", "initial teacher temperature", DISCOVR_ACCESS(distill.teacher_temp_start)));
  s.push_back(field<T, double>("teacher_temp_end", "final teacher temperature", DISCOVR_ACCESS(distill.teacher_temp_end)));
  s.push_back(field<T, int>("teacher_temp_warmup_epochs", "epochs of linear teacher temperature warmup",
                            DISCOVR_ACCESS(distill.teacher_temp_warmup_epochs)));
  s.push_back(field<T, int>("video_views", "masked student views per clip", DISCOVR_ACCESS(distill.video_views)));
  s.push_back(field<T, int>("image_views", "masked student views per frame", DISCOVR_ACCESS(distill.image_views)));
  s.push_back(field<T, double>("center_momentum", "teacher center momentum", DISCOVR_ACCESS(distill.center_momentum)));
  s.push_back(field<T, bool>("centering", "subtract the running teacher center", DISCOVR_ACCESS(distill.centering)));
  s.push_back(field<T, int>("num_prototypes", "cluster prototypes", DISCOVR_ACCESS(scd.num_prototypes)));
  s.push_back(field<T, double>("scd_temp", "prototype score temperature", DISCOVR_ACCESS(scd.temperature)));
  s.push_back(field<T, double>("sinkhorn_epsilon", "entropic regularization", DISCOVR_ACCESS(scd.epsilon)));
  s.push_back(field<T, int>("sinkhorn_iters", "balancing iterations", DISCOVR_ACCESS(scd.iterations)));
  s.push_back(enum_field<T, scd::SinkhornInput>(
      "sinkhorn_input", "scores given to the balancer: scaled|raw", DISCOVR_ACCESS(scd.sinkhorn_input),
      [](scd::SinkhornInput v) { return scd::to_string(v); }, scd::parse_sinkhorn_input));
  s.push_back(enum_field<T, scd::Pool>(
      "scd_pool", "frame features per tube target: mean|first_frame", DISCOVR_ACCESS(scd.pool),
      [](scd::Pool v) { return scd::to_string(v); }, scd::parse_pool));
  s.push_back(field<T, bool>("normalize_prototypes", "renormalize prototypes after each step",
                             DISCOVR_ACCESS(scd.normalize_prototypes)));
  s.push_back(enum_field<T, backbone::HeadKind>(
      "head", "projection head: mlp|linear", DISCOVR_ACCESS(head),
      [](backbone::HeadKind v) { return backbone::to_string(v); }, backbone::parse_head_kind));
  s.push_back(field<T, int>("head_hidden", "projection head hidden width", DISCOVR_ACCESS(head_hidden)));
  s.push_back(field<T, int>("head_bottleneck", "projection head bottleneck width", DISCOVR_ACCESS(head_bottleneck)));
  s.push_back(field<T, int>("head_out_dim", "projection head output dimension", DISCOVR_ACCESS(head_out_dim)));
  s.push_back(field<T, int>("decoder_depth", "video decoder blocks", DISCOVR_ACCESS(decoder_depth)));
  s.push_back(field<T, int>("image_frames_per_clip", "frames per clip used by the image branch",
                            DISCOVR_ACCESS(image_frames_per_clip)));
  s.push_back(field<T, int>("clips_per_video", "random clips per pretraining video per epoch", DISCOVR_ACCESS(clips_per_video)));
  s.push_back(field<T, bool>("loss_vid", "enable video self-distillation", DISCOVR_ACCESS(loss_vid)));
  s.push_back(field<T, bool>("loss_img", "enable image self-distillation", DISCOVR_ACCESS(loss_img)));
  s.push_back(field<T, bool>("loss_scd", "enable semantic cluster distillation", DISCOVR_ACCESS(loss_scd)));
  s.push_back(field<T, double>("w_vid", "video loss weight", DISCOVR_ACCESS(w_vid)));
  s.push_back(field<T, double>("w_img", "image loss weight", DISCOVR_ACCESS(w_img)));
  s.push_back(field<T, double>("w_scd", "cluster loss weight", DISCOVR_ACCESS(w_scd)));
  s.push_back(field<T, int>("checkpoint_every", "epochs between checkpoints (0: final only)", DISCOVR_ACCESS(checkpoint_every)));
  s.push_back(field<T, int>("log_every", "steps between metric lines", DISCOVR_ACCESS(log_every)));
  return s;
}

Schema<eval::EvalConfig> build_eval_schema() {
  using T = eval::EvalConfig;
  Schema<T> s;
  s.push_back(enum_field<T, eval::Protocol>(
      "protocol", "knn|probe|segment|regress-ef", DISCOVR_ACCESS(protocol),
      [](eval::Protocol v) { return eval::to_string(v); }, eval::parse_protocol));
  s.push_back(enum_field<T, eval::EmbeddingSource>(
      "embedding_source", "encoder providing features: teacher|student", DISCOVR_ACCESS(embedding_source),
      [](eval::EmbeddingSource v) { return eval::to_string(v); }, eval::parse_embedding_source));
  s.push_back(enum_field<T, eval::F1Mode>(
      "f1_mode", "reported F1: macro|binary", DISCOVR_ACCESS(f1_mode),
      [](eval::F1Mode v) { return eval::to_string(v); }, eval::parse_f1_mode));
  s.push_back(field<T, std::uint64_t>("eval_seed", "seed for trained heads", DISCOVR_ACCESS(seed)));
  s.push_back(field<T, double>("knn_temp", "kNN vote temperature", DISCOVR_ACCESS(knn_temp)));
  s.push_back(field<T, std::vector<int>>("knn_k_grid", "candidate k values", DISCOVR_ACCESS(knn_k_grid)));
  s.push_back(field<T, int>("knn_k", "fixed k (0 selects on the validation split)", DISCOVR_ACCESS(knn_k)));
  s.push_back(field<T, int>("probe_epochs", "linear probe epochs", DISCOVR_ACCESS(probe_epochs)));
  s.push_back(field<T, double>("probe_lr", "linear probe learning rate", DISCOVR_ACCESS(probe_lr)));
  s.push_back(field<T, int>("probe_batch_size", "linear probe batch size", DISCOVR_ACCESS(probe_batch_size)));
  s.push_back(field<T, int>("seg_dim", "segmentation head channels", DISCOVR_ACCESS(seg_dim)));
  s.push_back(field<T, int>("seg_epochs", "segmentation head epochs", DISCOVR_ACCESS(seg_epochs)));
  s.push_back(field<T, double>("seg_lr", "segmentation head learning rate", DISCOVR_ACCESS(seg_lr)));
  s.push_back(field<T, int>("seg_frames_per_video", "annotated frames used per video", DISCOVR_ACCESS(seg_frames_per_video)));
  s.push_back(enum_field<T, eval::EfMode>(
      "ef_mode", "EF regression: probe|finetune", DISCOVR_ACCESS(ef_mode),
      [](eval::EfMode v) { return eval::to_string(v); }, eval::parse_ef_mode));
  s.push_back(field<T, int>("ef_finetune_blocks", "trailing encoder blocks tuned in finetune mode",
                            DISCOVR_ACCESS(ef_finetune_blocks)));
  s.push_back(field<T, int>("ef_epochs", "finetune epochs", DISCOVR_ACCESS(ef_epochs)));
  s.push_back(field<T, double>("ef_lr", "finetune learning rate", DISCOVR_ACCESS(ef_lr)));
  s.push_back(field<T, double>("ef_ridge", "ridge penalty of the probe regressor", DISCOVR_ACCESS(ef_ridge)));
  return s;
}

Schema<data::SyntheticConfig> build_synth_schema() {
  using T = data::SyntheticConfig;
  Schema<T> s;
  s.push_back(field<T, int>("n_per_class", "videos per class in each split", DISCOVR_ACCESS(n_per_class)));
  s.push_back(field<T, int>("n_train_per_class", "train-split videos per class (0 uses n_per_class)",
                            DISCOVR_ACCESS(n_train_per_class)));
  s.push_back(field<T, int>("frames", "frames per video", DISCOVR_ACCESS(frames)));
  s.push_back(field<T, int>("height", "frame height", DISCOVR_ACCESS(height)));
  s.push_back(field<T, int>("width", "frame width", DISCOVR_ACCESS(width)));
  s.push_back(field<T, int>("channels", "stored channels", DISCOVR_ACCESS(channels)));
  s.push_back(field<T, double>("normal_amplitude_min", "", DISCOVR_ACCESS(normal_amplitude_min)));
  s.push_back(field<T, double>("normal_amplitude_max", "", DISCOVR_ACCESS(normal_amplitude_max)));
  s.push_back(field<T, double>("abnormal_amplitude_min", "", DISCOVR_ACCESS(abnormal_amplitude_min)));
  s.push_back(field<T, double>("abnormal_amplitude_max", "", DISCOVR_ACCESS(abnormal_amplitude_max)));
  s.push_back(field<T, double>("period_min", "shortest beat period in frames", DISCOVR_ACCESS(period_min)));
  s.push_back(field<T, double>("period_max", "longest beat period in frames", DISCOVR_ACCESS(period_max)));
  s.push_back(field<T, double>("wall_thickness", "wall thickness relative to the chamber axis", DISCOVR_ACCESS(wall_thickness)));
  s.push_back(field<T, double>("wall_delta", "extra wall thickness of the abnormal class", DISCOVR_ACCESS(wall_delta)));
  s.push_back(field<T, double>("speckle", "static speckle strength", DISCOVR_ACCESS(speckle)));
  s.push_back(field<T, double>("frame_noise", "per-frame noise level", DISCOVR_ACCESS(frame_noise)));
  s.push_back(field<T, double>("nuisance", "spread of per-video size, aspect, position, tilt and gain (0..1)",
                               DISCOVR_ACCESS(nuisance)));
  s.push_back(field<T, std::uint64_t>("seed", "generator seed", DISCOVR_ACCESS(seed)));
  return s;
}

#undef DISCOVR_ACCESS

template <typename T>
const Field<T>& find(const Schema<T>& schema, std::string_view key) {
  for (const auto& f : schema) {
    if (f.key == key) return f;
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

}  // namespace

const Schema<trainer::TrainConfig>& train_schema() {
  static const auto schema = build_train_schema();
  return schema;
}

const Schema<eval::EvalConfig>& eval_schema() {
  static const auto schema = build_eval_schema();
  return schema;
}

const Schema<data::SyntheticConfig>& synth_schema() {
  static const auto schema = build_synth_schema();
  return schema;
}

std::string flag_name(std::string_view key) {
  std::string out(key);
  for (char& c : out) {
    if (c == '_') c = '-';
  }
  return out;
}

template <typename T>
void apply_json(T& cfg, const json& j, const Schema<T>& schema) {
  if (!j.is_object()) throw ConfigError("config must be a flat JSON object");
  for (const auto& [key, value] : j.items()) {
    const auto& f = find(schema, key);
    try {
      f.set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError("config key '" + key + "': " + e.what());
    }
  }
}

template <typename T>
void apply_text(T& cfg, std::string_view key, const std::string& value, const Schema<T>& schema) {
  const auto& f = find(schema, key);
  try {
    f.set_text(cfg, value);
  } catch (const ConfigError& e) {
    throw ConfigError("--" + flag_name(key) + ": " + e.what());
  }
}

template void apply_json(trainer::TrainConfig&, const json&, const Schema<trainer::TrainConfig>&);
template void apply_json(eval::EvalConfig&, const json&, const Schema<eval::EvalConfig>&);
template void apply_json(data::SyntheticConfig&, const json&, const Schema<data::SyntheticConfig>&);
template void apply_text(trainer::TrainConfig&, std::string_view, const std::string&, const Schema<trainer::TrainConfig>&);
template void apply_text(eval::EvalConfig&, std::string_view, const std::string&, const Schema<eval::EvalConfig>&);
template void apply_text(data::SyntheticConfig&, std::string_view, const std::string&,
                         const Schema<data::SyntheticConfig>&);

json train_to_json(const trainer::TrainConfig& cfg) { return to_json(cfg, train_schema()); }

trainer::TrainConfig train_from_json(const json& j) {
  trainer::TrainConfig cfg;
  apply_json(cfg, j, train_schema());
  return cfg;
}

json eval_to_json(const eval::EvalConfig& cfg) { return to_json(cfg, eval_schema()); }

eval::EvalConfig eval_from_json(const json& j) {
  eval::EvalConfig cfg;
  apply_json(cfg, j, eval_schema());
  return cfg;
}

json synth_to_json(const data::SyntheticConfig& cfg) { return to_json(cfg, synth_schema()); }

json load_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError("invalid JSON in " + path.string() + ": " + e.what());
  }
}

void write_json_file(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out << j.dump(2) << '\n';
  if (!out) throw IoError("failed writing " + path.string());
}

}  // namespace discovr::config
