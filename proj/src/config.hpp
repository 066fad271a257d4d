// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Flat key/value schemas for every configurable struct. Config files are flat
// JSON objects over these keys and CLI flags are their kebab-case spellings.

#pragma once

#include "data.hpp"
#include "eval.hpp"
#include "trainer.hpp"

#include "json.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <string_view>
#include <vector>

namespace discovr::config {

using nlohmann::json;

template <typename T>
struct Field {
  std::string key;
  std::string type;  // "int", "float", "bool", "string", "int-list", "float?" ...
  std::string help;
  std::function<json(const T&)> get;
  std::function<void(T&, const json&)> set;
  std::function<void(T&, const std::string&)> set_text;
};

template <typename T>
using Schema = std::vector<Field<T>>;

const Schema<trainer::TrainConfig>& train_schema();
const Schema<eval::EvalConfig>& eval_schema();
const Schema<data::SyntheticConfig>& synth_schema();

// snake_case key to its flag spelling, e.g. "mask_ratio" -> "mask-ratio".
std::string flag_name(std::string_view key);

template <typename T>
json to_json(const T& cfg, const Schema<T>& schema) {
  json out = json::object();
  for (const auto& f : schema) out[f.key] = f.get(cfg);
  return out;
}

// Unknown keys and wrongly typed values raise ConfigError.
template <typename T>
void apply_json(T& cfg, const json& j, const Schema<T>& schema);

template <typename T>
void apply_text(T& cfg, std::string_view key, const std::string& value, const Schema<T>& schema);

json train_to_json(const trainer::TrainConfig& cfg);
trainer::TrainConfig train_from_json(const json& j);
json eval_to_json(const eval::EvalConfig& cfg);
eval::EvalConfig eval_from_json(const json& j);
json synth_to_json(const data::SyntheticConfig& cfg);

json load_json_file(const std::filesystem::path& path);
void write_json_file(const std::filesystem::path& path, const json& j);

}  // namespace discovr::config
