// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// discovr <synth-data|pretrain|eval> [flags]
//
// Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

#include "discovr/discovr.h"

#include "CLI11.hpp"

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

struct ConfigDeleter {
  void operator()(discovr_config* c) const { discovr_config_destroy(c); }
};
using ConfigPtr = std::unique_ptr<discovr_config, ConfigDeleter>;

struct OwnedString {
  char* ptr = nullptr;
  ~OwnedString() { discovr_free(ptr); }
};

int exit_code(discovr_status s) {
  if (s == DISCOVR_OK) return 0;
  return (s == DISCOVR_ERR_CONFIG || s == DISCOVR_ERR_INVALID_ARGUMENT) ? kExitUsage : kExitRuntime;
}

int report_failure(const char* what, discovr_status s) {
  std::cerr << "discovr " << what << ": " << discovr_status_string(s) << ": " << discovr_last_error() << '\n';
  return exit_code(s);
}

std::string kebab(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return key;
}

// One CLI flag per schema key; values are applied after the config file so
// flags override it.
struct SchemaFlags {
  discovr_config_kind kind;
  std::vector<std::pair<std::string, std::optional<std::string>>> values;

  void attach(CLI::App* app, const std::vector<std::string>& skip = {}) {
    const size_t n = discovr_config_key_count(kind);
    values.resize(n);
    for (size_t i = 0; i < n; ++i) {
      const std::string key = discovr_config_key_name(kind, i);
      values[i].first = key;
      if (std::find(skip.begin(), skip.end(), key) != skip.end()) continue;
      std::string help = discovr_config_key_help(kind, i);
      help += help.empty() ? "" : " ";
      help += "(" + std::string(discovr_config_key_type(kind, i)) + ")";
      app->add_option("--" + kebab(key), values[i].second, help);
    }
  }

  discovr_status apply(discovr_config* cfg) const {
    for (const auto& [key, value] : values) {
      if (!value) continue;
      const auto s = discovr_config_set(cfg, key.c_str(), value->c_str());
      if (s != DISCOVR_OK) return s;
    }
    return DISCOVR_OK;
  }
};

discovr_status make_config(discovr_config_kind kind, const std::string& file, const SchemaFlags& flags,
                           ConfigPtr& out) {
  discovr_config* raw = nullptr;
  auto s = discovr_config_create(kind, &raw);
  if (s != DISCOVR_OK) return s;
  out.reset(raw);
  if (!file.empty() && (s = discovr_config_load_file(raw, file.c_str())) != DISCOVR_OK) return s;
  return flags.apply(raw);
}

std::string resolve_manifest(const std::string& data) {
  const std::filesystem::path p(data);
  if (std::filesystem::is_directory(p)) return (p / "manifest.csv").string();
  return data;
}

void print_step(const char* step_json, void*) { std::cerr << step_json << '\n'; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"DISCOVR: self-supervised echocardiography video representation learning"};
  app.require_subcommand(1);
  app.set_version_flag("--version", discovr_version());

  // synth-data
  auto* synth = app.add_subcommand("synth-data", "write a synthetic echo-like dataset with manifests");
  std::string synth_out, synth_config, geometry;
  SchemaFlags synth_flags{DISCOVR_CONFIG_SYNTH, {}};
  synth->add_option("--out", synth_out, "output directory")->required();
  synth->add_option("--config", synth_config, "flat JSON file of generator settings");
  synth->add_option("--geometry", geometry, "frames x height x width, e.g. 96x64x64");
  synth_flags.attach(synth);

  // pretrain
  auto* pre = app.add_subcommand("pretrain", "pretrain the video model on the normal train split");
  std::string pre_config, pre_data, pre_out, pre_resume;
  bool force = false, dry_run = false, quiet = false;
  SchemaFlags train_flags{DISCOVR_CONFIG_TRAIN, {}};
  pre->add_option("--config", pre_config, "flat JSON training config");
  pre->add_option("--data", pre_data, "manifest CSV or dataset directory")->required();
  pre->add_option("--out", pre_out, "run directory")->required();
  pre->add_option("--resume", pre_resume, "checkpoint to resume from");
  pre->add_flag("--force", force, "reuse a non-empty run directory");
  pre->add_flag("--dry-run", dry_run, "validate and write the run manifest without training");
  pre->add_flag("--quiet", quiet, "do not echo step metrics to stderr");
  train_flags.attach(pre);

  // eval
  auto* ev = app.add_subcommand("eval", "run a downstream protocol on a checkpoint");
  std::string ev_config, ev_checkpoint, ev_data, ev_report;
  SchemaFlags eval_flags{DISCOVR_CONFIG_EVAL, {}};
  ev->add_option("--config", ev_config, "flat JSON eval config");
  ev->add_option("--checkpoint", ev_checkpoint, "checkpoint file")->required();
  ev->add_option("--data", ev_data, "manifest CSV or dataset directory")->required();
  ev->add_option("--report", ev_report, "report JSON path (a CSV row is written alongside)");
  eval_flags.attach(ev);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  ConfigPtr cfg;
  if (*synth) {
    auto s = make_config(DISCOVR_CONFIG_SYNTH, synth_config, synth_flags, cfg);
    if (s == DISCOVR_OK && !geometry.empty()) {
      int t = 0, h = 0, w = 0;
      char x1 = 0, x2 = 0;
      if (std::sscanf(geometry.c_str(), "%d%c%d%c%d", &t, &x1, &h, &x2, &w) != 5 || x1 != 'x' || x2 != 'x') {
        std::cerr << "discovr synth-data: --geometry must look like 96x64x64\n";
        return kExitUsage;
      }
      for (auto [key, value] : {std::pair{"frames", t}, std::pair{"height", h}, std::pair{"width", w}}) {
        if ((s = discovr_config_set(cfg.get(), key, std::to_string(value).c_str())) != DISCOVR_OK) break;
      }
    }
    if (s == DISCOVR_OK) s = discovr_config_validate(cfg.get());
    if (s != DISCOVR_OK) return report_failure("synth-data", s);
    OwnedString manifest;
    s = discovr_synth_generate(cfg.get(), synth_out.c_str(), &manifest.ptr);
    if (s != DISCOVR_OK) return report_failure("synth-data", s);
    std::cout << manifest.ptr << '\n';
    return 0;
  }

  if (*pre) {
    auto s = make_config(DISCOVR_CONFIG_TRAIN, pre_config, train_flags, cfg);
    if (s == DISCOVR_OK) s = discovr_config_validate(cfg.get());
    if (s != DISCOVR_OK) return report_failure("pretrain", s);
    unsigned flags = (force ? DISCOVR_PRETRAIN_FORCE : 0u) | (dry_run ? DISCOVR_PRETRAIN_DRY_RUN : 0u);
    OwnedString result;
    s = discovr_pretrain(cfg.get(), resolve_manifest(pre_data).c_str(), pre_out.c_str(), flags,
                         pre_resume.empty() ? nullptr : pre_resume.c_str(), quiet ? nullptr : print_step, nullptr,
                         &result.ptr);
    if (s != DISCOVR_OK) return report_failure("pretrain", s);
    std::cout << result.ptr << '\n';
    return 0;
  }

  auto s = make_config(DISCOVR_CONFIG_EVAL, ev_config, eval_flags, cfg);
  if (s == DISCOVR_OK) s = discovr_config_validate(cfg.get());
  if (s != DISCOVR_OK) return report_failure("eval", s);
  OwnedString report;
  s = discovr_evaluate(cfg.get(), ev_checkpoint.c_str(), resolve_manifest(ev_data).c_str(),
                       ev_report.empty() ? nullptr : ev_report.c_str(), &report.ptr);
  if (s != DISCOVR_OK) return report_failure("eval", s);
  std::cout << report.ptr << '\n';
  return 0;
}
