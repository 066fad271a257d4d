// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Drives the installed command line tool end to end on a tiny synthetic
// dataset.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "json.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Result {
  int code = -1;
  std::string out;
};

// Runs the CLI with `args`, capturing stdout (or stderr when `want_stderr`).
Result run(const std::string& args, bool want_stderr = false) {
  const std::string redirect = want_stderr ? " 2>&1 1>/dev/null" : " 2>/dev/null";
  const std::string cmd = std::string(DISCOVR_CLI_PATH) + " " + args + redirect;
  Result r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) return r;
  std::array<char, 4096> buf{};
  size_t n = 0;
  while ((n = fread(buf.data(), 1, buf.size(), p)) > 0) r.out.append(buf.data(), n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

fs::path root() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("discovr_cli_" + std::to_string(getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

const std::string kTiny =
    "--variant test --frames-per-clip 4 --clip-stride 2 --image-size 32 --channels 1 --mask-ratio 0.5 "
    "--epochs 1 --warmup-epochs 1 --batch-size 2 --head-hidden 16 --head-bottleneck 8 --head-out-dim 12 "
    "--num-prototypes 6 --video-views 2 --image-views 2 --image-frames-per-clip 2 "
    "--teacher-temp-warmup-epochs 1 --quiet";

fs::path dataset() {
  static const fs::path dir = [] {
    const fs::path d = root() / "data";
    const auto r = run("synth-data --out " + d.string() + " --geometry 16x32x32 --n-per-class 2 --seed 3");
    REQUIRE(r.code == 0);
    return d;
  }();
  return dir;
}

fs::path checkpoint() {
  static const fs::path ckpt = [] {
    const fs::path out = root() / "run";
    const auto r = run("pretrain --data " + dataset().string() + " --out " + out.string() + " " + kTiny);
    REQUIRE(r.code == 0);
    return out / "checkpoints" / "final.ckpt";
  }();
  return ckpt;
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("usage and help") {
    CHECK(run("--help").code == 0);
    CHECK(run("pretrain --help").code == 0);
    CHECK(run("").code == 2);
    CHECK(run("frobnicate").code == 2);
    CHECK(run("synth-data").code == 2);  // --out is required
    CHECK(run("synth-data --out " + (root() / "x").string() + " --bogus 1").code == 2);
    CHECK(run("--version").out.size() > 0);
  }

  TEST_CASE("synth-data writes split manifests reproducibly") {
    const auto r = run("synth-data --out " + (root() / "s1").string() + " --geometry 8x32x32 --n-per-class 1 --seed 5");
    REQUIRE(r.code == 0);
    CHECK(r.out.find("manifest.csv") != std::string::npos);
    for (const char* m : {"manifest.csv", "manifest_train.csv", "manifest_val.csv", "manifest_test.csv"}) CHECK(fs::exists(root() / "s1" / m));
    REQUIRE(run("synth-data --out " + (root() / "s2").string() + " --geometry 8x32x32 --n-per-class 1 --seed 5").code == 0);
    for (const auto& e : fs::directory_iterator(root() / "s1" / "videos")) {
      CHECK(slurp(e.path()) == slurp(root() / "s2" / "videos" / e.path().filename()));
    }
    CHECK(run("synth-data --out " + (root() / "s3").string() + " --n-per-class 0").code == 2);
    CHECK(run("synth-data --out " + (root() / "s4").string() + " --geometry 8by32").code == 2);
  }

  TEST_CASE("pretrain writes a complete run directory") {
    const fs::path ckpt = checkpoint();
    const fs::path dir = ckpt.parent_path().parent_path();
    CHECK(fs::exists(ckpt));
    const json cfg = json::parse(slurp(dir / "config.json"));
    CHECK(cfg["input_mean"].is_number());
    CHECK(cfg["input_std"].is_number());
    CHECK(cfg["epochs"] == 1);
    const json manifest = json::parse(slurp(dir / "run_manifest.json"));
    CHECK(manifest.contains("code_version"));
    CHECK(manifest.contains("seed"));
    CHECK(manifest["config"] == cfg);

    std::istringstream lines(slurp(dir / "metrics.jsonl"));
    std::string line;
    int count = 0;
    while (std::getline(lines, line)) {
      const json j = json::parse(line);
      for (const char* k : {"step", "epoch", "loss_total", "loss_vid", "loss_img", "loss_scd", "lr", "grad_norm", "tau_t"}) {
        CHECK(j.contains(k));
      }
      ++count;
    }
    CHECK(count > 0);
  }

  TEST_CASE("pretrain refuses bad settings and occupied run directories") {
    const std::string data = dataset().string();
    const auto masked = run("pretrain --data " + data + " --out " + (root() / "m").string() + " " + kTiny +
                                " --mask-ratio 0.99",
                             true);
    CHECK(masked.code == 2);
    CHECK(masked.out.find("mask") != std::string::npos);
    checkpoint();
    CHECK(run("pretrain --data " + data + " --out " + (root() / "run").string() + " " + kTiny).code == 2);
    CHECK(run("pretrain --data " + (root() / "missing.csv").string() + " --out " + (root() / "z").string() + " " + kTiny)
              .code == 1);
    CHECK(run("pretrain --data " + data + " --out " + (root() / "d").string() + " " + kTiny + " --dry-run").code == 0);
    CHECK(fs::exists(root() / "d" / "run_manifest.json"));
    CHECK_FALSE(fs::exists(root() / "d" / "checkpoints" / "final.ckpt"));
  }

  TEST_CASE("identical seeds reproduce identical checkpoints") {
    const std::string data = dataset().string();
    REQUIRE(run("pretrain --data " + data + " --out " + (root() / "r1").string() + " " + kTiny).code == 0);
    REQUIRE(run("pretrain --data " + data + " --out " + (root() / "r2").string() + " " + kTiny).code == 0);
    CHECK(slurp(root() / "r1" / "checkpoints" / "final.ckpt") == slurp(root() / "r2" / "checkpoints" / "final.ckpt"));
    CHECK(slurp(root() / "r1" / "metrics.jsonl") == slurp(root() / "r2" / "metrics.jsonl"));
  }

  TEST_CASE("knn report follows the documented schema") {
    const fs::path report = root() / "knn.json";
    const auto r = run("eval --checkpoint " + checkpoint().string() + " --data " + dataset().string() +
                       " --protocol knn --report " + report.string());
    REQUIRE(r.code == 0);
    const json j = json::parse(slurp(report));
    CHECK(j == json::parse(r.out));
    for (const char* k : {"protocol", "label", "embedding_source", "eval_config", "train_config", "metrics", "k",
                          "checkpoint", "step", "data"}) {
      CHECK(j.contains(k));
    }
    for (const char* k : {"accuracy", "balanced_accuracy", "precision", "recall", "f1", "f1_macro", "f1_binary", "auc",
                          "confusion", "n_videos", "n_clips"}) {
      CHECK(j["metrics"].contains(k));
    }
    for (const auto& [k, v] : j["metrics"].items()) {
      if (v.is_number_float()) {
        CHECK(v.get<double>() >= 0.0);
        CHECK(v.get<double>() <= 100.0);
      }
    }
    const std::string csv = slurp(root() / "knn.csv");
    CHECK(csv.rfind("label,protocol,balanced_accuracy", 0) == 0);
  }

  TEST_CASE("probing leaves the checkpoint untouched") {
    const std::string before = slurp(checkpoint());
    CHECK(run("eval --checkpoint " + checkpoint().string() + " --data " + dataset().string() +
              " --protocol probe --probe-epochs 2")
              .code == 0);
    CHECK(slurp(checkpoint()) == before);
  }

  TEST_CASE("segmentation and ef regression protocols run") {
    const auto seg = run("eval --checkpoint " + checkpoint().string() + " --data " + dataset().string() +
                         " --protocol segment --seg-epochs 1 --seg-frames-per-video 1");
    REQUIRE(seg.code == 0);
    const double d = json::parse(seg.out)["metrics"]["dice"].get<double>();
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    const auto ef = run("eval --checkpoint " + checkpoint().string() + " --data " + dataset().string() +
                        " --protocol regress-ef");
    REQUIRE(ef.code == 0);
    CHECK(json::parse(ef.out)["metrics"].contains("mae"));
    CHECK(run("eval --checkpoint " + checkpoint().string() + " --data " + dataset().string() +
              " --protocol regress-ef --ef-mode finetune --ef-epochs 1")
              .code == 0);
  }

  TEST_CASE("protocol and data mismatches are usage errors") {
    // Strip the EF column from the test split.
    std::istringstream in(slurp(dataset() / "manifest.csv"));
    std::ofstream out(dataset() / "no_ef.csv");
    std::string line;
    std::getline(in, line);
    out << line << '\n';
    while (std::getline(in, line)) {
      std::vector<std::string> f;
      std::stringstream ss(line);
      std::string cell;
      while (std::getline(ss, cell, ',')) f.push_back(cell);
      f.resize(6);
      out << f[0] << ',' << f[1] << ',' << f[2] << ",," << f[4] << ',' << f[5] << '\n';
    }
    out.close();
    CHECK(run("eval --checkpoint " + checkpoint().string() + " --data " + (dataset() / "no_ef.csv").string() +
              " --protocol regress-ef")
              .code == 2);
    CHECK(run("eval --checkpoint " + checkpoint().string() + " --data " + dataset().string() + " --protocol dance")
              .code == 2);
    CHECK(run("eval --checkpoint " + (root() / "nope.ckpt").string() + " --data " + dataset().string()).code == 1);
  }

  TEST_CASE("cleanup") { fs::remove_all(root()); }
}
