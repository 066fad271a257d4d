// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "helpers.hpp"

#include "tokenizer.hpp"

#include <set>
#include <tuple>

using namespace discovr;
using namespace discovr::tokenizer;

TEST_SUITE("tokenizer") {
  TEST_CASE("tube counts follow the grid arithmetic") {
    CHECK(video_grid(64, 112, 112).size() == 1568);
    CHECK(tube_dim(3) == 1536);
    Rng rng(1);
    CHECK(tubify(testing::random_clip(2, 16, 16, 1, rng)).length() == 1);
    const auto b = tubify(testing::random_clip(4, 32, 32, 1, rng));
    REQUIRE(b.length() == 8);
    int i = 0;
    for (int t = 0; t < 2; ++t) {
      for (int h = 0; h < 2; ++h) {
        for (int w = 0; w < 2; ++w) CHECK(b.positions[i++] == GridPos{t, h, w});
      }
    }
  }

  TEST_CASE("geometry errors") {
    Rng rng(2);
    CHECK_THROWS_AS(tubify(testing::random_clip(3, 16, 16, 1, rng)), GeometryError);
    CHECK_THROWS_AS(tubify(testing::random_clip(2, 24, 16, 1, rng)), GeometryError);
    CHECK_THROWS_AS(build_tube_frame_map(5, 32, 32), GeometryError);
  }

  TEST_CASE("tubify then untubify reproduces the clip bit for bit") {
    Rng rng(3);
    for (int trial = 0; trial < 5; ++trial) {
      std::uniform_int_distribution<int> d(1, 3);
      const auto clip = testing::random_clip(2 * d(rng), 16 * d(rng), 16 * d(rng), d(rng), rng);
      const auto back = untubify(tubify(clip), clip.channels);
      CHECK(back.frames == clip.frames);
      CHECK(back.height == clip.height);
      CHECK(back.width == clip.width);
      CHECK(back.data == clip.data);
    }
  }

  TEST_CASE("patchify_frame examples") {
    Image big{112, 112, 1, std::vector<float>(112 * 112, 0.5f)};
    CHECK(patchify_frame(big).length() == 49);

    Rng rng(4);
    const auto clip = testing::random_clip(2, 16, 16, 1, rng);
    const Image small = frame_of(clip, 1);
    const auto one = patchify_frame(small);
    REQUIRE(one.length() == 1);
    for (int k = 0; k < 256; ++k) CHECK(one.tokens[0](0, k) == static_cast<double>(small.data[k]));

    Image quad{32, 32, 1, std::vector<float>(32 * 32)};
    for (int y = 0; y < 32; ++y) {
      for (int x = 0; x < 32; ++x) quad.data[y * 32 + x] = static_cast<float>(1 + (y / 16) * 2 + x / 16);
    }
    const auto q = patchify_frame(quad);
    REQUIRE(q.length() == 4);
    for (int p = 0; p < 4; ++p) {
      CHECK(q.tokens[0].row(p).minCoeff() == p + 1);
      CHECK(q.tokens[0].row(p).maxCoeff() == p + 1);
    }
  }

  TEST_CASE("mask counts round half up") {
    // Hand table of floor(ratio * L + 0.5).
    const std::vector<std::tuple<int, double, int>> table = {
        {49, 0.5, 25},   {49, 0.75, 37},   {49, 0.9, 44},    {343, 0.5, 172},  {343, 0.75, 257},
        {343, 0.9, 309}, {1568, 0.5, 784}, {1568, 0.75, 1176}, {1568, 0.9, 1411}};
    Rng rng(5);
    for (const auto& [length, ratio, expected] : table) {
      CAPTURE(length);
      CAPTURE(ratio);
      CHECK(masked_count(length, ratio) == expected);
      const auto m = make_mask(length, ratio, rng);
      CHECK(m.num_masked() == expected);
      CHECK(m.num_visible() == length - expected);
    }
    CHECK(make_mask(10, 0.0, rng).num_masked() == 0);
  }

  TEST_CASE("property: masked and visible partition the positions") {
    Rng rng(6);
    for (int trial = 0; trial < 200; ++trial) {
      const int length = std::uniform_int_distribution<int>(2, 400)(rng);
      const double ratio = std::uniform_real_distribution<double>(0.0, 0.95)(rng);
      const int count = static_cast<int>(std::floor(ratio * length + 0.5));
      if (count >= length || (ratio > 0 && count == 0)) {
        CHECK_THROWS_AS(make_mask(length, ratio, rng), ConfigError);
        continue;
      }
      const auto m = make_mask(length, ratio, rng);
      const auto vis = m.visible_indices();
      const auto msk = m.masked_indices();
      CHECK(static_cast<int>(msk.size()) == count);
      std::set<ad::Index> all(vis.begin(), vis.end());
      all.insert(msk.begin(), msk.end());
      CHECK(static_cast<int>(all.size()) == length);
      CHECK(std::is_sorted(vis.begin(), vis.end()));
      CHECK(std::is_sorted(msk.begin(), msk.end()));
    }
  }

  TEST_CASE("mask preconditions") {
    Rng rng(7);
    CHECK_THROWS_AS(make_mask(10, 1.0, rng), ConfigError);
    CHECK_THROWS_AS(make_mask(10, -0.1, rng), ConfigError);
    CHECK_THROWS_AS(make_mask(8, 0.99, rng), ConfigError);
    CHECK_THROWS_AS(make_mask(1, 0.5, rng), ConfigError);
  }

  TEST_CASE("fixed seed gives identical masks") {
    const auto a = make_mask_from_seed(10, 0.5, 42);
    const auto b = make_mask_from_seed(10, 0.5, 42);
    CHECK(a.masked == b.masked);
    Rng r1(9), r2(9);
    CHECK(make_mask(30, 0.7, r1).masked == make_mask(30, 0.7, r2).masked);
  }

  TEST_CASE("mask positions are uniform") {
    constexpr int kDraws = 10000;
    constexpr int kLength = 20;
    Rng rng(8);
    std::vector<int> hits(kLength, 0);
    for (int d = 0; d < kDraws; ++d) {
      const auto m = make_mask(kLength, 0.5, rng);
      for (int i = 0; i < kLength; ++i) hits[i] += m.masked[i] ? 1 : 0;
    }
    const double sigma = std::sqrt(kDraws * 0.25);
    for (int i = 0; i < kLength; ++i) CHECK(std::abs(hits[i] - kDraws * 0.5) < 3.0 * sigma);
  }

  TEST_CASE("tube to frame map") {
    const auto m2 = build_tube_frame_map(2, 32, 32);
    for (int p = 0; p < 4; ++p) {
      CHECK(m2.at(p).first_frame == 0);
      CHECK(m2.at(p).second_frame == 1);
      CHECK(m2.at(p).patch == p);
    }
    const auto m64 = build_tube_frame_map(64, 112, 112);
    const int idx = m64.video.index({31, 3, 5});
    CHECK(m64.at(idx).first_frame == 62);
    CHECK(m64.at(idx).second_frame == 63);
    CHECK(m64.at(idx).patch == m64.image.index({0, 3, 5}));

    // Exhaustive: every (frame, patch) pair appears exactly once.
    for (auto [t, s] : {std::pair{4, 32}, std::pair{6, 48}, std::pair{2, 16}}) {
      const auto map = build_tube_frame_map(t, s, s);
      std::set<std::pair<int, int>> seen;
      for (const auto& tube : map.tubes) {
        CHECK(tube.second_frame == tube.first_frame + 1);
        seen.insert({tube.first_frame, tube.patch});
        seen.insert({tube.second_frame, tube.patch});
      }
      CHECK(static_cast<int>(seen.size()) == 2 * map.video.size());
      CHECK(static_cast<int>(seen.size()) == t * map.image.size());
    }
  }
}
