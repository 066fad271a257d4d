// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "helpers.hpp"

#include "eval.hpp"

#include <numeric>

using namespace discovr;
using namespace discovr::eval;
using testing::random_matrix;

namespace {

EmbeddingSet make_set(const ad::Matrix& v, std::vector<int> labels, std::vector<std::string> ids = {}) {
  EmbeddingSet s;
  s.vectors = v;
  s.labels = std::move(labels);
  if (ids.empty()) {
    for (std::size_t i = 0; i < s.labels.size(); ++i) ids.push_back("v" + std::to_string(i));
  }
  s.video_ids = std::move(ids);
  s.ef.assign(s.labels.size(), std::nan(""));
  s.split = "train";
  return s;
}

ad::Matrix rows2(std::initializer_list<std::pair<double, double>> pts) {
  ad::Matrix m(static_cast<ad::Index>(pts.size()), 2);
  ad::Index i = 0;
  for (const auto& [x, y] : pts) {
    m(i, 0) = x;
    m(i, 1) = y;
    ++i;
  }
  return m;
}

// Brute force: cosine to every point, stable sort, exp weights.
KnnVote knn_oracle(const EmbeddingSet& train, const ad::Matrix& q, int k, double tau) {
  std::vector<std::pair<double, int>> sims;
  for (ad::Index i = 0; i < train.vectors.rows(); ++i) {
    const double c = train.vectors.row(i).dot(q.row(0)) / (train.vectors.row(i).norm() * q.row(0).norm());
    sims.emplace_back(c, static_cast<int>(i));
  }
  std::stable_sort(sims.begin(), sims.end(), [](auto& a, auto& b) { return a.first > b.first; });
  double w[2] = {0, 0};
  for (int j = 0; j < k; ++j) w[train.labels[static_cast<std::size_t>(sims[static_cast<std::size_t>(j)].second)]] += std::exp(sims[static_cast<std::size_t>(j)].first / tau);
  return {w[1] > w[0] ? 1 : 0, w[1] / (w[0] + w[1])};
}

double auc_oracle(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] == 1 && y[j] == 0) {
        num += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        den += 1.0;
      }
    }
  }
  return 100.0 * num / den;
}

std::vector<int> random_labels(std::size_t n, Rng& rng) {
  std::vector<int> y(n);
  for (auto& v : y) v = std::bernoulli_distribution(0.4)(rng);
  y[0] = 0;
  y[1] = 1;
  return y;
}

backbone::EncoderParams encoder_of_depth(int depth, std::uint64_t seed) {
  auto cfg = backbone::EncoderConfig::make(backbone::Variant::test, backbone::TokenKind::video_tube,
                                           tokenizer::video_grid(4, 32, 32), 1);
  cfg.depth = depth;
  Rng rng(seed);
  return backbone::init_encoder(cfg, rng);
}

}  // namespace

TEST_SUITE("eval") {
  TEST_CASE("embeddings are deterministic class features") {
    const auto enc = encoder_of_depth(2, 1);
    Rng rng(2);
    const auto clip = testing::random_clip(4, 32, 32, 1, rng);
    const ad::Matrix a = extract_embedding(enc, clip);
    CHECK(a.rows() == 1);
    CHECK(a.cols() == 64);
    CHECK(a == extract_embedding(enc, clip));
    CHECK(l2_normalized(a).norm() == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(extract_embedding(enc, testing::random_clip(4, 48, 48, 1, rng)), GeometryError);
    CHECK_THROWS_AS(l2_normalized(ad::Matrix::Zero(1, 4)), NumericError);
  }

  TEST_CASE("knn examples") {
    const auto one = make_set(rows2({{1, 0}}), {1});
    const auto v = knn_classify(one, rows2({{0, 1}}), 1, 0.07);
    CHECK(v.label == 1);
    CHECK(v.abnormal_score == 1.0);

    const auto four = make_set(rows2({{1, 0}, {0.8, 0.6}, {0, 1}, {-1, 0}}), {0, 1, 1, 0});
    CHECK(knn_classify(four, rows2({{0, 1}}), 1, 0.07).label == 1);
    CHECK(knn_classify(four, rows2({{-1, 0}}), 1, 0.07).label == 0);

    // Query (1, 0.2): cosines 0.9806, 0.9021, 0.1961 for the three nearest.
    const double c0 = 1.0 / std::sqrt(1.04), c1 = (0.8 + 0.12) / std::sqrt(1.04), c2 = 0.2 / std::sqrt(1.04);
    const double w0 = std::exp(c0 / 0.07), w1 = std::exp(c1 / 0.07), w2 = std::exp(c2 / 0.07);
    const auto three = knn_classify(four, rows2({{1, 0.2}}), 3, 0.07);
    CHECK(three.label == 0);
    CHECK(three.abnormal_score == doctest::Approx((w1 + w2) / (w0 + w1 + w2)).epsilon(1e-12));

    CHECK_THROWS_AS(knn_classify(make_set(ad::Matrix(0, 2), {}), rows2({{1, 0}}), 1, 0.07), DataError);
    CHECK_THROWS_AS(knn_classify(four, rows2({{1, 0}}), 5, 0.07), ConfigError);
  }

  TEST_CASE("property: knn agrees with a brute-force oracle") {
    Rng rng(3);
    for (int trial = 0; trial < 30; ++trial) {
      const int n = std::uniform_int_distribution<int>(2, 40)(rng);
      const auto train = make_set(random_matrix(n, 6, rng), random_labels(static_cast<std::size_t>(n), rng));
      const ad::Matrix q = random_matrix(1, 6, rng);
      const int k = std::uniform_int_distribution<int>(1, n)(rng);
      const auto got = knn_classify(train, q, k, 0.07);
      const auto want = knn_oracle(train, q, k, 0.07);
      CHECK(got.label == want.label);
      CHECK(std::abs(got.abnormal_score - want.abnormal_score) < 1e-9);
    }
  }

  TEST_CASE("property: uniform knn over the whole bank votes the majority") {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
      const int n = 2 * std::uniform_int_distribution<int>(2, 15)(rng) + 1;
      const auto labels = random_labels(static_cast<std::size_t>(n), rng);
      const int ones = std::accumulate(labels.begin(), labels.end(), 0);
      const auto train = make_set(random_matrix(n, 5, rng), labels);
      for (const auto& v : knn_classify_all(train, random_matrix(5, 5, rng), n, 0.07, KnnWeighting::uniform)) {
        CHECK(v.label == (2 * ones > n ? 1 : 0));
      }
    }
  }

  TEST_CASE("select k") {
    const auto train = make_set(rows2({{1, 0}, {1, 0.1}, {-1, 0}, {-1, 0.1}}), {0, 0, 1, 1});
    const auto val = make_set(rows2({{1, 0.05}, {-1, 0.05}}), {0, 1});
    CHECK(select_k(train, val, {3}, 0.07) == 3);
    CHECK(select_k(train, val, {1, 3, 5, 10}, 0.07) == 1);

    // A mislabeled point sits exactly where the validation queries land, so
    // k=1 copies its wrong label while k=5 outvotes it.
    const auto noisy = make_set(rows2({{1, 0}, {1, 0.3}, {1, -0.3}, {1, 0.4}, {1, -0.4}, {1, 0.05},
                                       {-1, 0}, {-1, 0.3}, {-1, -0.3}, {-1, 0.4}, {-1, -0.4}}),
                                {0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1});
    const auto probe = make_set(rows2({{1, 0.05}, {-1, 0.05}}), {0, 1});
    CHECK(select_k(noisy, probe, {1, 5}, 0.07) == 5);
    CHECK_THROWS_AS(select_k(noisy, make_set(ad::Matrix(0, 2), {}), {1}, 0.07), DataError);
  }

  TEST_CASE("any-clip aggregation") {
    CHECK(aggregate_video({0, 0, 0}, {0.1, 0.2, 0.3}).first == 0);
    CHECK(aggregate_video({0, 0, 1, 0, 0}, {0.1, 0.1, 0.6, 0.1, 0.1}).first == 1);
    CHECK(aggregate_video({0, 0, 0}, {0.2, 0.9, 0.4}).second == 0.9);
    CHECK_THROWS_AS(aggregate_video({}, {}), DataError);

    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
      const int n = std::uniform_int_distribution<int>(1, 6)(rng);
      std::vector<int> preds(static_cast<std::size_t>(n));
      std::vector<double> scores(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        preds[static_cast<std::size_t>(i)] = std::bernoulli_distribution(0.3)(rng);
        scores[static_cast<std::size_t>(i)] = std::uniform_real_distribution<double>(0, 1)(rng);
      }
      const auto before = aggregate_video(preds, scores);
      preds.push_back(1);
      scores.push_back(std::uniform_real_distribution<double>(0, 1)(rng));
      const auto after = aggregate_video(preds, scores);
      CHECK(after.first == 1);
      CHECK(after.second >= before.second);
    }

    const auto set = make_set(random_matrix(4, 2, rng), {1, 1, 0, 1}, {"a", "a", "b", "a"});
    const auto vp = aggregate_by_video(set, {0, 1, 0, 0}, {0.1, 0.8, 0.3, 0.2});
    CHECK(vp.video_ids == std::vector<std::string>{"a", "b"});
    CHECK(vp.preds == std::vector<int>{1, 0});
    CHECK(vp.scores == std::vector<double>{0.8, 0.3});
  }

  TEST_CASE("metric examples") {
    const std::vector<int> y{1, 0, 1, 0};
    const auto perfect = compute_metrics(y, {0.9, 0.1, 0.8, 0.2}, y);
    for (double m : {perfect.accuracy, perfect.balanced_accuracy, perfect.precision, perfect.recall, perfect.f1,
                     perfect.auc}) {
      CHECK(m == 100.0);
    }

    // TP=3, FP=1, FN=1, TN=5.
    std::vector<int> preds, labels;
    auto add = [&](int p, int l, int n) {
      for (int i = 0; i < n; ++i) preds.push_back(p), labels.push_back(l);
    };
    add(1, 1, 3);
    add(1, 0, 1);
    add(0, 1, 1);
    add(0, 0, 5);
    const std::vector<double> scores(preds.begin(), preds.end());
    const auto r = compute_metrics(preds, scores, labels);
    CHECK(r.tp == 3);
    CHECK(r.fp == 1);
    CHECK(r.fn == 1);
    CHECK(r.tn == 5);
    CHECK(r.precision == doctest::Approx(75.0));
    CHECK(r.recall == doctest::Approx(75.0));
    CHECK(r.f1_binary == doctest::Approx(75.0));
    CHECK(std::round(r.balanced_accuracy * 100.0) / 100.0 == 79.17);
    CHECK(std::round(r.f1_macro * 100.0) / 100.0 == 79.17);
    CHECK(compute_metrics(preds, scores, labels, F1Mode::binary).f1 == doctest::Approx(75.0));

    CHECK_THROWS_AS(auc({0.1, 0.2}, {1, 1}), DataError);
    CHECK_THROWS_AS(compute_metrics({1}, {0.5, 0.2}, {1}), ShapeError);
  }

  TEST_CASE("property: auc equals the pairwise oracle and flips under reversal") {
    Rng rng(6);
    for (int trial = 0; trial < 40; ++trial) {
      const auto n = static_cast<std::size_t>(std::uniform_int_distribution<int>(2, 200)(rng));
      const auto y = random_labels(n, rng);
      std::vector<double> s(n);
      // Coarse scores force ties.
      for (auto& v : s) v = std::uniform_int_distribution<int>(0, 20)(rng) / 20.0;
      const double a = auc(s, y);
      CHECK(a == auc_oracle(s, y));
      std::vector<double> rev(n);
      for (std::size_t i = 0; i < n; ++i) rev[i] = -s[i];
      CHECK(auc(rev, y) == doctest::Approx(100.0 - a).epsilon(1e-12));
    }
  }

  TEST_CASE("property: metric reports are self-consistent") {
    Rng rng(7);
    for (int trial = 0; trial < 60; ++trial) {
      const auto n = static_cast<std::size_t>(std::uniform_int_distribution<int>(4, 80)(rng));
      const auto y = random_labels(n, rng);
      std::vector<int> p(n);
      std::vector<double> s(n);
      for (std::size_t i = 0; i < n; ++i) {
        p[i] = std::bernoulli_distribution(0.5)(rng);
        s[i] = std::uniform_real_distribution<double>(0, 1)(rng);
      }
      const auto r = compute_metrics(p, s, y);
      for (double m : {r.accuracy, r.balanced_accuracy, r.precision, r.recall, r.f1, r.auc}) {
        CHECK(m >= 0.0);
        CHECK(m <= 100.0);
      }
      const double tpr = r.tp + r.fn > 0 ? static_cast<double>(r.tp) / static_cast<double>(r.tp + r.fn) : 0.0;
      const double tnr = r.tn + r.fp > 0 ? static_cast<double>(r.tn) / static_cast<double>(r.tn + r.fp) : 0.0;
      CHECK(std::abs(r.balanced_accuracy - 50.0 * (tpr + tnr)) < 1e-9);
      auto f1 = [](double tp, double fp, double fn) {
        const double prec = tp + fp > 0 ? tp / (tp + fp) : 0.0, rec = tp + fn > 0 ? tp / (tp + fn) : 0.0;
        return prec + rec > 0 ? 2 * prec * rec / (prec + rec) : 0.0;
      };
      const double f_abn = f1(static_cast<double>(r.tp), static_cast<double>(r.fp), static_cast<double>(r.fn));
      const double f_nrm = f1(static_cast<double>(r.tn), static_cast<double>(r.fn), static_cast<double>(r.fp));
      CHECK(std::abs(r.f1_macro - 50.0 * (f_abn + f_nrm)) < 1e-9);
      CHECK(std::abs(r.f1_binary - 100.0 * f_abn) < 1e-9);
      CHECK(r.f1 == r.f1_macro);
    }
  }

  TEST_CASE("linear probe") {
    Rng rng(8);
    ad::Matrix x(40, 2);
    std::vector<int> y(40);
    for (int i = 0; i < 40; ++i) {
      y[static_cast<std::size_t>(i)] = i % 2;
      x(i, 0) = (i % 2 ? 1.0 : -1.0) + 0.3 * std::normal_distribution<double>()(rng);
      x(i, 1) = std::normal_distribution<double>()(rng);
    }
    const auto clf = linear_probe(x, y, 30, 5e-2, 8, 1);
    const ad::Matrix p = clf.probabilities(x);
    int right = 0;
    for (int i = 0; i < 40; ++i) right += (p(i, 1) > p(i, 0)) == (y[static_cast<std::size_t>(i)] == 1);
    CHECK(right == 40);
    for (int i = 0; i < 40; ++i) CHECK(p.row(i).sum() == doctest::Approx(1.0));
    CHECK_THROWS_AS(linear_probe(x, std::vector<int>(40, 1), 30, 5e-2, 8, 1), DataError);
  }

  TEST_CASE("dice examples") {
    std::vector<std::uint8_t> a(200, 0), b(200, 0);
    for (int i = 0; i < 100; ++i) a[static_cast<std::size_t>(i)] = 1;
    CHECK(dice(a, a) == 1.0);
    for (int i = 100; i < 200; ++i) b[static_cast<std::size_t>(i)] = 1;
    CHECK(dice(a, b) == 0.0);
    std::vector<std::uint8_t> c(200, 0);
    for (int i = 50; i < 150; ++i) c[static_cast<std::size_t>(i)] = 1;
    CHECK(dice(a, c) == 0.5);
    CHECK(dice(std::vector<std::uint8_t>(9, 0), std::vector<std::uint8_t>(9, 0)) == 1.0);
    CHECK_THROWS_AS(dice(a, std::vector<std::uint8_t>(3, 0)), ShapeError);
  }

  TEST_CASE("segmentation head geometry") {
    Rng rng(9);
    auto head = init_seg_head(64, 16, 7, 7, 2, rng);
    const ad::Matrix tokens = random_matrix(49, 64, rng);
    ad::NoGradGuard g;
    const auto logits = seg_head_forward(head, tokens);
    CHECK(logits.rows() == 112 * 112);
    CHECK(logits.cols() == 2);
    CHECK(argmax_mask(logits.value()).size() == 112u * 112u);
    for (auto& p : head.parameters()) {
      ad::Tensor t = p.tensor;
      t.mutable_value().setZero();
    }
    CHECK(seg_head_forward(head, tokens).value().isZero());
    CHECK_THROWS_AS(seg_head_forward(head, random_matrix(16, 64, rng)), GeometryError);

    const auto enc = encoder_of_depth(2, 10);
    const auto clip = testing::random_clip(4, 32, 32, 1, rng);
    const ad::Matrix ct = clip_token_features(enc, clip);
    CHECK(ct.rows() == 8);
    CHECK(frame_token_features(ct, 3, 2, 2) == ct.bottomRows(4));
    CHECK_THROWS_AS(frame_token_features(ct, 4, 2, 2), GeometryError);
  }

  TEST_CASE("ridge regression fits a constant target through the bias") {
    Rng rng(11);
    const ad::Matrix x = random_matrix(20, 5, rng);
    const auto reg = fit_ridge(x, std::vector<double>(20, 55.0), 1e-3);
    const auto err = regression_errors(reg.predict(x), std::vector<double>(20, 55.0));
    CHECK(err.mae < 1e-6);
    CHECK(err.rmse < 1e-6);
    CHECK(regression_errors({1.0, 5.0}, {2.0, 2.0}).mae == 2.0);
    CHECK(regression_errors({1.0, 5.0}, {2.0, 2.0}).rmse == doctest::Approx(std::sqrt(5.0)));
    CHECK_THROWS_AS(fit_ridge(ad::Matrix(0, 5), {}, 1e-3), DataError);
  }

  TEST_CASE("fine-tuning changes only the last blocks and the head") {
    const auto enc = encoder_of_depth(4, 12);
    Rng rng(13);
    std::vector<tokenizer::VideoClip> clips;
    std::vector<double> targets;
    for (int i = 0; i < 4; ++i) {
      clips.push_back(testing::random_clip(4, 32, 32, 1, rng));
      targets.push_back(40.0 + 10.0 * i);
    }
    const auto before = enc.parameters();
    const auto r = finetune_regressor(enc, clips, targets, 3, 2, 1e-3, 1);
    const auto after = r.encoder.parameters();
    REQUIRE(before.size() == after.size());
    for (std::size_t i = 0; i < before.size(); ++i) {
      CAPTURE(before[i].name);
      const bool tuned = before[i].name.rfind("blocks.1.", 0) == 0 || before[i].name.rfind("blocks.2.", 0) == 0 ||
                         before[i].name.rfind("blocks.3.", 0) == 0;
      const bool changed = before[i].tensor.value() != after[i].tensor.value();
      if (tuned) {
        CHECK(changed);
      } else {
        CHECK_FALSE(changed);
      }
    }
    // The source encoder is never modified.
    CHECK(enc.parameters()[0].tensor.value() == encoder_of_depth(4, 12).parameters()[0].tensor.value());
    CHECK(std::isfinite(r.predict(clips[0])));
  }

  TEST_CASE("embedding cache round trip") {
    const auto dir = testing::scratch_dir("emb");
    Rng rng(14);
    auto set = make_set(random_matrix(3, 4, rng), {0, 1, 0}, {"a", "b", "c"});
    set.ef = {50.0, 30.0, std::nan("")};
    set.split = "test";
    write_embeddings(dir / "e.bin", set);
    const auto back = read_embeddings(dir / "e.bin");
    CHECK(back.vectors == set.vectors);
    CHECK(back.labels == set.labels);
    CHECK(back.video_ids == set.video_ids);
    CHECK(back.split == "test");
    CHECK(back.ef[1] == 30.0);
    CHECK(std::isnan(back.ef[2]));
    CHECK_THROWS_AS(read_embeddings(dir / "missing.bin"), IoError);
    std::filesystem::remove_all(dir);
  }
}
