// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "helpers.hpp"

#include "scd.hpp"

using namespace discovr;
using namespace discovr::scd;
using testing::random_matrix;

namespace {

// Plain probability-domain alternating normalization, written independently
// of the library's log-domain solver.
ad::Matrix sinkhorn_oracle(const ad::Matrix& s, double eps, int iters) {
  const int r = static_cast<int>(s.rows()), k = static_cast<int>(s.cols());
  double mx = s(0, 0);
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < k; ++j) mx = std::max(mx, s(i, j));
  }
  std::vector<std::vector<double>> q(r, std::vector<double>(k));
  for (int i = 0; i < r; ++i) {
    for (int j = 0; j < k; ++j) q[i][j] = std::exp((s(i, j) - mx) / eps);
  }
  for (int it = 0; it < iters; ++it) {
    for (int j = 0; j < k; ++j) {
      double c = 0;
      for (int i = 0; i < r; ++i) c += q[i][j];
      for (int i = 0; i < r; ++i) q[i][j] /= c * k;
    }
    for (int i = 0; i < r; ++i) {
      double c = 0;
      for (int j = 0; j < k; ++j) c += q[i][j];
      for (int j = 0; j < k; ++j) q[i][j] /= c * r;
    }
  }
  ad::Matrix out(r, k);
  for (int i = 0; i < r; ++i) {
    double c = 0;
    for (int j = 0; j < k; ++j) c += q[i][j];
    for (int j = 0; j < k; ++j) out(i, j) = q[i][j] / c;
  }
  return out;
}

ad::Matrix unit_rows(ad::Matrix m) {
  for (ad::Index i = 0; i < m.rows(); ++i) m.row(i).normalize();
  return m;
}

// Cosine similarities between random unit vectors: the score range seen
// with normalized features and prototypes.
ad::Matrix cosine_scores(int rows, int cols, Rng& rng) {
  return unit_rows(random_matrix(rows, 128, rng)) * unit_rows(random_matrix(cols, 128, rng)).transpose();
}

double ce_oracle(const ad::Matrix& s, const ad::Matrix& q) {
  double total = 0;
  for (ad::Index i = 0; i < s.rows(); ++i) {
    double z = 0;
    for (ad::Index j = 0; j < s.cols(); ++j) z += std::exp(s(i, j));
    for (ad::Index j = 0; j < s.cols(); ++j) total -= q(i, j) * (s(i, j) - std::log(z));
  }
  return total / static_cast<double>(s.rows());
}

}  // namespace

TEST_SUITE("scd") {
  TEST_CASE("prototype score examples") {
    Rng rng(1);
    auto bank = init_prototypes(5, 16, rng);
    bank.normalize_rows();
    const ad::Matrix f = bank.weights.value().row(3);
    const auto s = prototype_scores(ad::constant(f), bank, 0.1);
    ad::Index best = 0;
    CHECK(s.scores.value().row(0).maxCoeff(&best) == doctest::Approx(10.0));
    CHECK(best == 3);
    const auto s2 = prototype_scores(ad::constant(f), bank, 0.2);
    CHECK(s2.scores.value().isApprox(s.scores.value() / 2.0));

    const ad::Matrix feats = random_matrix(3, 16, rng);
    const auto got = prototype_scores(ad::constant(feats), bank, 0.1).scores.value();
    for (int i = 0; i < 3; ++i) {
      double norm = 0;
      for (int d = 0; d < 16; ++d) norm += feats(i, d) * feats(i, d);
      norm = std::sqrt(norm);
      for (int k = 0; k < 5; ++k) {
        double dot = 0;
        for (int d = 0; d < 16; ++d) dot += feats(i, d) / norm * bank.weights.value()(k, d);
        CHECK(std::abs(got(i, k) - dot / 0.1) < 1e-6);
      }
    }
    CHECK_THROWS_AS(prototype_scores(ad::constant(random_matrix(2, 8, rng)), bank, 0.1), ShapeError);
  }

  TEST_CASE("sinkhorn examples") {
    const auto u = sinkhorn(ad::Matrix::Constant(5, 4, 0.3), 0.05, 10);
    CHECK(u.q.isApprox(ad::Matrix::Constant(5, 4, 0.25)));
    const auto one = sinkhorn(random_matrix(6, 1, *std::make_unique<Rng>(2)), 0.05, 10);
    CHECK(one.q.isApprox(ad::Matrix::Ones(6, 1)));
    Rng rng(3);
    const ad::Matrix s = random_matrix(6, 4, rng);
    CHECK((sinkhorn(s, 0.05, 10).q - sinkhorn_oracle(s, 0.05, 10)).cwiseAbs().maxCoeff() < 1e-6);
    CHECK_THROWS_AS(sinkhorn(s, 0.0, 10), ConfigError);
    CHECK_THROWS_AS(sinkhorn(s, 0.05, 0), ConfigError);
  }

  TEST_CASE("property: sinkhorn marginals on random cosine scores") {
    Rng rng(4);
    for (int rows : {8, 64}) {
      for (int cols : {4, 32}) {
        for (int trial = 0; trial < 5; ++trial) {
          const ad::Matrix s = cosine_scores(rows, cols, rng);
          const ad::Matrix q = sinkhorn(s, 0.05, 10).q;
          CHECK((q - sinkhorn_oracle(s, 0.05, 10)).cwiseAbs().maxCoeff() < 1e-6);
          CHECK((q.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-4);
          const double target = static_cast<double>(rows) / cols;
          CHECK(((q.colwise().sum().array() - target).abs() / target).maxCoeff() < 0.05);
        }
      }
    }
  }

  TEST_CASE("sinkhorn stays finite for extreme scores") {
    Rng rng(5);
    const auto q = sinkhorn(random_matrix(16, 8, rng, 1e4), 0.05, 10).q;
    CHECK(q.allFinite());
    CHECK((q.rowwise().sum().array() - 1.0).abs().maxCoeff() < 1e-9);
  }

  TEST_CASE("image target alignment") {
    const auto map = tokenizer::build_tube_frame_map(4, 32, 32);
    Rng rng(6);
    FrameFeatures frames(4);
    for (auto& f : frames) f = random_matrix(4, 3, rng);
    const auto mask = tokenizer::make_mask(8, 0.5, rng);
    const auto out = align_image_targets(frames, mask, map, Pool::mean);
    const auto first = align_image_targets(frames, mask, map, Pool::first_frame);
    const auto masked = mask.masked_indices();
    REQUIRE(out.rows() == 4);
    // Hand index arithmetic: tube index = (t*2 + h)*2 + w, frames 2t and 2t+1,
    // patch h*2 + w.
    for (std::size_t i = 0; i < masked.size(); ++i) {
      const int idx = static_cast<int>(masked[i]);
      const int t = idx / 4, patch = idx % 4;
      const ad::Matrix expect = 0.5 * (frames[2 * t]->row(patch) + frames[2 * t + 1]->row(patch));
      CHECK(out.row(static_cast<ad::Index>(i)).isApprox(expect));
      CHECK(first.row(static_cast<ad::Index>(i)) == frames[2 * t]->row(patch));
    }

    FrameFeatures same(4, ad::Matrix(ad::Matrix::Constant(4, 3, 0.7)));
    CHECK(align_image_targets(same, mask, map, Pool::mean).isApprox(ad::Matrix::Constant(4, 3, 0.7)));

    FrameFeatures holes = frames;
    holes[static_cast<std::size_t>(map.at(static_cast<int>(masked[0])).second_frame)].reset();
    CHECK_THROWS_AS(align_image_targets(holes, mask, map, Pool::mean), DataError);
  }

  TEST_CASE("scd loss examples") {
    const int k = 5;
    ad::Matrix q_i = ad::Matrix::Zero(1, k);
    q_i(0, 2) = 1.0;
    ad::Matrix s_i(1, k);
    s_i << 0.1, 0.4, -0.3, 2.0, 0.0;
    ad::Matrix q_v = ad::softmax_rows(s_i);
    const double second = ce_oracle(s_i, q_v);
    const double total = scd_loss(ad::constant(ad::Matrix::Zero(1, k)), ad::constant(s_i), AssignmentMatrix{q_v},
                                  AssignmentMatrix{q_i})
                             .item();
    CHECK(total - second == doctest::Approx(std::log(5.0)));

    Rng rng(7);
    const ad::Matrix s = random_matrix(4, k, rng);
    const AssignmentMatrix q{ad::softmax_rows(random_matrix(4, k, rng))};
    CHECK(scd_loss(ad::constant(s), ad::constant(s), q, q).item() == doctest::Approx(2.0 * ce_oracle(s, q.q)));

    const ad::Matrix sv = random_matrix(3, k, rng), si = random_matrix(3, k, rng);
    const ad::Matrix qv = ad::softmax_rows(random_matrix(3, k, rng)), qi = ad::softmax_rows(random_matrix(3, k, rng));
    const double got = scd_loss(ad::constant(sv), ad::constant(si), {qv}, {qi}).item();
    CHECK(std::abs(got - (ce_oracle(sv, qi) + ce_oracle(si, qv))) < 1e-6);
  }

  TEST_CASE("scd objective routes gradient to video tokens and prototypes only") {
    Rng rng(8);
    ScdConfig cfg;
    cfg.num_prototypes = 7;
    auto bank = init_prototypes(7, 12, rng);
    auto video = ad::parameter(random_matrix(6, 12, rng));
    auto image = ad::parameter(random_matrix(6, 12, rng));
    const auto r = scd_objective(video, image.value(), bank, cfg);
    ad::backward(r.loss);
    CHECK(video.grad().norm() > 0.0);
    CHECK(bank.weights.grad().norm() > 0.0);
    CHECK(testing::grad_norm(image) == 0.0);
  }

  TEST_CASE("scd gradient with respect to prototypes matches finite differences") {
    Rng rng(9);
    ScdConfig cfg;
    auto bank = init_prototypes(6, 10, rng);
    auto video = ad::parameter(random_matrix(8, 10, rng));
    const ad::Matrix image = random_matrix(8, 10, rng);
    TargetCache cache;
    scd_objective(video, image, bank, cfg, &cache);
    cache.frozen = true;
    auto loss = [&] {
      cache.rewind();
      return scd_objective(video, image, bank, cfg, &cache).loss;
    };
    const auto res = testing::check_gradients(loss, {bank.weights, video}, 30, rng);
    CHECK(res.worst < 1e-3);
  }

  TEST_CASE("property: positive rescaling of features keeps the best prototype") {
    Rng rng(10);
    auto bank = init_prototypes(9, 8, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const ad::Matrix f = random_matrix(5, 8, rng);
      const double c = std::exp(std::uniform_real_distribution<double>(-3, 3)(rng));
      const ad::Matrix a = prototype_scores(ad::constant(f), bank, 0.1).scores.value();
      const ad::Matrix b = prototype_scores(ad::constant(ad::Matrix(f * c)), bank, 0.1).scores.value();
      for (ad::Index i = 0; i < 5; ++i) {
        ad::Index ia = 0, ib = 0;
        a.row(i).maxCoeff(&ia);
        b.row(i).maxCoeff(&ib);
        CHECK(ia == ib);
      }
    }
  }

  TEST_CASE("prototype rows normalize and names parse") {
    Rng rng(11);
    auto bank = init_prototypes(4, 6, rng);
    bank.weights.mutable_value() *= 5.0;
    bank.normalize_rows();
    for (ad::Index k = 0; k < 4; ++k) CHECK(bank.weights.value().row(k).norm() == doctest::Approx(1.0));
    CHECK(parse_pool("first_frame") == Pool::first_frame);
    CHECK(parse_sinkhorn_input(to_string(SinkhornInput::raw)) == SinkhornInput::raw);
    CHECK_THROWS_AS(parse_pool("max"), ConfigError);
  }
}
