// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "doctest.h"
#include "helpers.hpp"

#include "backbone.hpp"

#include <numeric>

using namespace discovr;
using namespace discovr::backbone;
using testing::random_matrix;

namespace {

EncoderParams tiny_encoder(std::uint64_t seed, TokenKind kind = TokenKind::video_tube) {
  const auto grid = kind == TokenKind::video_tube ? tokenizer::video_grid(4, 32, 32) : tokenizer::image_grid(32, 32);
  Rng rng(seed);
  return init_encoder(EncoderConfig::make(Variant::test, kind, grid, 1), rng);
}

std::vector<ad::Index> iota_positions(int n) {
  std::vector<ad::Index> p(static_cast<std::size_t>(n));
  std::iota(p.begin(), p.end(), 0);
  return p;
}

bool bitwise_equal(const ParamList& a, const ParamList& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].name != b[i].name || a[i].tensor.value() != b[i].tensor.value()) return false;
  }
  return true;
}

}  // namespace

TEST_SUITE("backbone") {
  TEST_CASE("variant shapes") {
    const auto grid = tokenizer::video_grid(64, 112, 112);
    const auto base = EncoderConfig::make(Variant::base, TokenKind::video_tube, grid, 3);
    CHECK(base.depth == 12);
    CHECK(base.width == 768);
    CHECK(base.heads == 12);
    const auto small = EncoderConfig::make(Variant::small, TokenKind::video_tube, grid, 3);
    CHECK(small.depth == 12);
    CHECK(small.width == 384);
    CHECK(small.heads == 6);
    const auto test = EncoderConfig::make(Variant::test, TokenKind::video_tube, grid, 3);
    CHECK(test.depth == 2);
    CHECK(test.width == 64);
    CHECK(test.heads == 4);
    CHECK(test.token_dim == 1536);
    auto bad = test;
    bad.heads = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("base video encoder has about 86M parameters") {
    const auto cfg = EncoderConfig::make(Variant::base, TokenKind::video_tube, tokenizer::video_grid(64, 112, 112), 3);
    const double n = static_cast<double>(count_parameters(cfg));
    CHECK(std::abs(n - 86e6) / 86e6 < 0.05);
  }

  TEST_CASE("analytic parameter count matches the allocated tensors") {
    const auto enc = tiny_encoder(1);
    CHECK(count_parameters(enc.config) == count_elements(enc.parameters()));
  }

  TEST_CASE("initialization is seeded, truncated normal and zero-biased") {
    const auto a = tiny_encoder(3);
    const auto b = tiny_encoder(3);
    CHECK(bitwise_equal(a.parameters(), b.parameters()));
    CHECK(bitwise_equal(a.parameters(), a.clone().parameters()));
    CHECK(a.blocks[0].qkv_b.value().isZero());
    CHECK(a.blocks[1].fc2_b.value().isZero());
    const auto& w = a.blocks[0].fc1_w.value();
    const double mean = w.mean();
    const double sd = std::sqrt((w.array() - mean).square().mean());
    CHECK(std::abs(mean) < 0.002);
    CHECK(sd == doctest::Approx(0.02).epsilon(0.15));
    CHECK(w.cwiseAbs().maxCoeff() <= 0.04 + 1e-12);
  }

  TEST_CASE("encoder outputs are finite, deterministic and shaped") {
    const auto enc = tiny_encoder(4);
    Rng rng(5);
    const auto clip = testing::random_clip(4, 32, 32, 1, rng);
    const auto batch = tokenizer::tubify(clip);
    ad::NoGradGuard g;
    const auto out1 = encode(enc, batch.tokens[0], batch.position_indices());
    const auto out2 = encode(enc, batch.tokens[0], batch.position_indices());
    CHECK(out1.cls.rows() == 1);
    CHECK(out1.cls.cols() == 64);
    CHECK(out1.tokens.rows() == 8);
    CHECK(out1.tokens.value().allFinite());
    CHECK(out1.cls.value() == out2.cls.value());
    CHECK(out1.tokens.value() == out2.tokens.value());

    const auto mask = tokenizer::make_mask(8, 0.5, rng);
    const auto vis = encode(enc, batch.tokens[0], batch.position_indices(), &mask);
    CHECK(vis.tokens.rows() == 4);

    CHECK_THROWS_AS(encode(enc, ad::Matrix::Zero(8, 100), batch.position_indices()), ShapeError);
  }

  TEST_CASE("zero-initialized encoder stays finite") {
    auto enc = tiny_encoder(6);
    for (auto& p : enc.parameters()) {
      ad::Tensor t = p.tensor;
      t.mutable_value().setZero();
    }
    Rng rng(7);
    ad::NoGradGuard g;
    const auto out = encode(enc, random_matrix(8, 512, rng), iota_positions(8));
    CHECK(out.cls.value().allFinite());
    CHECK(out.tokens.value().allFinite());
  }

  TEST_CASE("property: permuting tokens with their positions permutes the outputs") {
    const auto enc = tiny_encoder(8);
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
      const ad::Matrix tokens = random_matrix(8, 512, rng, 0.5);
      const auto pos = iota_positions(8);
      std::vector<ad::Index> perm = pos;
      std::shuffle(perm.begin(), perm.end(), rng);
      ad::Matrix shuffled(8, 512);
      for (int i = 0; i < 8; ++i) shuffled.row(i) = tokens.row(perm[i]);
      ad::NoGradGuard g;
      const auto a = encode(enc, tokens, pos);
      const auto b = encode(enc, shuffled, perm);
      // Attention sums run in a different order, so agreement is to rounding.
      CHECK((a.cls.value() - b.cls.value()).cwiseAbs().maxCoeff() < 1e-10);
      for (int i = 0; i < 8; ++i) {
        CHECK((a.tokens.value().row(perm[i]) - b.tokens.value().row(i)).cwiseAbs().maxCoeff() < 1e-10);
      }
    }
  }

  TEST_CASE("encoder gradients match finite differences") {
    const auto enc = tiny_encoder(10);
    Rng rng(11);
    const ad::Matrix tokens = random_matrix(8, 512, rng, 0.5);
    const ad::Matrix r = random_matrix(9, 64, rng);
    auto loss = [&] {
      const auto out = encode(enc, tokens, iota_positions(8));
      std::vector<ad::Tensor> parts{out.cls, out.tokens};
      return ad::sum_all(ad::mul(ad::concat_rows(parts), ad::constant(r)));
    };
    std::vector<ad::Tensor> params;
    for (const auto& p : enc.parameters()) params.push_back(p.tensor);
    const auto res = testing::check_gradients(loss, params, 40, rng);
    CHECK(res.checked == 40);
    CHECK(res.worst < 1e-3);
  }

  TEST_CASE("decoder emits one row per masked position") {
    DecoderConfig dc{2, 64, 4, 4, tokenizer::video_grid(64, 112, 112)};
    Rng rng(12);
    const auto dec = init_decoder(dc, rng);
    const auto mask = tokenizer::make_mask(1568, 0.9, rng);
    EncoderOutput latents{ad::constant(random_matrix(157, 64, rng)), ad::constant(random_matrix(1, 64, rng))};
    ad::NoGradGuard g;
    const auto out = decode_masked(dec, latents, mask);
    CHECK(out.rows() == 1411);
    CHECK(out.cols() == 64);

    DecoderConfig small{1, 64, 4, 4, tokenizer::video_grid(4, 32, 32)};
    const auto dec2 = init_decoder(small, rng);
    const auto none = tokenizer::make_mask(8, 0.0, rng);
    EncoderOutput all{ad::constant(random_matrix(8, 64, rng)), ad::constant(random_matrix(1, 64, rng))};
    CHECK(decode_masked(dec2, all, none).rows() == 0);
    CHECK_THROWS_AS(decode_masked(dec2, latents, none), ShapeError);
  }

  TEST_CASE("decoder weights receive gradient") {
    DecoderConfig dc{2, 64, 4, 4, tokenizer::video_grid(4, 32, 32)};
    Rng rng(13);
    const auto dec = init_decoder(dc, rng);
    const auto mask = tokenizer::make_mask(8, 0.5, rng);
    EncoderOutput latents{ad::constant(random_matrix(4, 64, rng)), ad::constant(random_matrix(1, 64, rng))};
    ad::backward(ad::sum_all(ad::mul(decode_masked(dec, latents, mask), ad::constant(random_matrix(4, 64, rng)))));
    for (const auto& p : dec.parameters()) {
      CAPTURE(p.name);
      CHECK(testing::grad_norm(p.tensor) > 0.0);
    }
  }

  TEST_CASE("projection heads") {
    Rng rng(14);
    for (HeadKind kind : {HeadKind::mlp, HeadKind::linear}) {
      auto head = init_head({kind, 64, 32, 16, 20}, rng);
      for (ad::Index k = 0; k < head.last.rows(); ++k) CHECK(head.last.value().row(k).norm() == doctest::Approx(1.0));
      ad::NoGradGuard g;
      CHECK(project(head, ad::constant(ad::Matrix::Zero(1, 64))).value().isZero());
      for (int trial = 0; trial < 20; ++trial) {
        const auto f = ad::constant(random_matrix(3, 64, rng));
        const ad::Matrix logits = project(head, f).value();
        CHECK(logits == project(head, f).value());
        const ad::Matrix z = head_bottleneck(head, f).value();
        for (ad::Index i = 0; i < 3; ++i) CHECK(logits.row(i).cwiseAbs().maxCoeff() <= z.row(i).norm() + 1e-12);
      }
      head.last.mutable_value() *= 3.0;
      head.normalize_last();
      for (ad::Index k = 0; k < head.last.rows(); ++k) CHECK(head.last.value().row(k).norm() == doctest::Approx(1.0));
    }
    CHECK_THROWS_AS(HeadConfig({HeadKind::mlp, 64, 32, 16, 1}).validate(), ConfigError);
  }

  TEST_CASE("variant and head names round trip") {
    for (Variant v : {Variant::test, Variant::small, Variant::base}) CHECK(parse_variant(to_string(v)) == v);
    for (HeadKind k : {HeadKind::mlp, HeadKind::linear}) CHECK(parse_head_kind(to_string(k)) == k);
    CHECK_THROWS_AS(parse_variant("huge"), ConfigError);
  }
}
