// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Pre-norm vision transformer encoders for tube and patch tokens, the
// shallow masked-token decoder, and the projection heads.

#pragma once

#include "autograd.hpp"
#include "tokenizer.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace discovr::backbone {

enum class Variant { test, small, base };
enum class TokenKind { video_tube, image_patch };
enum class HeadKind { mlp, linear };

std::string_view to_string(Variant v);
std::string_view to_string(HeadKind k);
Variant parse_variant(std::string_view s);
HeadKind parse_head_kind(std::string_view s);

struct EncoderConfig {
  Variant variant = Variant::base;
  TokenKind kind = TokenKind::video_tube;
  int depth = 12;
  int width = 768;
  int heads = 12;
  int mlp_ratio = 4;
  int token_dim = 0;
  tokenizer::TokenGrid grid;
  // Pixel intensities are standardized as (x - input_mean) / input_std
  // before the patch projection.
  double input_mean = 0.0;
  double input_std = 1.0;

  // Depth/width/heads fixed by the variant; grid and token size from the
  // input geometry.
  static EncoderConfig make(Variant variant, TokenKind kind, tokenizer::TokenGrid grid, int channels);
  void validate() const;
};

// A parameter with its checkpoint name; `decay` marks tensors that receive
// weight decay (matrices other than embeddings).
struct NamedTensor {
  std::string name;
  ad::Tensor tensor;
  bool decay = false;
};
using ParamList = std::vector<NamedTensor>;

std::int64_t count_elements(const ParamList& params);
void zero_grads(const ParamList& params);
// Deep copy preserving names and flags.
ParamList clone_values(const ParamList& params);

struct BlockParams {
  ad::Tensor ln1_g, ln1_b, qkv_w, qkv_b, proj_w, proj_b;
  ad::Tensor ln2_g, ln2_b, fc1_w, fc1_b, fc2_w, fc2_b;

  void collect(const std::string& prefix, ParamList& out) const;
};

struct EncoderParams {
  EncoderConfig config;
  ad::Tensor patch_w, patch_b, pos, cls;
  std::vector<BlockParams> blocks;
  ad::Tensor norm_g, norm_b;

  ParamList parameters() const;
  EncoderParams clone() const;
};

std::int64_t count_parameters(const EncoderConfig& config);
EncoderParams init_encoder(const EncoderConfig& config, Rng& rng);

struct EncoderOutput {
  ad::Tensor tokens;  // L_vis x D, in the order tokens were fed
  ad::Tensor cls;     // 1 x D
};

// Encodes one sample. `positions` holds flat position-table indices of the
// rows of `tokens`. With `visible_only`, only unmasked rows are fed.
EncoderOutput encode(const EncoderParams& params, const ad::Matrix& tokens, std::span<const ad::Index> positions,
                     const tokenizer::MaskSpec* visible_only = nullptr);
std::vector<EncoderOutput> encode(const EncoderParams& params, const tokenizer::TokenBatch& batch,
                                  const tokenizer::MaskSpec* visible_only = nullptr);

// Class row plus embedded tokens with positions, (1 + L) x D, before the
// transformer blocks.
ad::Tensor embed(const EncoderParams& params, const ad::Matrix& tokens, std::span<const ad::Index> positions);

// Runs transformer blocks over a (1 + L) x D sequence.
ad::Tensor run_blocks(std::span<const BlockParams> blocks, ad::Tensor x, int heads);

struct DecoderConfig {
  int depth = 2;
  int width = 768;
  int heads = 12;
  int mlp_ratio = 4;
  tokenizer::TokenGrid grid;
};

struct DecoderParams {
  DecoderConfig config;
  ad::Tensor embed_w, embed_b, mask_token, pos;
  std::vector<BlockParams> blocks;
  ad::Tensor norm_g, norm_b, out_w, out_b;

  ParamList parameters() const;
};

DecoderParams init_decoder(const DecoderConfig& config, Rng& rng);

// One reconstructed feature per masked position, in ascending position
// order. `latents.tokens` must hold the visible positions of `mask` in
// ascending order.
ad::Tensor decode_masked(const DecoderParams& params, const EncoderOutput& latents, const tokenizer::MaskSpec& mask);

struct HeadConfig {
  HeadKind kind = HeadKind::mlp;
  int in_dim = 768;
  int hidden = 2048;
  int bottleneck = 256;
  int out_dim = 4096;

  void validate() const;
};

// mlp: in -> hidden -> hidden -> bottleneck (GELU between), L2 normalized,
// then a bias-free map whose rows have unit norm. linear: the bias-free
// unit-row map applied directly to the feature.
struct HeadParams {
  HeadConfig config;
  ad::Tensor w1, b1, w2, b2, w3, b3;
  ad::Tensor last;  // out_dim x (bottleneck | in_dim)

  ParamList parameters() const;
  HeadParams clone() const;
  void normalize_last();
};

HeadParams init_head(const HeadConfig& config, Rng& rng);
// Input of the final unit-row map (B x bottleneck, or the feature itself).
ad::Tensor head_bottleneck(const HeadParams& head, const ad::Tensor& feature);
ad::Tensor project(const HeadParams& head, const ad::Tensor& feature);

// Truncated normal (+-2 std) fill.
ad::Matrix trunc_normal(ad::Index rows, ad::Index cols, double std, Rng& rng);

}  // namespace discovr::backbone
