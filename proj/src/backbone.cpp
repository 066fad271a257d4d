// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "backbone.hpp"

#include "errors.hpp"

#include <cmath>

namespace discovr::backbone {

namespace {

constexpr double kInitStd = 0.02;

ad::Tensor zeros(ad::Index rows, ad::Index cols) { return ad::parameter(ad::Matrix::Zero(rows, cols)); }
ad::Tensor ones(ad::Index rows, ad::Index cols) { return ad::parameter(ad::Matrix::Ones(rows, cols)); }
ad::Tensor weight(ad::Index rows, ad::Index cols, Rng& rng) {
  return ad::parameter(trunc_normal(rows, cols, kInitStd, rng));
}

BlockParams init_block(int width, int mlp_ratio, Rng& rng) {
  const int hidden = width * mlp_ratio;
  BlockParams b;
  b.ln1_g = ones(1, width);
  b.ln1_b = zeros(1, width);
  b.qkv_w = weight(width, 3 * width, rng);
  b.qkv_b = zeros(1, 3 * width);
  b.proj_w = weight(width, width, rng);
  b.proj_b = zeros(1, width);
  b.ln2_g = ones(1, width);
  b.ln2_b = zeros(1, width);
  b.fc1_w = weight(width, hidden, rng);
  b.fc1_b = zeros(1, hidden);
  b.fc2_w = weight(hidden, width, rng);
  b.fc2_b = zeros(1, width);
  return b;
}

BlockParams clone_block(const BlockParams& b) {
  return {ad::clone(b.ln1_g), ad::clone(b.ln1_b), ad::clone(b.qkv_w), ad::clone(b.qkv_b),
          ad::clone(b.proj_w), ad::clone(b.proj_b), ad::clone(b.ln2_g), ad::clone(b.ln2_b),
          ad::clone(b.fc1_w), ad::clone(b.fc1_b), ad::clone(b.fc2_w), ad::clone(b.fc2_b)};
}

ad::Matrix standardize(const ad::Matrix& tokens, const EncoderConfig& cfg) {
  if (cfg.input_mean == 0.0 && cfg.input_std == 1.0) return tokens;
  return (tokens.array() - cfg.input_mean) / cfg.input_std;
}

ad::Tensor linear(const ad::Tensor& x, const ad::Tensor& w, const ad::Tensor& b) {
  return ad::add_row(ad::matmul(x, w), b);
}

ad::Tensor attention(const BlockParams& b, const ad::Tensor& x, int heads) {
  const ad::Index width = x.cols();
  const ad::Index head_dim = width / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));
  ad::Tensor qkv = linear(x, b.qkv_w, b.qkv_b);
  std::vector<ad::Tensor> outs;
  outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    ad::Tensor q = ad::slice_cols(qkv, h * head_dim, head_dim);
    ad::Tensor k = ad::slice_cols(qkv, width + h * head_dim, head_dim);
    ad::Tensor v = ad::slice_cols(qkv, 2 * width + h * head_dim, head_dim);
    ad::Tensor attn = ad::softmax_rows(ad::scale(ad::matmul_nt(q, k), inv_sqrt));
    outs.push_back(ad::matmul(attn, v));
  }
  return linear(ad::concat_cols(outs), b.proj_w, b.proj_b);
}

void check_finite(const ad::Tensor& t, const char* where) {
  if (!t.value().allFinite()) throw NumericError(std::string("non-finite activation in ") + where);
}

}  // namespace

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::test: return "test";
    case Variant::small: return "small";
    case Variant::base: return "base";
  }
  return "base";
}

std::string_view to_string(HeadKind k) { return k == HeadKind::mlp ? "mlp" : "linear"; }

Variant parse_variant(std::string_view s) {
  if (s == "test") return Variant::test;
  if (s == "small") return Variant::small;
  if (s == "base") return Variant::base;
  throw ConfigError("unknown variant '" + std::string(s) + "' (expected test|small|base)");
}

HeadKind parse_head_kind(std::string_view s) {
  if (s == "mlp") return HeadKind::mlp;
  if (s == "linear") return HeadKind::linear;
  throw ConfigError("unknown head '" + std::string(s) + "' (expected mlp|linear)");
}

EncoderConfig EncoderConfig::make(Variant variant, TokenKind kind, tokenizer::TokenGrid grid, int channels) {
  EncoderConfig c;
  c.variant = variant;
  c.kind = kind;
  switch (variant) {
    case Variant::test: c.depth = 2; c.width = 64; c.heads = 4; break;
    case Variant::small: c.depth = 12; c.width = 384; c.heads = 6; break;
    case Variant::base: c.depth = 12; c.width = 768; c.heads = 12; break;
  }
  c.grid = grid;
  c.token_dim = kind == TokenKind::video_tube ? tokenizer::tube_dim(channels) : tokenizer::patch_dim(channels);
  return c;
}

void EncoderConfig::validate() const {
  if (depth <= 0 || width <= 0 || heads <= 0) throw ConfigError("encoder depth/width/heads must be positive");
  if (width % heads != 0) throw ConfigError("encoder width must be divisible by heads");
  if (token_dim <= 0 || grid.size() <= 0) throw ConfigError("encoder token geometry is empty");
  if (!(input_std > 0.0) || !std::isfinite(input_mean)) throw ConfigError("input_std must be positive and input_mean finite");
}

std::int64_t count_elements(const ParamList& params) {
  std::int64_t n = 0;
  for (const auto& p : params) n += p.tensor.value().size();
  return n;
}

void zero_grads(const ParamList& params) {
  for (const auto& p : params) {
    ad::Tensor t = p.tensor;
    t.zero_grad();
  }
}

ParamList clone_values(const ParamList& params) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& p : params) out.push_back({p.name, ad::clone(p.tensor), p.decay});
  return out;
}

void BlockParams::collect(const std::string& prefix, ParamList& out) const {
  out.push_back({prefix + "ln1_g", ln1_g, false});
  out.push_back({prefix + "ln1_b", ln1_b, false});
  out.push_back({prefix + "qkv_w", qkv_w, true});
  out.push_back({prefix + "qkv_b", qkv_b, false});
  out.push_back({prefix + "proj_w", proj_w, true});
  out.push_back({prefix + "proj_b", proj_b, false});
  out.push_back({prefix + "ln2_g", ln2_g, false});
  out.push_back({prefix + "ln2_b", ln2_b, false});
  out.push_back({prefix + "fc1_w", fc1_w, true});
  out.push_back({prefix + "fc1_b", fc1_b, false});
  out.push_back({prefix + "fc2_w", fc2_w, true});
  out.push_back({prefix + "fc2_b", fc2_b, false});
}

ParamList EncoderParams::parameters() const {
  ParamList out;
  out.push_back({"patch_w", patch_w, true});
  out.push_back({"patch_b", patch_b, false});
  out.push_back({"pos", pos, false});
  out.push_back({"cls", cls, false});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + std::to_string(i) + ".", out);
  out.push_back({"norm_g", norm_g, false});
  out.push_back({"norm_b", norm_b, false});
  return out;
}

EncoderParams EncoderParams::clone() const {
  EncoderParams c;
  c.config = config;
  c.patch_w = ad::clone(patch_w);
  c.patch_b = ad::clone(patch_b);
  c.pos = ad::clone(pos);
  c.cls = ad::clone(cls);
  for (const auto& b : blocks) c.blocks.push_back(clone_block(b));
  c.norm_g = ad::clone(norm_g);
  c.norm_b = ad::clone(norm_b);
  return c;
}

std::int64_t count_parameters(const EncoderConfig& c) {
  const std::int64_t d = c.width;
  const std::int64_t h = d * c.mlp_ratio;
  const std::int64_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
  return (static_cast<std::int64_t>(c.token_dim) * d + d) + static_cast<std::int64_t>(c.grid.size()) * d + d +
         c.depth * block + 2 * d;
}

ad::Matrix trunc_normal(ad::Index rows, ad::Index cols, double std, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  ad::Matrix m(rows, cols);
  for (ad::Index i = 0; i < m.size(); ++i) {
    double v = normal(rng);
    while (std::abs(v) > 2.0) v = normal(rng);
    m.data()[i] = v * std;
  }
  return m;
}

EncoderParams init_encoder(const EncoderConfig& config, Rng& rng) {
  config.validate();
  EncoderParams p;
  p.config = config;
  p.patch_w = weight(config.token_dim, config.width, rng);
  p.patch_b = zeros(1, config.width);
  p.pos = weight(config.grid.size(), config.width, rng);
  p.cls = weight(1, config.width, rng);
  for (int i = 0; i < config.depth; ++i) p.blocks.push_back(init_block(config.width, config.mlp_ratio, rng));
  p.norm_g = ones(1, config.width);
  p.norm_b = zeros(1, config.width);
  return p;
}

ad::Tensor run_blocks(std::span<const BlockParams> blocks, ad::Tensor x, int heads) {
  for (const auto& b : blocks) {
    x = ad::add(x, attention(b, ad::layer_norm(x, b.ln1_g, b.ln1_b), heads));
    ad::Tensor hidden = ad::gelu(linear(ad::layer_norm(x, b.ln2_g, b.ln2_b), b.fc1_w, b.fc1_b));
    x = ad::add(x, linear(hidden, b.fc2_w, b.fc2_b));
  }
  return x;
}

EncoderOutput encode(const EncoderParams& params, const ad::Matrix& tokens, std::span<const ad::Index> positions,
                     const tokenizer::MaskSpec* visible_only) {
  const auto& cfg = params.config;
  if (tokens.cols() != cfg.token_dim) {
    throw ShapeError("encode: token dim " + std::to_string(tokens.cols()) + " != configured " +
                     std::to_string(cfg.token_dim));
  }
  if (static_cast<std::size_t>(tokens.rows()) != positions.size()) {
    throw ShapeError("encode: token/position count mismatch");
  }
  for (ad::Index p : positions) {
    if (p < 0 || p >= cfg.grid.size()) throw ShapeError("encode: position outside the configured grid");
  }

  ad::Tensor input = ad::constant(standardize(tokens, cfg));
  std::vector<ad::Index> pos(positions.begin(), positions.end());
  if (visible_only) {
    if (visible_only->length() != tokens.rows()) throw ShapeError("encode: mask length != token count");
    std::vector<ad::Index> vis = visible_only->visible_indices();
    input = ad::gather_rows(input, vis);
    std::vector<ad::Index> vis_pos;
    vis_pos.reserve(vis.size());
    for (ad::Index v : vis) vis_pos.push_back(pos[static_cast<std::size_t>(v)]);
    pos = std::move(vis_pos);
  }

  ad::Tensor x = ad::add(linear(input, params.patch_w, params.patch_b), ad::gather_rows(params.pos, pos));
  std::vector<ad::Tensor> parts{params.cls, x};
  ad::Tensor seq = run_blocks(params.blocks, ad::concat_rows(parts), cfg.heads);
  seq = ad::layer_norm(seq, params.norm_g, params.norm_b);
  check_finite(seq, "encoder");

  std::vector<ad::Index> token_rows(static_cast<std::size_t>(seq.rows() - 1));
  for (std::size_t i = 0; i < token_rows.size(); ++i) token_rows[i] = static_cast<ad::Index>(i + 1);
  const ad::Index cls_row[] = {0};
  return {ad::gather_rows(seq, token_rows), ad::gather_rows(seq, cls_row)};
}

ad::Tensor embed(const EncoderParams& params, const ad::Matrix& tokens, std::span<const ad::Index> positions) {
  if (tokens.cols() != params.config.token_dim) throw ShapeError("embed: token dim mismatch");
  if (static_cast<std::size_t>(tokens.rows()) != positions.size()) throw ShapeError("embed: token/position count mismatch");
  for (ad::Index p : positions) {
    if (p < 0 || p >= params.config.grid.size()) throw ShapeError("embed: position outside the configured grid");
  }
  ad::Tensor x = ad::add(linear(ad::constant(standardize(tokens, params.config)), params.patch_w, params.patch_b),
                         ad::gather_rows(params.pos, positions));
  std::vector<ad::Tensor> parts{params.cls, x};
  return ad::concat_rows(parts);
}

std::vector<EncoderOutput> encode(const EncoderParams& params, const tokenizer::TokenBatch& batch,
                                  const tokenizer::MaskSpec* visible_only) {
  if (batch.grid.size() != params.config.grid.size() || !(batch.grid == params.config.grid)) {
    throw GeometryError("encode: token grid does not match the encoder configuration");
  }
  const std::vector<ad::Index> positions = batch.position_indices();
  std::vector<EncoderOutput> out;
  out.reserve(batch.tokens.size());
  for (const auto& t : batch.tokens) out.push_back(encode(params, t, positions, visible_only));
  return out;
}

ParamList DecoderParams::parameters() const {
  ParamList out;
  out.push_back({"embed_w", embed_w, true});
  out.push_back({"embed_b", embed_b, false});
  out.push_back({"mask_token", mask_token, false});
  out.push_back({"pos", pos, false});
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect("blocks." + std::to_string(i) + ".", out);
  out.push_back({"norm_g", norm_g, false});
  out.push_back({"norm_b", norm_b, false});
  out.push_back({"out_w", out_w, true});
  out.push_back({"out_b", out_b, false});
  return out;
}

DecoderParams init_decoder(const DecoderConfig& config, Rng& rng) {
  if (config.depth < 0 || config.width <= 0 || config.heads <= 0 || config.width % config.heads != 0) {
    throw ConfigError("invalid decoder configuration");
  }
  DecoderParams p;
  p.config = config;
  p.embed_w = weight(config.width, config.width, rng);
  p.embed_b = zeros(1, config.width);
  p.mask_token = weight(1, config.width, rng);
  p.pos = weight(config.grid.size(), config.width, rng);
  for (int i = 0; i < config.depth; ++i) p.blocks.push_back(init_block(config.width, config.mlp_ratio, rng));
  p.norm_g = ones(1, config.width);
  p.norm_b = zeros(1, config.width);
  p.out_w = weight(config.width, config.width, rng);
  p.out_b = zeros(1, config.width);
  return p;
}

ad::Tensor decode_masked(const DecoderParams& params, const EncoderOutput& latents, const tokenizer::MaskSpec& mask) {
  const auto& cfg = params.config;
  if (mask.length() != cfg.grid.size()) throw ShapeError("decode_masked: mask length != decoder grid");
  if (latents.tokens.rows() != mask.num_visible()) {
    throw ShapeError("decode_masked: " + std::to_string(latents.tokens.rows()) + " latents for " +
                     std::to_string(mask.num_visible()) + " visible positions");
  }
  if (latents.tokens.cols() != cfg.width) throw ShapeError("decode_masked: latent width mismatch");
  const int n_masked = mask.num_masked();
  if (n_masked == 0) return ad::constant(ad::Matrix(0, cfg.width));

  ad::Tensor vis = linear(latents.tokens, params.embed_w, params.embed_b);
  ad::Tensor cls = linear(latents.cls, params.embed_w, params.embed_b);
  std::vector<ad::Tensor> pool{vis, params.mask_token};
  ad::Tensor combined = ad::concat_rows(pool);

  // Visible rows map to their rank, masked rows to the shared mask token.
  std::vector<ad::Index> layout(static_cast<std::size_t>(mask.length()));
  ad::Index next_visible = 0;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    layout[i] = mask.masked[i] ? vis.rows() : next_visible++;
  }
  ad::Tensor full = ad::add(ad::gather_rows(combined, layout), params.pos);
  std::vector<ad::Tensor> parts{cls, full};
  ad::Tensor seq = run_blocks(params.blocks, ad::concat_rows(parts), cfg.heads);
  seq = ad::layer_norm(seq, params.norm_g, params.norm_b);

  std::vector<ad::Index> rows;
  rows.reserve(static_cast<std::size_t>(n_masked));
  for (ad::Index m : mask.masked_indices()) rows.push_back(m + 1);
  ad::Tensor out = linear(ad::gather_rows(seq, rows), params.out_w, params.out_b);
  check_finite(out, "decoder");
  return out;
}

void HeadConfig::validate() const {
  if (out_dim < 2) throw ConfigError("head out_dim must be >= 2");
  if (in_dim <= 0) throw ConfigError("head in_dim must be positive");
  if (kind == HeadKind::mlp && (hidden <= 0 || bottleneck <= 0)) {
    throw ConfigError("mlp head hidden/bottleneck must be positive");
  }
}

ParamList HeadParams::parameters() const {
  ParamList out;
  if (config.kind == HeadKind::mlp) {
    out.push_back({"w1", w1, true});
    out.push_back({"b1", b1, false});
    out.push_back({"w2", w2, true});
    out.push_back({"b2", b2, false});
    out.push_back({"w3", w3, true});
    out.push_back({"b3", b3, false});
  }
  out.push_back({"last", last, true});
  return out;
}

HeadParams HeadParams::clone() const {
  HeadParams c;
  c.config = config;
  if (config.kind == HeadKind::mlp) {
    c.w1 = ad::clone(w1);
    c.b1 = ad::clone(b1);
    c.w2 = ad::clone(w2);
    c.b2 = ad::clone(b2);
    c.w3 = ad::clone(w3);
    c.b3 = ad::clone(b3);
  }
  c.last = ad::clone(last);
  return c;
}

void HeadParams::normalize_last() {
  ad::Matrix& w = last.mutable_value();
  for (ad::Index r = 0; r < w.rows(); ++r) {
    const double n = w.row(r).norm();
    if (n > 0.0) w.row(r) /= n;
  }
}

HeadParams init_head(const HeadConfig& config, Rng& rng) {
  config.validate();
  HeadParams h;
  h.config = config;
  int last_in = config.in_dim;
  if (config.kind == HeadKind::mlp) {
    h.w1 = weight(config.in_dim, config.hidden, rng);
    h.b1 = zeros(1, config.hidden);
    h.w2 = weight(config.hidden, config.hidden, rng);
    h.b2 = zeros(1, config.hidden);
    h.w3 = weight(config.hidden, config.bottleneck, rng);
    h.b3 = zeros(1, config.bottleneck);
    last_in = config.bottleneck;
  }
  h.last = weight(config.out_dim, last_in, rng);
  h.normalize_last();
  return h;
}

ad::Tensor head_bottleneck(const HeadParams& head, const ad::Tensor& feature) {
  if (feature.cols() != head.config.in_dim) throw ShapeError("project: feature dim does not match head input");
  if (head.config.kind == HeadKind::linear) return feature;
  ad::Tensor x = ad::gelu(linear(feature, head.w1, head.b1));
  x = ad::gelu(linear(x, head.w2, head.b2));
  x = linear(x, head.w3, head.b3);
  return ad::l2_normalize_rows(x);
}

ad::Tensor project(const HeadParams& head, const ad::Tensor& feature) {
  ad::Tensor logits = ad::matmul_nt(head_bottleneck(head, feature), head.last);
  check_finite(logits, "projection head");
  return logits;
}

}  // namespace discovr::backbone
