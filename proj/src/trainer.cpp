// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "trainer.hpp"

#include "config.hpp"
#include "errors.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>
#include <sstream>

namespace discovr::trainer {

namespace {

constexpr double kBeta1 = 0.9;
constexpr double kBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

void prefix_into(const std::string& prefix, const backbone::ParamList& params, backbone::ParamList& out) {
  for (const auto& p : params) out.push_back({prefix + p.name, p.tensor, p.decay});
}

backbone::ParamList head_group(const Model& m) {
  backbone::ParamList out;
  prefix_into("video_student.", m.video_head_student.parameters(), out);
  prefix_into("video_teacher.", m.video_head_teacher.parameters(), out);
  prefix_into("image_student.", m.image_head_student.parameters(), out);
  prefix_into("image_teacher.", m.image_head_teacher.parameters(), out);
  return out;
}

// Which optimized groups receive updates given the enabled losses.
bool group_active(const std::string& name, const TrainConfig& cfg) {
  auto starts = [&](const char* p) { return name.rfind(p, 0) == 0; };
  if (starts("video_student/")) return cfg.loss_vid || cfg.loss_scd;
  if (starts("video_decoder/") || starts("prototypes/")) return cfg.loss_scd;
  if (starts("image_student/")) return cfg.loss_img;
  if (starts("heads/video_student.")) return cfg.loss_vid;
  if (starts("heads/image_student.")) return cfg.loss_img;
  return false;
}

ad::Tensor mean_of(const std::vector<ad::Tensor>& terms) {
  return ad::scale(ad::sum_all(ad::concat_rows(terms)), 1.0 / static_cast<double>(terms.size()));
}

// Little-endian binary container helpers.
class Writer {
 public:
  template <typename T>
  void pod(const T& v) {
    buffer_.append(reinterpret_cast<const char*>(&v), sizeof(T));
  }
  void str(const std::string& s) {
    pod<std::uint64_t>(s.size());
    buffer_.append(s);
  }
  void matrix(const ad::Matrix& m) {
    pod<std::int64_t>(m.rows());
    pod<std::int64_t>(m.cols());
    buffer_.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
  }
  const std::string& buffer() const { return buffer_; }

 private:
  std::string buffer_;
};

class Reader {
 public:
  explicit Reader(std::string_view data) : data_(data) {}
  template <typename T>
  T pod() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string str() {
    const auto n = pod<std::uint64_t>();
    need(n);
    std::string s(data_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  ad::Matrix matrix() {
    const auto rows = pod<std::int64_t>();
    const auto cols = pod<std::int64_t>();
    if (rows < 0 || cols < 0) throw CorruptionError("checkpoint: negative tensor shape");
    const auto bytes = static_cast<std::size_t>(rows * cols) * sizeof(double);
    need(bytes);
    ad::Matrix m(rows, cols);
    std::memcpy(m.data(), data_.data() + pos_, bytes);
    pos_ += bytes;
    return m;
  }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) throw CorruptionError("checkpoint: unexpected end of payload");
  }
  std::string_view data_;
  std::size_t pos_ = 0;
};

constexpr char kMagic[8] = {'D', 'S', 'C', 'V', 'R', 'C', 'K', 'P'};

std::uint32_t checksum(std::string_view payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed large payloads in chunks.
  std::size_t offset = 0;
  while (offset < payload.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(payload.size() - offset, 1u << 30));
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data() + offset), chunk);
    offset += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

tokenizer::TokenGrid TrainConfig::video_grid() const {
  return tokenizer::video_grid(frames_per_clip, image_size, image_size);
}

tokenizer::TokenGrid TrainConfig::image_grid() const { return tokenizer::image_grid(image_size, image_size); }

backbone::EncoderConfig TrainConfig::video_encoder() const {
  auto c = backbone::EncoderConfig::make(variant, backbone::TokenKind::video_tube, video_grid(), channels);
  c.input_mean = input_mean.value_or(0.0);
  c.input_std = input_std.value_or(1.0);
  return c;
}

backbone::EncoderConfig TrainConfig::image_encoder() const {
  auto c = backbone::EncoderConfig::make(variant, backbone::TokenKind::image_patch, image_grid(), channels);
  c.input_mean = input_mean.value_or(0.0);
  c.input_std = input_std.value_or(1.0);
  return c;
}

backbone::HeadConfig TrainConfig::head_config(int in_dim) const {
  return {head, in_dim, head_hidden, head_bottleneck, head_out_dim};
}

void TrainConfig::validate() const {
  if (input_std && !(*input_std > 0.0)) throw ConfigError("input_std must be positive");
  if (input_mean && !std::isfinite(*input_mean)) throw ConfigError("input_mean must be finite");
  if (epochs <= 0) throw ConfigError("epochs must be positive");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (warmup_epochs < 0) throw ConfigError("warmup_epochs must be >= 0");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (!(grad_clip > 0.0)) throw ConfigError("grad_clip must be positive");
  if (channels <= 0) throw ConfigError("channels must be positive");
  if (clip_stride <= 0) throw ConfigError("clip_stride must be positive");
  if (image_frames_per_clip <= 0) throw ConfigError("image_frames_per_clip must be positive");
  if (image_frames_per_clip > frames_per_clip) throw ConfigError("image_frames_per_clip exceeds frames_per_clip");
  if (clips_per_video <= 0) throw ConfigError("clips_per_video must be positive");
  if (decoder_depth < 0) throw ConfigError("decoder_depth must be >= 0");
  if (checkpoint_every < 0 || log_every <= 0) throw ConfigError("checkpoint_every >= 0 and log_every > 0 required");
  if (!loss_vid && !loss_img && !loss_scd) throw ConfigError("at least one loss must be enabled");
  if (w_vid < 0.0 || w_img < 0.0 || w_scd < 0.0) throw ConfigError("loss weights must be >= 0");
  const double enabled_weight = (loss_vid ? w_vid : 0.0) + (loss_img ? w_img : 0.0) + (loss_scd ? w_scd : 0.0);
  if (!(enabled_weight > 0.0)) throw ConfigError("loss weights of the enabled losses are all zero");
  distill.validate();
  scd.validate();
  video_encoder().validate();
  image_encoder().validate();
  head_config(video_encoder().width).validate();
  // Mask feasibility on both token grids.
  tokenizer::masked_count(video_grid().size(), mask_ratio);
  tokenizer::masked_count(image_grid().size(), effective_image_mask_ratio());
  if (loss_scd && tokenizer::masked_count(video_grid().size(), mask_ratio) == 0) {
    throw ConfigError("the cluster distillation loss needs a positive mask ratio");
  }
}

std::string TrainConfig::run_label() const {
  std::string losses;
  auto add = [&](bool on, const char* name) {
    if (!on) return;
    if (!losses.empty()) losses += "+";
    losses += name;
  };
  add(loss_vid, "vid");
  add(loss_img, "img");
  add(loss_scd, "scd");
  char ratio[16];
  std::snprintf(ratio, sizeof ratio, "%.2f", mask_ratio);
  return "losses=" + losses + "_mask=" + ratio + "_frames=" + std::to_string(frames_per_clip) +
         "_variant=" + std::string(backbone::to_string(variant));
}

std::vector<std::pair<std::string, backbone::ParamList>> Model::groups() const {
  std::vector<std::pair<std::string, backbone::ParamList>> out;
  out.emplace_back("video_student", video_student.parameters());
  out.emplace_back("video_teacher", video_teacher.parameters());
  out.emplace_back("image_student", image_student.parameters());
  out.emplace_back("image_teacher", image_teacher.parameters());
  out.emplace_back("video_decoder", video_decoder.parameters());
  out.emplace_back("heads", head_group(*this));
  out.emplace_back("prototypes", backbone::ParamList{{"weights", prototypes.weights, false}});
  return out;
}

backbone::ParamList Model::trainable() const {
  backbone::ParamList out;
  prefix_into("video_student/", video_student.parameters(), out);
  prefix_into("image_student/", image_student.parameters(), out);
  prefix_into("video_decoder/", video_decoder.parameters(), out);
  prefix_into("heads/video_student.", video_head_student.parameters(), out);
  prefix_into("heads/image_student.", image_head_student.parameters(), out);
  out.push_back({"prototypes/weights", prototypes.weights, false});
  return out;
}

backbone::ParamList Model::teachers() const {
  backbone::ParamList out;
  prefix_into("video_teacher/", video_teacher.parameters(), out);
  prefix_into("image_teacher/", image_teacher.parameters(), out);
  prefix_into("heads/video_teacher.", video_head_teacher.parameters(), out);
  prefix_into("heads/image_teacher.", image_head_teacher.parameters(), out);
  return out;
}

Model init_model(const TrainConfig& cfg, Rng& rng) {
  cfg.validate();
  Model m;
  const auto video_cfg = cfg.video_encoder();
  const auto image_cfg = cfg.image_encoder();
  m.video_student = backbone::init_encoder(video_cfg, rng);
  m.video_teacher = m.video_student.clone();
  m.image_student = backbone::init_encoder(image_cfg, rng);
  m.image_teacher = m.image_student.clone();
  backbone::DecoderConfig dec;
  dec.depth = cfg.decoder_depth;
  dec.width = video_cfg.width;
  dec.heads = video_cfg.heads;
  dec.grid = video_cfg.grid;
  m.video_decoder = backbone::init_decoder(dec, rng);
  m.video_head_student = backbone::init_head(cfg.head_config(video_cfg.width), rng);
  m.video_head_teacher = m.video_head_student.clone();
  m.image_head_student = backbone::init_head(cfg.head_config(image_cfg.width), rng);
  m.image_head_teacher = m.image_head_student.clone();
  m.prototypes = scd::init_prototypes(cfg.scd.num_prototypes, video_cfg.width, rng);
  m.video_center = ad::Matrix::Zero(1, cfg.head_out_dim);
  m.image_center = ad::Matrix::Zero(1, cfg.head_out_dim);
  return m;
}

TrainState init_state(const TrainConfig& cfg) {
  TrainState s;
  s.rng.seed(cfg.seed);
  s.model = init_model(cfg, s.rng);
  for (const auto& p : s.model.trainable()) {
    s.moments.push_back({ad::Matrix::Zero(p.tensor.rows(), p.tensor.cols()),
                         ad::Matrix::Zero(p.tensor.rows(), p.tensor.cols())});
  }
  return s;
}

StepPlan plan_step(const std::vector<tokenizer::VideoClip>& clips, const TrainConfig& cfg, Rng& rng) {
  const int video_len = cfg.video_grid().size();
  const int image_len = cfg.image_grid().size();
  StepPlan plan;
  plan.reserve(clips.size());
  for (const auto& clip : clips) {
    ClipPlan cp;
    for (int m = 0; m < cfg.distill.video_views; ++m) {
      cp.video_views.push_back(tokenizer::make_mask(video_len, cfg.mask_ratio, rng));
    }
    // Distinct frames via a partial shuffle.
    std::vector<int> frames(static_cast<std::size_t>(clip.frames));
    for (int i = 0; i < clip.frames; ++i) frames[static_cast<std::size_t>(i)] = i;
    const int take = std::min(cfg.image_frames_per_clip, clip.frames);
    for (int i = 0; i < take; ++i) {
      std::uniform_int_distribution<int> pick(i, clip.frames - 1);
      std::swap(frames[static_cast<std::size_t>(i)], frames[static_cast<std::size_t>(pick(rng))]);
      cp.image_frames.push_back(frames[static_cast<std::size_t>(i)]);
      std::vector<tokenizer::MaskSpec> views;
      for (int n = 0; n < cfg.distill.image_views; ++n) {
        views.push_back(tokenizer::make_mask(image_len, cfg.effective_image_mask_ratio(), rng));
      }
      cp.image_views.push_back(std::move(views));
    }
    plan.push_back(std::move(cp));
  }
  return plan;
}

LossBreakdown total_loss(const std::vector<tokenizer::VideoClip>& clips, const StepPlan& plan, const Model& model,
                         const TrainConfig& cfg, double teacher_tau, scd::TargetCache* cache) {
  if (clips.empty()) throw ConfigError("total_loss: empty batch");
  if (plan.size() != clips.size()) throw ShapeError("total_loss: plan does not match the batch");
  const double student_tau = cfg.distill.student_temp;
  const distill::Branch video_branch{&model.video_student, &model.video_teacher, &model.video_head_student,
                                     &model.video_head_teacher, cfg.distill.centering ? &model.video_center : nullptr};
  const distill::Branch image_branch{&model.image_student, &model.image_teacher, &model.image_head_student,
                                     &model.image_head_teacher, cfg.distill.centering ? &model.image_center : nullptr};
  const auto tube_map = tokenizer::build_tube_frame_map(cfg.frames_per_clip, cfg.image_size, cfg.image_size);

  std::vector<ad::Tensor> vid_terms, img_terms, decoded;
  std::vector<ad::Matrix> image_targets;
  std::vector<ad::Matrix> video_logits, image_logits;

  for (std::size_t b = 0; b < clips.size(); ++b) {
    const auto& clip = clips[b];
    const auto& cp = plan[b];
    const auto batch = tokenizer::tubify(clip);
    if (!(batch.grid == cfg.video_grid())) throw GeometryError("clip geometry does not match the configuration");
    const auto positions = batch.position_indices();
    const ad::Matrix& tokens = batch.tokens.front();

    std::optional<backbone::EncoderOutput> first_view;
    if (cfg.loss_vid) {
      auto r = distill::masked_ssl_loss(video_branch, tokens, positions, cp.video_views, teacher_tau, student_tau);
      vid_terms.push_back(r.loss);
      video_logits.push_back(r.teacher_logits);
      first_view = std::move(r.student_views.front());
    } else if (cfg.loss_scd) {
      first_view = backbone::encode(model.video_student, tokens, positions, &cp.video_views.front());
    }

    if (cfg.loss_scd) {
      const auto& mask = cp.video_views.front();
      decoded.push_back(backbone::decode_masked(model.video_decoder, *first_view, mask));
      scd::FrameFeatures features(static_cast<std::size_t>(clip.frames));
      ad::NoGradGuard no_grad;
      for (ad::Index tube : mask.masked_indices()) {
        const auto& tf = tube_map.at(static_cast<int>(tube));
        for (int f : {tf.first_frame, tf.second_frame}) {
          if (f == tf.second_frame && cfg.scd.pool == scd::Pool::first_frame) continue;
          auto& slot = features[static_cast<std::size_t>(f)];
          if (slot) continue;
          const auto patches = tokenizer::patchify_frame(tokenizer::frame_of(clip, f));
          const auto pos = patches.position_indices();
          slot = backbone::encode(model.image_teacher, patches.tokens.front(), pos).tokens.value();
        }
      }
      image_targets.push_back(scd::align_image_targets(features, mask, tube_map, cfg.scd.pool));
    }

    if (cfg.loss_img) {
      for (std::size_t i = 0; i < cp.image_frames.size(); ++i) {
        const auto patches = tokenizer::patchify_frame(tokenizer::frame_of(clip, cp.image_frames[i]));
        const auto pos = patches.position_indices();
        auto r = distill::masked_ssl_loss(image_branch, patches.tokens.front(), pos, cp.image_views[i], teacher_tau,
                                          student_tau);
        img_terms.push_back(r.loss);
        image_logits.push_back(r.teacher_logits);
      }
    }
  }

  LossBreakdown out;
  std::vector<ad::Tensor> weighted;
  if (cfg.loss_vid) {
    ad::Tensor vid = mean_of(vid_terms);
    out.vid = vid.item();
    weighted.push_back(ad::scale(vid, cfg.w_vid));
  }
  if (cfg.loss_img) {
    ad::Tensor img = mean_of(img_terms);
    out.img = img.item();
    weighted.push_back(ad::scale(img, cfg.w_img));
  }
  if (cfg.loss_scd) {
    ad::Tensor zv = ad::concat_rows(decoded);
    ad::Matrix zi(zv.rows(), zv.cols());
    ad::Index at = 0;
    for (const auto& t : image_targets) {
      zi.middleRows(at, t.rows()) = t;
      at += t.rows();
    }
    auto r = scd::scd_objective(zv, zi, model.prototypes, cfg.scd, cache);
    out.scd = r.loss.item();
    weighted.push_back(ad::scale(r.loss, cfg.w_scd));
  }
  out.total = ad::sum_all(ad::concat_rows(weighted));

  auto stack = [](const std::vector<ad::Matrix>& rows, ad::Index cols) {
    ad::Matrix m(static_cast<ad::Index>(rows.size()), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<ad::Index>(i)) = rows[i].row(0);
    return m;
  };
  out.video_teacher_logits = stack(video_logits, cfg.head_out_dim);
  out.image_teacher_logits = stack(image_logits, cfg.head_out_dim);
  if (!std::isfinite(out.total.item())) throw NumericError("total loss is not finite");
  return out;
}

double lr_schedule(std::int64_t step, const TrainConfig& cfg, std::int64_t steps_per_epoch) {
  if (step < 0) throw ConfigError("lr_schedule: step must be >= 0");
  const std::int64_t warmup = static_cast<std::int64_t>(cfg.warmup_epochs) * steps_per_epoch;
  const std::int64_t total = std::max<std::int64_t>(static_cast<std::int64_t>(cfg.epochs) * steps_per_epoch, 1);
  if (step < warmup) return cfg.base_lr * static_cast<double>(step) / static_cast<double>(warmup);
  if (step >= total || total <= warmup) return step >= total ? 0.0 : cfg.base_lr;
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return cfg.base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

StepStats train_step(TrainState& state, const std::vector<tokenizer::VideoClip>& clips, const TrainConfig& cfg) {
  Model& model = state.model;
  const auto params = model.trainable();
  if (params.size() != state.moments.size()) throw ShapeError("train_step: optimizer state does not match model");

  StepStats stats;
  stats.step = state.step;
  stats.epoch = state.epoch;
  stats.tau_t = distill::teacher_temp(state.epoch, cfg.distill);
  stats.lr = lr_schedule(state.step, cfg, state.steps_per_epoch);

  const StepPlan plan = plan_step(clips, cfg, state.rng);
  backbone::zero_grads(params);
  LossBreakdown loss = total_loss(clips, plan, model, cfg, stats.tau_t);
  stats.loss_total = loss.total.item();
  stats.loss_vid = loss.vid;
  stats.loss_img = loss.img;
  stats.loss_scd = loss.scd;
  if (!std::isfinite(stats.loss_total)) {
    throw NumericError("non-finite loss at step " + std::to_string(state.step) + " (vid=" +
                       std::to_string(loss.vid) + ", img=" + std::to_string(loss.img) +
                       ", scd=" + std::to_string(loss.scd) + ")");
  }
  ad::backward(loss.total);

  std::vector<bool> active(params.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    active[i] = group_active(params[i].name, cfg);
    if (active[i] && params[i].tensor.grad().size() != 0) sq += params[i].tensor.grad().squaredNorm();
  }
  stats.grad_norm = std::sqrt(sq);
  if (!std::isfinite(stats.grad_norm)) throw NumericError("non-finite gradient at step " + std::to_string(state.step));
  const double clip = stats.grad_norm > cfg.grad_clip ? cfg.grad_clip / stats.grad_norm : 1.0;

  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(kBeta1, t);
  const double bc2 = 1.0 - std::pow(kBeta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!active[i]) continue;
    ad::Tensor p = params[i].tensor;
    if (p.grad().size() == 0) continue;
    const ad::Matrix g = p.grad() * clip;
    auto& mom = state.moments[i];
    mom.m = kBeta1 * mom.m + (1.0 - kBeta1) * g;
    mom.v = kBeta2 * mom.v + (1.0 - kBeta2) * g.cwiseProduct(g);
    ad::Matrix& w = p.mutable_value();
    if (params[i].decay) w *= (1.0 - stats.lr * cfg.weight_decay);
    w.array() -= stats.lr * (mom.m.array() / bc1) / ((mom.v.array() / bc2).sqrt() + kAdamEps);
  }
  model.video_head_student.normalize_last();
  model.image_head_student.normalize_last();
  if (cfg.scd.normalize_prototypes) model.prototypes.normalize_rows();

  const double lambda = cfg.distill.ema_momentum;
  distill::ema_update(model.video_teacher.parameters(), model.video_student.parameters(), lambda);
  distill::ema_update(model.image_teacher.parameters(), model.image_student.parameters(), lambda);
  distill::ema_update(model.video_head_teacher.parameters(), model.video_head_student.parameters(), lambda);
  distill::ema_update(model.image_head_teacher.parameters(), model.image_head_student.parameters(), lambda);
  if (lambda != 1.0) {
    model.video_head_teacher.normalize_last();
    model.image_head_teacher.normalize_last();
  }

  if (cfg.distill.centering) {
    const double cm = cfg.distill.center_momentum;
    if (loss.video_teacher_logits.rows() > 0) {
      model.video_center = distill::update_center(model.video_center, loss.video_teacher_logits, cm);
    }
    if (loss.image_teacher_logits.rows() > 0) {
      model.image_center = distill::update_center(model.image_center, loss.image_teacher_logits, cm);
    }
  }
  ++state.step;
  return stats;
}

void save_checkpoint(const TrainState& state, const TrainConfig& cfg, const std::filesystem::path& path) {
  Writer w;
  w.str(config::train_to_json(cfg).dump());
  w.pod<std::int64_t>(state.step);
  w.pod<std::int32_t>(state.epoch);
  w.pod<std::int64_t>(state.steps_per_epoch);
  std::ostringstream rng;
  rng << state.rng;
  w.str(rng.str());

  const auto groups = state.model.groups();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(groups.size()));
  for (const auto& [name, params] : groups) {
    w.str(name);
    w.pod<std::uint32_t>(static_cast<std::uint32_t>(params.size()));
    for (const auto& p : params) {
      w.str(p.name);
      w.matrix(p.tensor.value());
    }
  }
  w.matrix(state.model.video_center);
  w.matrix(state.model.image_center);
  const auto trainable = state.model.trainable();
  w.pod<std::uint32_t>(static_cast<std::uint32_t>(state.moments.size()));
  for (std::size_t i = 0; i < state.moments.size(); ++i) {
    w.str(trainable[i].name);
    w.matrix(state.moments[i].m);
    w.matrix(state.moments[i].v);
  }

  const std::string& payload = w.buffer();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof kMagic);
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t size = payload.size();
  const std::uint32_t crc = checksum(payload);
  out.write(reinterpret_cast<const char*>(&version), sizeof version);
  out.write(reinterpret_cast<const char*>(&size), sizeof size);
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.write(reinterpret_cast<const char*>(&crc), sizeof crc);
  if (!out) throw IoError("failed writing checkpoint: " + path.string());
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path.string());
  const std::string file((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  constexpr std::size_t header = sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t);
  if (file.size() < header || std::memcmp(file.data(), kMagic, sizeof kMagic) != 0) {
    throw CorruptionError("not a checkpoint file (bad magic or truncated header): " + path.string());
  }
  std::uint32_t version = 0;
  std::uint64_t size = 0;
  std::memcpy(&version, file.data() + sizeof kMagic, sizeof version);
  std::memcpy(&size, file.data() + sizeof kMagic + sizeof version, sizeof size);
  if (version != kCheckpointVersion) {
    throw VersionError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                       std::to_string(kCheckpointVersion) + ")");
  }
  if (file.size() != header + size + sizeof(std::uint32_t)) {
    throw CorruptionError("checkpoint is truncated or has trailing bytes: " + path.string());
  }
  const std::string_view payload(file.data() + header, size);
  std::uint32_t stored_crc = 0;
  std::memcpy(&stored_crc, file.data() + header + size, sizeof stored_crc);
  if (stored_crc != checksum(payload)) throw CorruptionError("checkpoint checksum mismatch: " + path.string());

  Reader r(payload);
  LoadedCheckpoint out;
  try {
    out.config = config::train_from_json(nlohmann::json::parse(r.str()));
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(std::string("checkpoint config echo is unreadable: ") + e.what());
  }
  // Structure comes from the config; values are overwritten below.
  out.state = init_state(out.config);
  TrainState& s = out.state;
  s.step = r.pod<std::int64_t>();
  s.epoch = r.pod<std::int32_t>();
  s.steps_per_epoch = r.pod<std::int64_t>();
  std::istringstream rng(r.str());
  rng >> s.rng;
  if (!rng) throw CorruptionError("checkpoint rng state is unreadable");

  auto fill = [](ad::Tensor t, const ad::Matrix& m, const std::string& name) {
    if (t.rows() != m.rows() || t.cols() != m.cols()) throw CorruptionError("checkpoint tensor shape mismatch: " + name);
    t.mutable_value() = m;
  };
  const auto groups = s.model.groups();
  const auto n_groups = r.pod<std::uint32_t>();
  if (n_groups != groups.size()) throw CorruptionError("checkpoint group count mismatch");
  for (const auto& [name, params] : groups) {
    if (r.str() != name) throw CorruptionError("checkpoint group order mismatch at " + name);
    if (r.pod<std::uint32_t>() != params.size()) throw CorruptionError("checkpoint tensor count mismatch in " + name);
    for (const auto& p : params) {
      const std::string tname = r.str();
      if (tname != p.name) throw CorruptionError("checkpoint tensor name mismatch: " + tname + " vs " + p.name);
      fill(p.tensor, r.matrix(), name + "/" + tname);
    }
  }
  s.model.video_center = r.matrix();
  s.model.image_center = r.matrix();
  const auto trainable = s.model.trainable();
  if (r.pod<std::uint32_t>() != trainable.size()) throw CorruptionError("checkpoint optimizer size mismatch");
  for (std::size_t i = 0; i < trainable.size(); ++i) {
    if (r.str() != trainable[i].name) throw CorruptionError("checkpoint optimizer order mismatch");
    s.moments[i].m = r.matrix();
    s.moments[i].v = r.matrix();
  }
  if (!r.done()) throw CorruptionError("checkpoint payload has trailing data");
  return out;
}

}  // namespace discovr::trainer
