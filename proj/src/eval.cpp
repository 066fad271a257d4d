// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "eval.hpp"

#include "errors.hpp"

#include <Eigen/Cholesky>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace discovr::eval {

namespace {

// Plain Adam over a parameter list; used by the small downstream heads.
class Adam {
 public:
  explicit Adam(const backbone::ParamList& params, double lr) : params_(params), lr_(lr) {
    for (const auto& p : params_) {
      m_.push_back(ad::Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
      v_.push_back(ad::Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }

  void step(double grad_scale = 1.0) {
    ++t_;
    const double bc1 = 1.0 - std::pow(0.9, t_);
    const double bc2 = 1.0 - std::pow(0.999, t_);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      ad::Tensor p = params_[i].tensor;
      if (p.grad().size() == 0) continue;
      const ad::Matrix g = p.grad() * grad_scale;
      m_[i] = 0.9 * m_[i] + 0.1 * g;
      v_[i] = 0.999 * v_[i] + 0.001 * g.cwiseProduct(g);
      p.mutable_value().array() -= lr_ * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + 1e-8);
    }
    backbone::zero_grads(params_);
  }

 private:
  backbone::ParamList params_;
  double lr_;
  std::vector<ad::Matrix> m_, v_;
  int t_ = 0;
};

std::vector<std::size_t> shuffled(std::size_t n, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

void check_binary(const std::vector<int>& v, const char* what) {
  for (int x : v) {
    if (x != kNormal && x != kAbnormal) throw DataError(std::string(what) + ": labels must be 0 (normal) or 1 (abnormal)");
  }
}

constexpr char kEmbMagic[8] = {'D', 'S', 'C', 'V', 'E', 'M', 'B', '1'};

}  // namespace

std::string_view to_string(Protocol p) {
  switch (p) {
    case Protocol::knn: return "knn";
    case Protocol::probe: return "probe";
    case Protocol::segment: return "segment";
    case Protocol::regress_ef: return "regress-ef";
  }
  return "knn";
}
std::string_view to_string(EmbeddingSource s) { return s == EmbeddingSource::teacher ? "teacher" : "student"; }
std::string_view to_string(F1Mode m) { return m == F1Mode::macro ? "macro" : "binary"; }
std::string_view to_string(EfMode m) { return m == EfMode::probe ? "probe" : "finetune"; }

Protocol parse_protocol(std::string_view s) {
  if (s == "knn") return Protocol::knn;
  if (s == "probe") return Protocol::probe;
  if (s == "segment") return Protocol::segment;
  if (s == "regress-ef" || s == "regress_ef") return Protocol::regress_ef;
  throw ConfigError("unknown protocol '" + std::string(s) + "' (expected knn|probe|segment|regress-ef)");
}
EmbeddingSource parse_embedding_source(std::string_view s) {
  if (s == "teacher") return EmbeddingSource::teacher;
  if (s == "student") return EmbeddingSource::student;
  throw ConfigError("unknown embedding source '" + std::string(s) + "' (expected teacher|student)");
}
F1Mode parse_f1_mode(std::string_view s) {
  if (s == "macro") return F1Mode::macro;
  if (s == "binary") return F1Mode::binary;
  throw ConfigError("unknown f1 mode '" + std::string(s) + "' (expected macro|binary)");
}
EfMode parse_ef_mode(std::string_view s) {
  if (s == "probe") return EfMode::probe;
  if (s == "finetune") return EfMode::finetune;
  throw ConfigError("unknown ef mode '" + std::string(s) + "' (expected probe|finetune)");
}

void EvalConfig::validate() const {
  if (!(knn_temp > 0.0)) throw ConfigError("knn_temp must be positive");
  if (knn_k_grid.empty()) throw ConfigError("knn_k_grid must not be empty");
  for (int k : knn_k_grid) {
    if (k < 1) throw ConfigError("knn_k_grid entries must be >= 1");
  }
  if (knn_k < 0) throw ConfigError("knn_k must be >= 0");
  if (probe_epochs < 1 || !(probe_lr > 0.0) || probe_batch_size < 1) throw ConfigError("invalid probe settings");
  if (seg_dim < 1 || seg_epochs < 1 || !(seg_lr > 0.0) || seg_frames_per_video < 1) {
    throw ConfigError("invalid segmentation settings");
  }
  if (ef_finetune_blocks < 1 || ef_epochs < 1 || !(ef_lr > 0.0) || ef_ridge < 0.0) {
    throw ConfigError("invalid EF regression settings");
  }
}

void EmbeddingSet::validate() const {
  const auto n = static_cast<std::size_t>(vectors.rows());
  if (labels.size() != n || video_ids.size() != n || (!ef.empty() && ef.size() != n)) {
    throw ShapeError("embedding set: field lengths differ");
  }
  for (ad::Index i = 0; i < vectors.rows(); ++i) {
    if (!(vectors.row(i).norm() > 0.0)) throw NumericError("embedding set: zero vector at row " + std::to_string(i));
  }
}

ad::Matrix extract_embedding(const backbone::EncoderParams& encoder, const tokenizer::VideoClip& clip) {
  ad::NoGradGuard no_grad;
  clip.validate();
  const auto batch = tokenizer::tubify(clip);
  if (!(batch.grid == encoder.config.grid) || batch.token_dim() != encoder.config.token_dim) {
    throw GeometryError("extract_embedding: clip geometry does not match the encoder");
  }
  const auto positions = batch.position_indices();
  return backbone::encode(encoder, batch.tokens.front(), positions).cls.value();
}

ad::Matrix l2_normalized(const ad::Matrix& rows) {
  ad::Matrix out = rows;
  for (ad::Index i = 0; i < out.rows(); ++i) {
    const double n = out.row(i).norm();
    if (!(n > 0.0)) throw NumericError("cannot normalize a zero embedding");
    out.row(i) /= n;
  }
  return out;
}

std::vector<KnnVote> knn_classify_all(const EmbeddingSet& train, const ad::Matrix& queries, int k, double temperature,
                                      KnnWeighting weighting) {
  if (train.size() == 0) throw DataError("knn: empty training set");
  if (k < 1 || static_cast<std::size_t>(k) > train.size()) {
    throw ConfigError("knn: k=" + std::to_string(k) + " outside [1, " + std::to_string(train.size()) + "]");
  }
  if (!(temperature > 0.0)) throw ConfigError("knn: temperature must be positive");
  if (queries.cols() != train.vectors.cols()) throw ShapeError("knn: query dim differs from training set");
  check_binary(train.labels, "knn");
  const ad::Matrix bank = l2_normalized(train.vectors);
  const ad::Matrix q = l2_normalized(queries);
  const ad::Matrix sims = q * bank.transpose();

  std::vector<KnnVote> out;
  out.reserve(static_cast<std::size_t>(q.rows()));
  std::vector<int> order(train.size());
  for (ad::Index r = 0; r < sims.rows(); ++r) {
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + k, order.end(), [&](int a, int b) {
      const double sa = sims(r, a), sb = sims(r, b);
      return sa != sb ? sa > sb : a < b;
    });
    double weight[2] = {0.0, 0.0};
    for (int j = 0; j < k; ++j) {
      const int idx = order[static_cast<std::size_t>(j)];
      // Shifting by the maximum similarity (1) keeps exp in range.
      const double w = weighting == KnnWeighting::exp ? std::exp((sims(r, idx) - 1.0) / temperature) : 1.0;
      weight[train.labels[static_cast<std::size_t>(idx)]] += w;
    }
    const double total = weight[0] + weight[1];
    KnnVote v;
    v.abnormal_score = total > 0.0 ? weight[kAbnormal] / total : 0.0;
    v.label = weight[kAbnormal] > weight[kNormal] ? kAbnormal : kNormal;
    out.push_back(v);
  }
  return out;
}

KnnVote knn_classify(const EmbeddingSet& train, const ad::Matrix& query, int k, double temperature,
                     KnnWeighting weighting) {
  if (query.rows() != 1) throw ShapeError("knn_classify: query must be a single row");
  return knn_classify_all(train, query, k, temperature, weighting).front();
}

std::pair<int, double> aggregate_video(const std::vector<int>& clip_preds, const std::vector<double>& clip_scores) {
  if (clip_preds.empty()) throw DataError("aggregate_video: no clips");
  if (clip_preds.size() != clip_scores.size()) throw ShapeError("aggregate_video: preds and scores differ in length");
  const bool abnormal = std::any_of(clip_preds.begin(), clip_preds.end(), [](int p) { return p == kAbnormal; });
  return {abnormal ? kAbnormal : kNormal, *std::max_element(clip_scores.begin(), clip_scores.end())};
}

VideoPredictions aggregate_by_video(const EmbeddingSet& set, const std::vector<int>& clip_preds,
                                    const std::vector<double>& clip_scores) {
  if (clip_preds.size() != set.size() || clip_scores.size() != set.size()) {
    throw ShapeError("aggregate_by_video: prediction count differs from the embedding set");
  }
  std::unordered_map<std::string, std::size_t> slot;
  std::vector<std::vector<int>> preds;
  std::vector<std::vector<double>> scores;
  VideoPredictions out;
  for (std::size_t i = 0; i < set.size(); ++i) {
    auto [it, fresh] = slot.try_emplace(set.video_ids[i], out.video_ids.size());
    if (fresh) {
      out.video_ids.push_back(set.video_ids[i]);
      out.labels.push_back(set.labels[i]);
      preds.emplace_back();
      scores.emplace_back();
    } else if (out.labels[it->second] != set.labels[i]) {
      throw DataError("clips of video '" + set.video_ids[i] + "' carry different labels");
    }
    preds[it->second].push_back(clip_preds[i]);
    scores[it->second].push_back(clip_scores[i]);
  }
  for (std::size_t v = 0; v < out.video_ids.size(); ++v) {
    auto [label, score] = aggregate_video(preds[v], scores[v]);
    out.preds.push_back(label);
    out.scores.push_back(score);
  }
  return out;
}

double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw ShapeError("auc: scores and labels differ in length");
  check_binary(labels, "auc");
  const auto n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Average ranks (1-based) over tie groups.
  std::vector<double> rank(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && scores[order[j + 1]] == scores[order[i]]) ++j;
    const double r = (static_cast<double>(i + 1) + static_cast<double>(j + 1)) / 2.0;
    for (std::size_t m = i; m <= j; ++m) rank[order[m]] = r;
    i = j + 1;
  }
  double pos = 0.0, neg = 0.0, rank_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] == kAbnormal) {
      pos += 1.0;
      rank_sum += rank[i];
    } else {
      neg += 1.0;
    }
  }
  if (pos == 0.0 || neg == 0.0) throw DataError("AUC is undefined when only one class is present");
  const double u = rank_sum - pos * (pos + 1.0) / 2.0;
  return 100.0 * u / (pos * neg);
}

double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  if (preds.size() != labels.size()) throw ShapeError("balanced_accuracy: length mismatch");
  double hit[2] = {0, 0}, count[2] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y != kNormal && y != kAbnormal) throw DataError("balanced_accuracy: labels must be binary");
    count[y] += 1.0;
    if (preds[i] == y) hit[y] += 1.0;
  }
  double sum = 0.0;
  int classes = 0;
  for (int c = 0; c < 2; ++c) {
    if (count[c] > 0) {
      sum += hit[c] / count[c];
      ++classes;
    }
  }
  if (classes == 0) throw DataError("balanced_accuracy: empty input");
  return 100.0 * sum / classes;
}

MetricsReport compute_metrics(const std::vector<int>& preds, const std::vector<double>& scores,
                              const std::vector<int>& labels, F1Mode f1_mode) {
  if (preds.size() != labels.size() || scores.size() != labels.size()) {
    throw ShapeError("compute_metrics: preds, scores and labels must have equal length");
  }
  if (labels.empty()) throw DataError("compute_metrics: empty input");
  check_binary(preds, "compute_metrics");
  check_binary(labels, "compute_metrics");
  MetricsReport r;
  r.f1_mode = f1_mode;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const bool p = preds[i] == kAbnormal;
    const bool y = labels[i] == kAbnormal;
    r.tp += p && y;
    r.fp += p && !y;
    r.fn += !p && y;
    r.tn += !p && !y;
  }
  auto ratio = [](double a, double b) { return b > 0.0 ? a / b : 0.0; };
  auto f1_of = [](double p, double rc) { return p + rc > 0.0 ? 2.0 * p * rc / (p + rc) : 0.0; };
  const double tp = static_cast<double>(r.tp), fp = static_cast<double>(r.fp);
  const double fn = static_cast<double>(r.fn), tn = static_cast<double>(r.tn);
  const double p1 = ratio(tp, tp + fp), r1 = ratio(tp, tp + fn);
  const double p0 = ratio(tn, tn + fn), r0 = ratio(tn, tn + fp);
  r.accuracy = 100.0 * (tp + tn) / (tp + tn + fp + fn);
  r.balanced_accuracy = 100.0 * (r1 + r0) / 2.0;
  r.precision = 100.0 * p1;
  r.recall = 100.0 * r1;
  r.f1_binary = 100.0 * f1_of(p1, r1);
  r.f1_macro = 100.0 * (f1_of(p1, r1) + f1_of(p0, r0)) / 2.0;
  r.f1 = f1_mode == F1Mode::macro ? r.f1_macro : r.f1_binary;
  r.auc = auc(scores, labels);
  return r;
}

int select_k(const EmbeddingSet& train, const EmbeddingSet& val, const std::vector<int>& candidates,
             double temperature) {
  if (train.size() == 0 || val.size() == 0) throw DataError("select_k: empty embedding set");
  if (candidates.empty()) throw ConfigError("select_k: no candidates");
  std::vector<int> ks = candidates;
  std::sort(ks.begin(), ks.end());
  ks.erase(std::unique(ks.begin(), ks.end()), ks.end());
  int best_k = -1;
  double best = -1.0;
  for (int k : ks) {
    if (static_cast<std::size_t>(k) > train.size()) continue;
    const auto votes = knn_classify_all(train, val.vectors, k, temperature);
    std::vector<int> preds;
    std::vector<double> scores;
    for (const auto& v : votes) {
      preds.push_back(v.label);
      scores.push_back(v.abnormal_score);
    }
    const auto videos = aggregate_by_video(val, preds, scores);
    const double bacc = balanced_accuracy(videos.preds, videos.labels);
    if (bacc > best) {
      best = bacc;
      best_k = k;
    }
  }
  // Every candidate exceeds the bank size: use the whole bank.
  return best_k > 0 ? best_k : static_cast<int>(train.size());
}

ad::Matrix LinearClassifier::probabilities(const ad::Matrix& x) const {
  ad::Matrix logits = x * w;
  logits.rowwise() += b.row(0);
  return ad::softmax_rows(logits);
}

LinearClassifier linear_probe(const ad::Matrix& x, const std::vector<int>& labels, int epochs, double lr,
                              int batch_size, std::uint64_t seed) {
  if (static_cast<std::size_t>(x.rows()) != labels.size()) throw ShapeError("linear_probe: rows != labels");
  if (epochs < 1 || batch_size < 1 || !(lr > 0.0)) throw ConfigError("linear_probe: invalid settings");
  const int classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> present(static_cast<std::size_t>(std::max(classes, 0)), 0);
  for (int y : labels) {
    if (y < 0) throw DataError("linear_probe: negative label");
    present[static_cast<std::size_t>(y)] = 1;
  }
  if (std::accumulate(present.begin(), present.end(), 0) < 2) {
    throw DataError("linear_probe: at least two classes are required");
  }
  ad::Tensor w = ad::parameter(ad::Matrix::Zero(x.cols(), classes));
  ad::Tensor b = ad::parameter(ad::Matrix::Zero(1, classes));
  const backbone::ParamList params{{"w", w, true}, {"b", b, false}};
  Adam opt(params, lr);
  Rng rng(seed);
  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled(labels.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch_size));
      ad::Matrix xb(static_cast<ad::Index>(end - start), x.cols());
      ad::Matrix yb = ad::Matrix::Zero(xb.rows(), classes);
      for (std::size_t i = start; i < end; ++i) {
        xb.row(static_cast<ad::Index>(i - start)) = x.row(static_cast<ad::Index>(order[i]));
        yb(static_cast<ad::Index>(i - start), labels[order[i]]) = 1.0;
      }
      ad::Tensor logits = ad::add_row(ad::matmul(ad::constant(xb), w), b);
      ad::backward(ad::soft_cross_entropy(logits, yb, 1.0));
      opt.step();
    }
  }
  return {w.value(), b.value()};
}

double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size()) throw ShapeError("dice: mask shapes differ");
  std::size_t a = 0, b = 0, both = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    a += p;
    b += t;
    both += p && t;
  }
  if (a + b == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(a + b);
}

backbone::ParamList SegHeadParams::parameters() const {
  backbone::ParamList out{{"lin_w", lin_w, true}, {"lin_b", lin_b, false}};
  for (std::size_t i = 0; i < conv_w.size(); ++i) {
    out.push_back({"conv" + std::to_string(i) + "_w", conv_w[i], true});
    out.push_back({"conv" + std::to_string(i) + "_b", conv_b[i], false});
  }
  out.push_back({"out_w", out_w, true});
  out.push_back({"out_b", out_b, false});
  return out;
}

SegHeadParams init_seg_head(int in_dim, int seg_dim, int grid_h, int grid_w, int classes, Rng& rng) {
  if (in_dim < 1 || seg_dim < 1 || grid_h < 1 || grid_w < 1 || classes < 2) {
    throw ConfigError("init_seg_head: invalid dimensions");
  }
  SegHeadParams h;
  h.grid_h = grid_h;
  h.grid_w = grid_w;
  h.lin_w = ad::parameter(backbone::trunc_normal(in_dim, seg_dim, 1.0 / std::sqrt(in_dim), rng));
  h.lin_b = ad::parameter(ad::Matrix::Zero(1, seg_dim));
  // 16 = 2^4 pixels per token side.
  for (int i = 0; i < 4; ++i) {
    h.conv_w.push_back(ad::parameter(backbone::trunc_normal(9 * seg_dim, seg_dim, std::sqrt(2.0 / (9 * seg_dim)), rng)));
    h.conv_b.push_back(ad::parameter(ad::Matrix::Zero(1, seg_dim)));
  }
  h.out_w = ad::parameter(backbone::trunc_normal(seg_dim, classes, 1.0 / std::sqrt(seg_dim), rng));
  h.out_b = ad::parameter(ad::Matrix::Zero(1, classes));
  return h;
}

ad::Matrix clip_token_features(const backbone::EncoderParams& encoder, const tokenizer::VideoClip& clip) {
  ad::NoGradGuard no_grad;
  clip.validate();
  const auto batch = tokenizer::tubify(clip);
  if (!(batch.grid == encoder.config.grid) || batch.token_dim() != encoder.config.token_dim) {
    throw GeometryError("segment: clip geometry does not match the encoder");
  }
  const auto positions = batch.position_indices();
  return backbone::encode(encoder, batch.tokens.front(), positions).tokens.value();
}

ad::Matrix frame_token_features(const ad::Matrix& clip_tokens, int frame, int grid_h, int grid_w) {
  const ad::Index per_slot = static_cast<ad::Index>(grid_h) * grid_w;
  const ad::Index slot = frame / tokenizer::kTubeFrames;
  if (frame < 0 || (slot + 1) * per_slot > clip_tokens.rows()) throw GeometryError("segment: frame outside the clip");
  return clip_tokens.middleRows(slot * per_slot, per_slot);
}

ad::Tensor seg_head_forward(const SegHeadParams& head, const ad::Matrix& frame_tokens) {
  if (frame_tokens.rows() != static_cast<ad::Index>(head.grid_h) * head.grid_w) {
    throw GeometryError("segment: token grid does not match the head");
  }
  ad::Tensor x = ad::add_row(ad::matmul(ad::constant(frame_tokens), head.lin_w), head.lin_b);
  ad::Index h = head.grid_h, w = head.grid_w;
  for (std::size_t i = 0; i < head.conv_w.size(); ++i) {
    x = ad::upsample2x(x, h, w);
    h *= 2;
    w *= 2;
    x = ad::relu(ad::add_row(ad::matmul(ad::im2col3x3(x, h, w), head.conv_w[i]), head.conv_b[i]));
  }
  return ad::add_row(ad::matmul(x, head.out_w), head.out_b);
}

ad::Tensor segment_forward(const backbone::EncoderParams& encoder, const tokenizer::VideoClip& clip, int frame,
                           const SegHeadParams& head) {
  const ad::Matrix tokens = clip_token_features(encoder, clip);
  return seg_head_forward(head, frame_token_features(tokens, frame, head.grid_h, head.grid_w));
}

std::vector<std::uint8_t> argmax_mask(const ad::Matrix& logits) {
  std::vector<std::uint8_t> out(static_cast<std::size_t>(logits.rows()));
  for (ad::Index r = 0; r < logits.rows(); ++r) {
    ad::Index best = 0;
    logits.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

double train_seg_head(SegHeadParams& head, const std::vector<SegSample>& train, int epochs, double lr,
                      std::uint64_t seed) {
  if (train.empty()) throw DataError("segmentation: no training frames");
  const auto params = head.parameters();
  Adam opt(params, lr);
  Rng rng(seed);
  const ad::Index classes = head.out_b.cols();
  constexpr std::size_t kBatch = 4;
  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled(train.size(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += kBatch) {
      const std::size_t end = std::min(order.size(), start + kBatch);
      for (std::size_t i = start; i < end; ++i) {
        const auto& s = train[order[i]];
        ad::Tensor logits = seg_head_forward(head, s.tokens);
        if (static_cast<std::size_t>(logits.rows()) != s.mask.size()) throw ShapeError("segmentation: mask size mismatch");
        ad::Matrix target = ad::Matrix::Zero(logits.rows(), classes);
        for (std::size_t p = 0; p < s.mask.size(); ++p) target(static_cast<ad::Index>(p), s.mask[p]) = 1.0;
        ad::Tensor loss = ad::soft_cross_entropy(logits, target, 1.0);
        epoch_loss += loss.item();
        ad::backward(loss);
      }
      opt.step(1.0 / static_cast<double>(end - start));
    }
    last = epoch_loss / static_cast<double>(train.size());
  }
  return last;
}

double evaluate_seg_head(const SegHeadParams& head, const std::vector<SegSample>& test) {
  if (test.empty()) throw DataError("segmentation: no evaluation frames");
  ad::NoGradGuard no_grad;
  double total = 0.0;
  for (const auto& s : test) total += dice(argmax_mask(seg_head_forward(head, s.tokens).value()), s.mask);
  return total / static_cast<double>(test.size());
}

std::vector<double> LinearRegressor::predict(const ad::Matrix& x) const {
  const ad::Matrix y = x * w;
  std::vector<double> out(static_cast<std::size_t>(y.rows()));
  for (ad::Index i = 0; i < y.rows(); ++i) out[static_cast<std::size_t>(i)] = y(i, 0) + b;
  return out;
}

LinearRegressor fit_ridge(const ad::Matrix& x, const std::vector<double>& y, double ridge) {
  if (x.rows() == 0) throw DataError("ef regression: empty data");
  if (static_cast<std::size_t>(x.rows()) != y.size()) throw ShapeError("ef regression: rows != targets");
  if (ridge < 0.0) throw ConfigError("ef regression: ridge must be >= 0");
  // Center so the bias stays unpenalized.
  const Eigen::RowVectorXd mean = x.colwise().mean();
  const double y_mean = std::accumulate(y.begin(), y.end(), 0.0) / static_cast<double>(y.size());
  const ad::Matrix xc = x.rowwise() - mean;
  Eigen::VectorXd yc(static_cast<Eigen::Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) yc(static_cast<Eigen::Index>(i)) = y[i] - y_mean;
  Eigen::MatrixXd gram = xc.transpose() * xc;
  gram.diagonal().array() += ridge * static_cast<double>(x.rows()) + 1e-12;
  const Eigen::VectorXd w = gram.ldlt().solve(xc.transpose() * yc);
  LinearRegressor r;
  r.w = w;
  r.b = y_mean - (mean * w)(0);
  return r;
}

EfResult regression_errors(const std::vector<double>& predictions, const std::vector<double>& targets) {
  if (predictions.size() != targets.size()) throw ShapeError("ef regression: prediction count mismatch");
  if (targets.empty()) throw DataError("ef regression: empty data");
  EfResult r;
  r.predictions = predictions;
  double abs_sum = 0.0, sq_sum = 0.0;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const double e = predictions[i] - targets[i];
    abs_sum += std::abs(e);
    sq_sum += e * e;
  }
  r.mae = abs_sum / static_cast<double>(targets.size());
  r.rmse = std::sqrt(sq_sum / static_cast<double>(targets.size()));
  return r;
}

double FinetuneRegressor::predict(const tokenizer::VideoClip& clip) const {
  const ad::Matrix z = extract_embedding(encoder, clip);
  return 100.0 * ((z * head_w.value())(0, 0) + head_b.value()(0, 0));
}

FinetuneRegressor finetune_regressor(const backbone::EncoderParams& encoder,
                                     const std::vector<tokenizer::VideoClip>& clips, const std::vector<double>& targets,
                                     int blocks, int epochs, double lr, std::uint64_t seed) {
  if (clips.empty()) throw DataError("ef regression: empty data");
  if (clips.size() != targets.size()) throw ShapeError("ef regression: clip count != targets");
  if (blocks < 1 || epochs < 1) throw ConfigError("ef regression: invalid finetune settings");
  FinetuneRegressor r;
  r.encoder = encoder.clone();
  const int depth = static_cast<int>(r.encoder.blocks.size());
  const int tuned = std::min(blocks, depth);
  const int frozen = depth - tuned;
  const double mean_target = std::accumulate(targets.begin(), targets.end(), 0.0) / static_cast<double>(targets.size());
  r.head_w = ad::parameter(ad::Matrix::Zero(r.encoder.config.width, 1));
  r.head_b = ad::parameter(ad::Matrix::Constant(1, 1, mean_target / 100.0));

  // Activations entering the first tuned block never change.
  std::vector<ad::Matrix> cached;
  {
    ad::NoGradGuard no_grad;
    for (const auto& clip : clips) {
      const auto batch = tokenizer::tubify(clip);
      if (!(batch.grid == r.encoder.config.grid)) throw GeometryError("ef regression: clip geometry mismatch");
      const auto positions = batch.position_indices();
      ad::Tensor x = backbone::embed(r.encoder, batch.tokens.front(), positions);
      x = backbone::run_blocks(std::span(r.encoder.blocks).first(static_cast<std::size_t>(frozen)), x,
                               r.encoder.config.heads);
      cached.push_back(x.value());
    }
  }

  backbone::ParamList params;
  for (int i = frozen; i < depth; ++i) {
    r.encoder.blocks[static_cast<std::size_t>(i)].collect("blocks." + std::to_string(i) + ".", params);
  }
  params.push_back({"head_w", r.head_w, true});
  params.push_back({"head_b", r.head_b, false});
  Adam opt(params, lr);
  const auto tail = std::span(r.encoder.blocks).subspan(static_cast<std::size_t>(frozen));
  const backbone::ParamList untouched{{"norm_g", r.encoder.norm_g, false}, {"norm_b", r.encoder.norm_b, false}};
  Rng rng(seed);
  constexpr std::size_t kBatch = 4;
  for (int e = 0; e < epochs; ++e) {
    const auto order = shuffled(clips.size(), rng);
    for (std::size_t start = 0; start < order.size(); start += kBatch) {
      const std::size_t end = std::min(order.size(), start + kBatch);
      for (std::size_t i = start; i < end; ++i) {
        ad::Tensor x = backbone::run_blocks(tail, ad::constant(cached[order[i]]), r.encoder.config.heads);
        x = ad::layer_norm(x, r.encoder.norm_g, r.encoder.norm_b);
        const ad::Index cls_row[] = {0};
        ad::Tensor pred = ad::add(ad::matmul(ad::gather_rows(x, cls_row), r.head_w), r.head_b);
        ad::backward(ad::mean_squared_error(pred, ad::Matrix::Constant(1, 1, targets[order[i]] / 100.0)));
      }
      opt.step(1.0 / static_cast<double>(end - start));
      backbone::zero_grads(untouched);
    }
  }
  return r;
}

void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set) {
  set.validate();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write embedding cache: " + path.string());
  auto pod = [&](const auto& v) { out.write(reinterpret_cast<const char*>(&v), sizeof v); };
  auto str = [&](const std::string& s) {
    pod(static_cast<std::uint64_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
  };
  out.write(kEmbMagic, sizeof kEmbMagic);
  pod(static_cast<std::uint64_t>(set.vectors.rows()));
  pod(static_cast<std::uint64_t>(set.vectors.cols()));
  str(set.split);
  out.write(reinterpret_cast<const char*>(set.vectors.data()),
            static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(set.vectors.size())));
  for (int l : set.labels) pod(static_cast<std::int32_t>(l));
  for (std::size_t i = 0; i < set.size(); ++i) pod(set.ef.empty() ? std::numeric_limits<double>::quiet_NaN() : set.ef[i]);
  for (const auto& id : set.video_ids) str(id);
  if (!out) throw IoError("failed writing embedding cache: " + path.string());
}

EmbeddingSet read_embeddings(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open embedding cache: " + path.string());
  auto pod = [&](auto& v) {
    in.read(reinterpret_cast<char*>(&v), sizeof v);
    if (!in) throw CorruptionError("truncated embedding cache: " + path.string());
  };
  auto str = [&]() {
    std::uint64_t n = 0;
    pod(n);
    if (n > (1u << 20)) throw CorruptionError("embedding cache string too long");
    std::string s(n, '\0');
    in.read(s.data(), static_cast<std::streamsize>(n));
    if (!in) throw CorruptionError("truncated embedding cache: " + path.string());
    return s;
  };
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kEmbMagic, sizeof magic) != 0) throw CorruptionError("not an embedding cache: " + path.string());
  std::uint64_t n = 0, d = 0;
  pod(n);
  pod(d);
  EmbeddingSet set;
  set.split = str();
  set.vectors.resize(static_cast<ad::Index>(n), static_cast<ad::Index>(d));
  in.read(reinterpret_cast<char*>(set.vectors.data()), static_cast<std::streamsize>(sizeof(double) * n * d));
  if (!in) throw CorruptionError("truncated embedding cache: " + path.string());
  set.labels.resize(n);
  for (auto& l : set.labels) {
    std::int32_t v = 0;
    pod(v);
    l = v;
  }
  set.ef.resize(n);
  for (auto& e : set.ef) pod(e);
  set.video_ids.resize(n);
  for (auto& id : set.video_ids) id = str();
  return set;
}

}  // namespace discovr::eval
