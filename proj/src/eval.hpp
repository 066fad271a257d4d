// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Frozen-backbone downstream protocols: embeddings, weighted kNN, linear
// probe, any-clip aggregation, metrics, segmentation and EF regression.

#pragma once

#include "autograd.hpp"
#include "backbone.hpp"
#include "tokenizer.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace discovr::eval {

enum class Protocol { knn, probe, segment, regress_ef };
enum class EmbeddingSource { teacher, student };
enum class F1Mode { macro, binary };
enum class EfMode { probe, finetune };
enum class KnnWeighting { exp, uniform };

std::string_view to_string(Protocol p);
std::string_view to_string(EmbeddingSource s);
std::string_view to_string(F1Mode m);
std::string_view to_string(EfMode m);
Protocol parse_protocol(std::string_view s);
EmbeddingSource parse_embedding_source(std::string_view s);
F1Mode parse_f1_mode(std::string_view s);
EfMode parse_ef_mode(std::string_view s);

struct EvalConfig {
  Protocol protocol = Protocol::knn;
  EmbeddingSource embedding_source = EmbeddingSource::teacher;
  F1Mode f1_mode = F1Mode::macro;
  std::uint64_t seed = 0;

  double knn_temp = 0.07;
  std::vector<int> knn_k_grid{1, 3, 5, 10, 20, 50, 100, 200};
  int knn_k = 0;  // 0 selects k on the validation split

  int probe_epochs = 30;
  double probe_lr = 1e-2;
  int probe_batch_size = 32;

  int seg_dim = 32;
  int seg_epochs = 15;
  double seg_lr = 2e-3;
  int seg_frames_per_video = 4;

  EfMode ef_mode = EfMode::probe;
  int ef_finetune_blocks = 3;
  int ef_epochs = 30;
  double ef_lr = 1e-3;
  double ef_ridge = 1e-3;

  void validate() const;
};

// Class ids: 0 normal, 1 abnormal.
inline constexpr int kNormal = 0;
inline constexpr int kAbnormal = 1;

struct EmbeddingSet {
  ad::Matrix vectors;  // n x D
  std::vector<int> labels;
  std::vector<std::string> video_ids;
  std::vector<double> ef;  // NaN when unknown
  std::string split;

  std::size_t size() const { return labels.size(); }
  void validate() const;
};

// Class-slot feature of the full, unmasked clip (1 x D, not normalized).
ad::Matrix extract_embedding(const backbone::EncoderParams& encoder, const tokenizer::VideoClip& clip);
ad::Matrix l2_normalized(const ad::Matrix& rows);

struct KnnVote {
  int label = kNormal;
  double abnormal_score = 0.0;  // abnormal share of the neighbor weight
};

KnnVote knn_classify(const EmbeddingSet& train, const ad::Matrix& query, int k, double temperature,
                     KnnWeighting weighting = KnnWeighting::exp);
std::vector<KnnVote> knn_classify_all(const EmbeddingSet& train, const ad::Matrix& queries, int k, double temperature,
                                      KnnWeighting weighting = KnnWeighting::exp);

// Abnormal iff any clip is abnormal; score is the maximum clip score.
std::pair<int, double> aggregate_video(const std::vector<int>& clip_preds, const std::vector<double>& clip_scores);

struct VideoPredictions {
  std::vector<std::string> video_ids;
  std::vector<int> labels;
  std::vector<int> preds;
  std::vector<double> scores;
};

// Groups clip predictions by video id in order of first appearance.
VideoPredictions aggregate_by_video(const EmbeddingSet& set, const std::vector<int>& clip_preds,
                                    const std::vector<double>& clip_scores);

struct MetricsReport {
  double accuracy = 0.0;
  double balanced_accuracy = 0.0;
  double precision = 0.0;  // abnormal class
  double recall = 0.0;     // abnormal class
  double f1 = 0.0;         // per f1_mode
  double f1_macro = 0.0;
  double f1_binary = 0.0;
  double auc = 0.0;
  std::int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  F1Mode f1_mode = F1Mode::macro;
};

double auc(const std::vector<double>& scores, const std::vector<int>& labels);
MetricsReport compute_metrics(const std::vector<int>& preds, const std::vector<double>& scores,
                              const std::vector<int>& labels, F1Mode f1_mode = F1Mode::macro);
double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels);

// k maximizing video-level balanced accuracy on `val`; ties go to the smaller k.
int select_k(const EmbeddingSet& train, const EmbeddingSet& val, const std::vector<int>& candidates,
             double temperature);

struct LinearClassifier {
  ad::Matrix w;  // D x C
  ad::Matrix b;  // 1 x C

  ad::Matrix probabilities(const ad::Matrix& x) const;
};

// Softmax regression trained with Adam on frozen features.
LinearClassifier linear_probe(const ad::Matrix& x, const std::vector<int>& labels, int epochs, double lr,
                              int batch_size, std::uint64_t seed);

// 2|A n B| / (|A| + |B|); two empty masks score 1.
double dice(const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& truth);

struct SegHeadParams {
  ad::Tensor lin_w, lin_b;  // D -> d_seg per token
  std::vector<ad::Tensor> conv_w, conv_b;  // 2x upsample + conv3x3 + ReLU blocks
  ad::Tensor out_w, out_b;  // 1x1 to class logits
  int grid_h = 0, grid_w = 0;

  backbone::ParamList parameters() const;
};

// Upsampling blocks bring a grid of 16-pixel tokens to full resolution.
SegHeadParams init_seg_head(int in_dim, int seg_dim, int grid_h, int grid_w, int classes, Rng& rng);

// Encoder tube features of one clip, (T/2 * gh * gw) x D, no class row.
ad::Matrix clip_token_features(const backbone::EncoderParams& encoder, const tokenizer::VideoClip& clip);
// Spatial features of the tube slot holding `frame`.
ad::Matrix frame_token_features(const ad::Matrix& clip_tokens, int frame, int grid_h, int grid_w);
// Per-pixel logits, (H * W) x classes, rows in (y, x) order.
ad::Tensor seg_head_forward(const SegHeadParams& head, const ad::Matrix& frame_tokens);
ad::Tensor segment_forward(const backbone::EncoderParams& encoder, const tokenizer::VideoClip& clip, int frame,
                           const SegHeadParams& head);
std::vector<std::uint8_t> argmax_mask(const ad::Matrix& logits);

struct SegSample {
  ad::Matrix tokens;  // frame token features
  std::vector<std::uint8_t> mask;
};

// Trains the head on frozen features; returns mean Dice of the foreground
// class on `test`.
double train_seg_head(SegHeadParams& head, const std::vector<SegSample>& train, int epochs, double lr,
                      std::uint64_t seed);
double evaluate_seg_head(const SegHeadParams& head, const std::vector<SegSample>& test);

struct EfResult {
  double mae = 0.0;
  double rmse = 0.0;
  std::vector<double> predictions;
};

// Ridge regression from features to EF with an unpenalized bias.
struct LinearRegressor {
  ad::Matrix w;  // D x 1
  double b = 0.0;

  std::vector<double> predict(const ad::Matrix& x) const;
};
LinearRegressor fit_ridge(const ad::Matrix& x, const std::vector<double>& y, double ridge);
EfResult regression_errors(const std::vector<double>& predictions, const std::vector<double>& targets);

// Fine-tunes the last `blocks` encoder blocks plus a linear head in place.
struct FinetuneRegressor {
  backbone::EncoderParams encoder;
  ad::Tensor head_w, head_b;

  double predict(const tokenizer::VideoClip& clip) const;
};
FinetuneRegressor finetune_regressor(const backbone::EncoderParams& encoder,
                                     const std::vector<tokenizer::VideoClip>& clips, const std::vector<double>& targets,
                                     int blocks, int epochs, double lr, std::uint64_t seed);

// Embedding cache: magic, n, D, split, rows, labels, ef, video ids.
void write_embeddings(const std::filesystem::path& path, const EmbeddingSet& set);
EmbeddingSet read_embeddings(const std::filesystem::path& path);

}  // namespace discovr::eval
