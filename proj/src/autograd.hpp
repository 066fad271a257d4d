// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode automatic differentiation over row-major double
// matrices. Every value is 2-D; vectors are 1xN rows and scalars are 1x1.
// A graph is recorded while grad mode is enabled and at least one input
// requires a gradient; parameters are leaves whose gradient buffers persist
// across graphs until zero_grad().

#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace discovr::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void accumulate(const Matrix& g);
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  // Empty matrix when no gradient has reached this node.
  const Matrix& grad() const { return node_->grad; }
  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }
  double item() const;

  void zero_grad();
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Grad recording is on by default; NoGradGuard disables it for its scope on
// the current thread.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

Tensor constant(Matrix value);
Tensor parameter(Matrix value);
Tensor detach(const Tensor& t);
// Fresh leaf with copied value and the same requires_grad flag.
Tensor clone(const Tensor& t);

// Runs reverse accumulation from a 1x1 tensor.
void backward(const Tensor& loss);

// Linear algebra.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T

// Elementwise / broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_row(const Tensor& a, const Tensor& row);  // broadcast 1xC over rows
Tensor scale(const Tensor& a, double s);
Tensor gelu(const Tensor& a);
Tensor relu(const Tensor& a);

// Row-wise normalizations.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
Tensor softmax_rows(const Tensor& x);
Tensor l2_normalize_rows(const Tensor& x, double eps = 1e-12);

// Structural.
Tensor gather_rows(const Tensor& x, std::span<const Index> rows);
Tensor concat_rows(std::span<const Tensor> parts);
Tensor concat_cols(std::span<const Tensor> parts);
Tensor slice_cols(const Tensor& x, Index start, Index count);
Tensor mean_rows(const Tensor& x);
Tensor sum_all(const Tensor& x);

// Soft-target cross entropy: mean over rows of -sum_j target[j] *
// log_softmax(logits * inv_temp)[j]. The target is a constant.
Tensor soft_cross_entropy(const Tensor& logits, const Matrix& target, double inv_temp);
// mean((pred - target)^2) over all entries; target constant.
Tensor mean_squared_error(const Tensor& pred, const Matrix& target);

// Image ops on feature maps stored as (height*width) x channels.
Tensor im2col3x3(const Tensor& x, Index height, Index width);
Tensor upsample2x(const Tensor& x, Index height, Index width);

// Numerically stable row-wise helpers on plain matrices.
Matrix softmax_rows(const Matrix& x);
Matrix log_softmax_rows(const Matrix& x);

}  // namespace discovr::ad
