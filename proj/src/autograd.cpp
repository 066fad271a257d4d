// Copyright 2026 The DISCOVR Authors
// SPDX-License-Identifier: Apache-2.0

#include "autograd.hpp"

#include "errors.hpp"

#include <cmath>
#include <numbers>
#include <unordered_set>

namespace discovr::ad {

namespace {

thread_local bool g_grad_enabled = true;

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds a result node; records inputs and the backward closure only when a
// gradient can flow.
Tensor make_result(Matrix value, std::vector<std::shared_ptr<Node>> inputs, bool needs_grad,
                   std::function<void(Node&)> fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (needs_grad && g_grad_enabled) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward_fn = std::move(fn);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

}  // namespace

void Node::accumulate(const Matrix& g) {
  if (grad.size() == 0) {
    grad = g;
  } else {
    grad += g;
  }
}

double Tensor::item() const {
  if (rows() != 1 || cols() != 1) throw ShapeError("item() on non-scalar tensor");
  return node_->value(0, 0);
}

void Tensor::zero_grad() {
  if (node_->grad.size() != 0) node_->grad.setZero();
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor constant(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Tensor(std::move(node));
}

Tensor parameter(Matrix value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  node->grad = Matrix::Zero(node->value.rows(), node->value.cols());
  return Tensor(std::move(node));
}

Tensor detach(const Tensor& t) { return constant(t.value()); }

Tensor clone(const Tensor& t) { return t.requires_grad() ? parameter(t.value()) : constant(t.value()); }

void backward(const Tensor& loss) {
  if (loss.rows() != 1 || loss.cols() != 1) throw ShapeError("backward() needs a scalar loss");
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{loss.node().get(), 0}};
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && child->backward_fn && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->accumulate(Matrix::Ones(1, 1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->grad.size() == 0) continue;
    node->backward_fn(*node);
    // Intermediate gradients are not needed after propagation.
    node->grad.resize(0, 0);
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
  Matrix out = a.value() * b.value();
  auto na = a.node();
  auto nb = b.node();
  return make_result(std::move(out), {na, nb}, any_requires_grad({&a, &b}), [na, nb](Node& self) {
    if (na->requires_grad) na->accumulate(self.grad * nb->value.transpose());
    if (nb->requires_grad) nb->accumulate(na->value.transpose() * self.grad);
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
  Matrix out = a.value() * b.value().transpose();
  auto na = a.node();
  auto nb = b.node();
  return make_result(std::move(out), {na, nb}, any_requires_grad({&a, &b}), [na, nb](Node& self) {
    if (na->requires_grad) na->accumulate(self.grad * nb->value);
    if (nb->requires_grad) nb->accumulate(self.grad.transpose() * na->value);
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto na = a.node();
  auto nb = b.node();
  return make_result(a.value() + b.value(), {na, nb}, any_requires_grad({&a, &b}), [na, nb](Node& self) {
    if (na->requires_grad) na->accumulate(self.grad);
    if (nb->requires_grad) nb->accumulate(self.grad);
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto na = a.node();
  auto nb = b.node();
  return make_result(a.value() - b.value(), {na, nb}, any_requires_grad({&a, &b}), [na, nb](Node& self) {
    if (na->requires_grad) na->accumulate(self.grad);
    if (nb->requires_grad) nb->accumulate(-self.grad);
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto na = a.node();
  auto nb = b.node();
  Matrix out = a.value().cwiseProduct(b.value());
  return make_result(std::move(out), {na, nb}, any_requires_grad({&a, &b}), [na, nb](Node& self) {
    if (na->requires_grad) na->accumulate(self.grad.cwiseProduct(nb->value));
    if (nb->requires_grad) nb->accumulate(self.grad.cwiseProduct(na->value));
  });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
  Matrix out = a.value().rowwise() + row.value().row(0);
  auto na = a.node();
  auto nr = row.node();
  return make_result(std::move(out), {na, nr}, any_requires_grad({&a, &row}), [na, nr](Node& self) {
    if (na->requires_grad) na->accumulate(self.grad);
    if (nr->requires_grad) nr->accumulate(self.grad.colwise().sum());
  });
}

Tensor scale(const Tensor& a, double s) {
  auto na = a.node();
  return make_result(a.value() * s, {na}, a.requires_grad(), [na, s](Node& self) {
    na->accumulate(self.grad * s);
  });
}

Tensor gelu(const Tensor& a) {
  // tanh approximation; smooth everywhere, which the finite-difference
  // checks rely on.
  const Matrix& x = a.value();
  Matrix inner = (kGeluC * (x.array() + 0.044715 * x.array().cube())).matrix();
  Matrix th = inner.array().tanh().matrix();
  Matrix out = (0.5 * x.array() * (1.0 + th.array())).matrix();
  auto na = a.node();
  return make_result(std::move(out), {na}, a.requires_grad(), [na, th](Node& self) {
    const auto& xv = na->value.array();
    auto dinner = kGeluC * (1.0 + 3.0 * 0.044715 * xv.square());
    Matrix d = (0.5 * (1.0 + th.array()) + 0.5 * xv * (1.0 - th.array().square()) * dinner).matrix();
    na->accumulate(self.grad.cwiseProduct(d));
  });
}

Tensor relu(const Tensor& a) {
  Matrix out = a.value().cwiseMax(0.0);
  auto na = a.node();
  return make_result(std::move(out), {na}, a.requires_grad(), [na](Node& self) {
    Matrix d = (na->value.array() > 0.0).cast<double>().matrix();
    na->accumulate(self.grad.cwiseProduct(d));
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const Index n = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != n || beta.rows() != 1 || beta.cols() != n) {
    throw ShapeError("layer_norm: affine shape mismatch");
  }
  const Matrix& xv = x.value();
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv_std(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mean) * inv_std(r);
  }
  Matrix out = (xhat.array().rowwise() * gamma.value().row(0).array()).matrix();
  out.rowwise() += beta.value().row(0);
  auto nx = x.node();
  auto ng = gamma.node();
  auto nb = beta.node();
  return make_result(
      std::move(out), {nx, ng, nb}, any_requires_grad({&x, &gamma, &beta}),
      [nx, ng, nb, xhat, inv_std, n](Node& self) {
        const Matrix& g = self.grad;
        if (ng->requires_grad) ng->accumulate(g.cwiseProduct(xhat).colwise().sum());
        if (nb->requires_grad) nb->accumulate(g.colwise().sum());
        if (nx->requires_grad) {
          Matrix gh = (g.array().rowwise() * ng->value.row(0).array()).matrix();
          Matrix dx(g.rows(), n);
          for (Index r = 0; r < g.rows(); ++r) {
            const double mean_gh = gh.row(r).mean();
            const double mean_ghx = gh.row(r).dot(xhat.row(r)) / static_cast<double>(n);
            dx.row(r) = inv_std(r) * (gh.row(r).array() - mean_gh - xhat.row(r).array() * mean_ghx);
          }
          nx->accumulate(dx);
        }
      });
}

Matrix softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

Matrix log_softmax_rows(const Matrix& x) {
  Matrix out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    const double lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  Matrix p = softmax_rows(x.value());
  auto nx = x.node();
  Matrix p_copy = p;
  return make_result(std::move(p), {nx}, x.requires_grad(), [nx, p_copy](Node& self) {
    Matrix dx(p_copy.rows(), p_copy.cols());
    for (Index r = 0; r < p_copy.rows(); ++r) {
      const double dot = self.grad.row(r).dot(p_copy.row(r));
      dx.row(r) = p_copy.row(r).array() * (self.grad.row(r).array() - dot);
    }
    nx->accumulate(dx);
  });
}

Tensor l2_normalize_rows(const Tensor& x, double eps) {
  const Matrix& xv = x.value();
  Eigen::VectorXd norms(xv.rows());
  Matrix out(xv.rows(), xv.cols());
  for (Index r = 0; r < xv.rows(); ++r) {
    norms(r) = std::max(xv.row(r).norm(), eps);
    out.row(r) = xv.row(r) / norms(r);
  }
  auto nx = x.node();
  Matrix y = out;
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx, y, norms](Node& self) {
    Matrix dx(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      const double dot = self.grad.row(r).dot(y.row(r));
      dx.row(r) = (self.grad.row(r) - dot * y.row(r)) / norms(r);
    }
    nx->accumulate(dx);
  });
}

Tensor gather_rows(const Tensor& x, std::span<const Index> rows) {
  Matrix out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Index>(i)) = x.value().row(rows[i]);
  }
  auto nx = x.node();
  std::vector<Index> idx(rows.begin(), rows.end());
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx, idx](Node& self) {
    Matrix dx = Matrix::Zero(nx->value.rows(), nx->value.cols());
    for (std::size_t i = 0; i < idx.size(); ++i) dx.row(idx[i]) += self.grad.row(static_cast<Index>(i));
    nx->accumulate(dx);
  });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Index total = 0;
  bool needs = false;
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) {
    if (p.cols() != parts[0].cols()) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
    needs = needs || p.requires_grad();
    nodes.push_back(p.node());
  }
  Matrix out(total, parts[0].cols());
  Index at = 0;
  for (const auto& p : parts) {
    out.middleRows(at, p.rows()) = p.value();
    at += p.rows();
  }
  auto captured = nodes;
  return make_result(std::move(out), std::move(nodes), needs, [captured](Node& self) {
    Index offset = 0;
    for (const auto& n : captured) {
      if (n->requires_grad) n->accumulate(self.grad.middleRows(offset, n->value.rows()));
      offset += n->value.rows();
    }
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  Index total = 0;
  bool needs = false;
  std::vector<std::shared_ptr<Node>> nodes;
  for (const auto& p : parts) {
    if (p.rows() != parts[0].rows()) throw ShapeError("concat_cols: row mismatch");
    total += p.cols();
    needs = needs || p.requires_grad();
    nodes.push_back(p.node());
  }
  Matrix out(parts[0].rows(), total);
  Index at = 0;
  for (const auto& p : parts) {
    out.middleCols(at, p.cols()) = p.value();
    at += p.cols();
  }
  auto captured = nodes;
  return make_result(std::move(out), std::move(nodes), needs, [captured](Node& self) {
    Index offset = 0;
    for (const auto& n : captured) {
      if (n->requires_grad) n->accumulate(self.grad.middleCols(offset, n->value.cols()));
      offset += n->value.cols();
    }
  });
}

Tensor slice_cols(const Tensor& x, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > x.cols()) throw ShapeError("slice_cols: out of range");
  Matrix out = x.value().middleCols(start, count);
  auto nx = x.node();
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx, start, count](Node& self) {
    Matrix dx = Matrix::Zero(nx->value.rows(), nx->value.cols());
    dx.middleCols(start, count) = self.grad;
    nx->accumulate(dx);
  });
}

Tensor mean_rows(const Tensor& x) {
  if (x.rows() == 0) throw ShapeError("mean_rows: empty input");
  Matrix out = x.value().colwise().mean();
  auto nx = x.node();
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx](Node& self) {
    const double inv = 1.0 / static_cast<double>(nx->value.rows());
    Matrix dx = self.grad.replicate(nx->value.rows(), 1) * inv;
    nx->accumulate(dx);
  });
}

Tensor sum_all(const Tensor& x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  auto nx = x.node();
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx](Node& self) {
    nx->accumulate(Matrix::Constant(nx->value.rows(), nx->value.cols(), self.grad(0, 0)));
  });
}

Tensor soft_cross_entropy(const Tensor& logits, const Matrix& target, double inv_temp) {
  if (logits.rows() != target.rows() || logits.cols() != target.cols()) {
    throw ShapeError("soft_cross_entropy: target shape mismatch");
  }
  if (logits.rows() == 0) throw ShapeError("soft_cross_entropy: empty batch");
  Matrix scaled = logits.value() * inv_temp;
  Matrix logp = log_softmax_rows(scaled);
  const double rows = static_cast<double>(logits.rows());
  Matrix out(1, 1);
  out(0, 0) = -(target.cwiseProduct(logp)).sum() / rows;
  auto nl = logits.node();
  return make_result(std::move(out), {nl}, logits.requires_grad(), [nl, logp, target, inv_temp, rows](Node& self) {
    Matrix p = logp.array().exp().matrix();
    Eigen::VectorXd mass = target.rowwise().sum();
    Matrix d = p.array().colwise() * mass.array();
    d -= target;
    nl->accumulate(d * (self.grad(0, 0) * inv_temp / rows));
  });
}

Tensor mean_squared_error(const Tensor& pred, const Matrix& target) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols()) throw ShapeError("mse: shape mismatch");
  Matrix diff = pred.value() - target;
  const double n = static_cast<double>(diff.size());
  Matrix out(1, 1);
  out(0, 0) = diff.squaredNorm() / n;
  auto np = pred.node();
  return make_result(std::move(out), {np}, pred.requires_grad(), [np, diff, n](Node& self) {
    np->accumulate(diff * (2.0 * self.grad(0, 0) / n));
  });
}

Tensor im2col3x3(const Tensor& x, Index height, Index width) {
  if (x.rows() != height * width) throw ShapeError("im2col3x3: pixel count mismatch");
  const Index c = x.cols();
  Matrix out = Matrix::Zero(height * width, 9 * c);
  for (Index y = 0; y < height; ++y) {
    for (Index xx = 0; xx < width; ++xx) {
      for (Index k = 0; k < 9; ++k) {
        const Index sy = y + k / 3 - 1;
        const Index sx = xx + k % 3 - 1;
        if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
        out.block(y * width + xx, k * c, 1, c) = x.value().row(sy * width + sx);
      }
    }
  }
  auto nx = x.node();
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx, height, width, c](Node& self) {
    Matrix dx = Matrix::Zero(height * width, c);
    for (Index y = 0; y < height; ++y) {
      for (Index xx = 0; xx < width; ++xx) {
        for (Index k = 0; k < 9; ++k) {
          const Index sy = y + k / 3 - 1;
          const Index sx = xx + k % 3 - 1;
          if (sy < 0 || sy >= height || sx < 0 || sx >= width) continue;
          dx.row(sy * width + sx) += self.grad.block(y * width + xx, k * c, 1, c);
        }
      }
    }
    nx->accumulate(dx);
  });
}

Tensor upsample2x(const Tensor& x, Index height, Index width) {
  if (x.rows() != height * width) throw ShapeError("upsample2x: pixel count mismatch");
  const Index out_w = 2 * width;
  Matrix out(4 * height * width, x.cols());
  for (Index y = 0; y < 2 * height; ++y) {
    for (Index xx = 0; xx < out_w; ++xx) {
      out.row(y * out_w + xx) = x.value().row((y / 2) * width + xx / 2);
    }
  }
  auto nx = x.node();
  return make_result(std::move(out), {nx}, x.requires_grad(), [nx, height, width, out_w](Node& self) {
    Matrix dx = Matrix::Zero(height * width, nx->value.cols());
    for (Index y = 0; y < 2 * height; ++y) {
      for (Index xx = 0; xx < out_w; ++xx) {
        dx.row((y / 2) * width + xx / 2) += self.grad.row(y * out_w + xx);
      }
    }
    nx->accumulate(dx);
  });
}

}  // namespace discovr::ad
