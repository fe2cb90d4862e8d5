// Copyright (c) 2026 The dpmc Authors
// SPDX-License-Identifier: Apache-2.0
//
// Dense float64 tensors plus a reverse-mode tape. The op set is exactly what
// the layered classifier and its training losses need: matmul, additions,
// gelu, layernorm, softmax, scalar scaling, mask multiply and the two
// cross-entropy losses. Values are immutable once a node is created; only
// gradient buffers accumulate. One Tape per forward/backward pass; tapes on
// different threads are independent.

#pragma once

#include <array>
#include <deque>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "dpmc/error.hpp"

namespace dpmc {

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::size_t> shape)
      : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != count(shape_)) {
      throw ShapeError("tensor data length does not match shape");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  static Tensor matrix(std::size_t r, std::size_t c, std::vector<double> data) {
    return Tensor({r, c}, std::move(data));
  }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  bool is_scalar() const { return data_.size() == 1; }

  std::size_t rows() const { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const { return shape_.empty() ? 0 : shape_.back(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * cols() + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * cols() + j]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  std::string shape_str() const {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      os << shape_[i] << (i + 1 < shape_.size() ? "x" : "");
    }
    os << ']';
    return os.str();
  }

 private:
  static std::size_t count(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return shape.empty() ? 0 : n;
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

/// Handle to a node on a Tape.
struct Var {
  std::int32_t id = -1;
  bool valid() const { return id >= 0; }
};

namespace detail {

// c[m x n] += a[m x k] * b[k x n]
inline void mm_acc_nn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m x k] += a[m x n] * b^T, b stored [k x n]
inline void mm_acc_nt(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    double* crow = c + i * k;
    for (std::size_t l = 0; l < k; ++l) {
      const double* brow = b + l * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      crow[l] += acc;
    }
  }
}

// c[k x n] += a^T * b, a stored [m x k], b stored [m x n]
inline void mm_acc_tn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    const double* brow = b + i * n;
    for (std::size_t l = 0; l < k; ++l) {
      const double av = arow[l];
      double* crow = c + l * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

inline double logsumexp_row(const double* z, std::size_t n) {
  double mx = z[0];
  for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, z[j]);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(z[j] - mx);
  return mx + std::log(s);
}

constexpr double kGeluCoef = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;
constexpr double kLayerNormEps = 1e-5;

}  // namespace detail

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers an externally owned tensor (e.g. a model weight). The caller
  /// must keep `value` alive and unchanged until the tape is destroyed.
  Var leaf(const Tensor& value, bool requires_grad) {
    Node node;
    node.borrowed = &value;
    node.needs_grad = requires_grad;
    node.op = "leaf";
    return push(std::move(node));
  }

  /// Registers a tape-owned constant; no gradient ever flows into it.
  Var constant(Tensor value) {
    Node node;
    node.owned = std::move(value);
    node.needs_grad = false;
    node.op = "const";
    return push(std::move(node));
  }

  const Tensor& value(Var v) const {
    const Node& n = node(v.id);
    return n.borrowed ? *n.borrowed : n.owned;
  }

  /// Gradient of the last backward() target w.r.t. `v` (zeros if none flowed).
  const Tensor& grad(Var v) {
    return grad_of(v.id);
  }

  Var matmul(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (ta.shape().size() != 2 || tb.shape().size() != 2 ||
        ta.cols() != tb.rows()) {
      throw ShapeError("matmul: incompatible shapes " + ta.shape_str() + " x " +
                       tb.shape_str());
    }
    const std::size_t m = ta.rows(), k = ta.cols(), n = tb.cols();
    Tensor out({m, n});
    detail::mm_acc_nn(ta.data(), tb.data(), out.data(), m, k, n);
    return emit("matmul", std::move(out), {a, b}, [m, k, n](Tape& t, Node& self) {
      const Tensor& up = self.grad;
      const Tensor& ta = t.value(Var{self.in[0]});
      const Tensor& tb = t.value(Var{self.in[1]});
      if (t.needs(self.in[0])) {
        detail::mm_acc_nt(up.data(), tb.data(), t.grad_of(self.in[0]).data(), m, n, k);
      }
      if (t.needs(self.in[1])) {
        detail::mm_acc_tn(ta.data(), up.data(), t.grad_of(self.in[1]).data(), m, k, n);
      }
    });
  }

  Var add(Var a, Var b) {
    const Tensor& ta = value(a);
    const Tensor& tb = value(b);
    if (!ta.same_shape(tb)) {
      throw ShapeError("add: shape mismatch " + ta.shape_str() + " vs " +
                       tb.shape_str());
    }
    Tensor out(ta.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = ta[i] + tb[i];
    return emit("add", std::move(out), {a, b}, [](Tape& t, Node& self) {
      for (int s = 0; s < 2; ++s) {
        if (!t.needs(self.in[s])) continue;
        Tensor& g = t.grad_of(self.in[s]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
    });
  }

  /// Adds a length-c row vector to every row of an [r x c] matrix.
  Var add_row(Var m, Var row) {
    const Tensor& tm = value(m);
    const Tensor& tr = value(row);
    if (tm.shape().size() != 2 || tr.size() != tm.cols()) {
      throw ShapeError("add_row: bias length " + tr.shape_str() +
                       " does not match " + tm.shape_str());
    }
    const std::size_t r = tm.rows(), c = tm.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = tm.at(i, j) + tr[j];
    }
    return emit("add_row", std::move(out), {m, row}, [r, c](Tape& t, Node& self) {
      if (t.needs(self.in[0])) {
        Tensor& g = t.grad_of(self.in[0]);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
      }
      if (t.needs(self.in[1])) {
        Tensor& g = t.grad_of(self.in[1]);
        for (std::size_t i = 0; i < r; ++i) {
          for (std::size_t j = 0; j < c; ++j) g[j] += self.grad.at(i, j);
        }
      }
    });
  }

  /// Gaussian error linear unit, tanh approximation (smooth everywhere).
  Var gelu(Var x) {
    const Tensor& tx = value(x);
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      const double v = tx[i];
      const double inner = detail::kGeluCoef * (v + detail::kGeluCubic * v * v * v);
      out[i] = 0.5 * v * (1.0 + std::tanh(inner));
    }
    return emit("gelu", std::move(out), {x}, [](Tape& t, Node& self) {
      if (!t.needs(self.in[0])) return;
      const Tensor& tx = t.value(Var{self.in[0]});
      Tensor& g = t.grad_of(self.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = tx[i];
        const double inner = detail::kGeluCoef * (v + detail::kGeluCubic * v * v * v);
        const double th = std::tanh(inner);
        const double sech2 = 1.0 - th * th;
        const double dinner = detail::kGeluCoef * (1.0 + 3.0 * detail::kGeluCubic * v * v);
        g[i] += self.grad[i] * (0.5 * (1.0 + th) + 0.5 * v * sech2 * dinner);
      }
    });
  }

  /// Row-wise layer normalization without learned gain/bias.
  Var layer_norm(Var x) {
    const Tensor& tx = value(x);
    if (tx.shape().size() != 2) {
      throw ShapeError("layer_norm: expected 2-D input, got " + tx.shape_str());
    }
    const std::size_t r = tx.rows(), c = tx.cols();
    Tensor out({r, c});
    Tensor inv_std({r});
    for (std::size_t i = 0; i < r; ++i) {
      double mu = 0.0;
      for (std::size_t j = 0; j < c; ++j) mu += tx.at(i, j);
      mu /= static_cast<double>(c);
      double var = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double d = tx.at(i, j) - mu;
        var += d * d;
      }
      var /= static_cast<double>(c);
      const double s = 1.0 / std::sqrt(var + detail::kLayerNormEps);
      inv_std[i] = s;
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) = (tx.at(i, j) - mu) * s;
    }
    Tensor norm = out;  // saved activation
    return emit("layer_norm", std::move(out), {x},
                [norm = std::move(norm), inv_std = std::move(inv_std), r,
                 c](Tape& t, Node& self) {
                  if (!t.needs(self.in[0])) return;
                  Tensor& g = t.grad_of(self.in[0]);
                  for (std::size_t i = 0; i < r; ++i) {
                    double mean_dy = 0.0, mean_dyy = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      const double dy = self.grad.at(i, j);
                      mean_dy += dy;
                      mean_dyy += dy * norm.at(i, j);
                    }
                    mean_dy /= static_cast<double>(c);
                    mean_dyy /= static_cast<double>(c);
                    for (std::size_t j = 0; j < c; ++j) {
                      const double dy = self.grad.at(i, j);
                      g.at(i, j) += inv_std[i] *
                                    (dy - mean_dy - norm.at(i, j) * mean_dyy);
                    }
                  }
                });
  }

  /// Row-wise softmax with max subtraction.
  Var softmax(Var x) {
    const Tensor& tx = value(x);
    if (tx.shape().size() != 2) {
      throw ShapeError("softmax: expected 2-D input, got " + tx.shape_str());
    }
    const std::size_t r = tx.rows(), c = tx.cols();
    Tensor out({r, c});
    for (std::size_t i = 0; i < r; ++i) {
      double mx = tx.at(i, 0);
      for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, tx.at(i, j));
      double sum = 0.0;
      for (std::size_t j = 0; j < c; ++j) {
        const double e = std::exp(tx.at(i, j) - mx);
        out.at(i, j) = e;
        sum += e;
      }
      for (std::size_t j = 0; j < c; ++j) out.at(i, j) /= sum;
    }
    Tensor probs = out;
    return emit("softmax", std::move(out), {x},
                [probs = std::move(probs), r, c](Tape& t, Node& self) {
                  if (!t.needs(self.in[0])) return;
                  Tensor& g = t.grad_of(self.in[0]);
                  for (std::size_t i = 0; i < r; ++i) {
                    double dot = 0.0;
                    for (std::size_t j = 0; j < c; ++j) {
                      dot += self.grad.at(i, j) * probs.at(i, j);
                    }
                    for (std::size_t j = 0; j < c; ++j) {
                      g.at(i, j) += probs.at(i, j) * (self.grad.at(i, j) - dot);
                    }
                  }
                });
  }

  Var scale(Var x, double c) {
    const Tensor& tx = value(x);
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = c * tx[i];
    return emit("scale", std::move(out), {x}, [c](Tape& t, Node& self) {
      if (!t.needs(self.in[0])) return;
      Tensor& g = t.grad_of(self.in[0]);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += c * self.grad[i];
    });
  }

  /// Elementwise multiply by a constant 0/1 keep mask. No gradient reaches
  /// dropped coordinates.
  Var mask_mul(Var x, std::vector<std::uint8_t> keep) {
    const Tensor& tx = value(x);
    if (keep.size() != tx.size()) {
      throw ShapeError("mask_mul: mask length does not match tensor size");
    }
    Tensor out(tx.shape());
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] = keep[i] ? tx[i] : 0.0;
    }
    return emit("mask_mul", std::move(out), {x},
                [keep = std::move(keep)](Tape& t, Node& self) {
                  if (!t.needs(self.in[0])) return;
                  Tensor& g = t.grad_of(self.in[0]);
                  for (std::size_t i = 0; i < g.size(); ++i) {
                    if (keep[i]) g[i] += self.grad[i];
                  }
                });
  }

  /// Mean over the batch of -log softmax(logits)[target].
  Var cross_entropy(Var logits, std::span<const int> targets) {
    const Tensor& tz = value(logits);
    if (tz.shape().size() != 2 || tz.rows() != targets.size()) {
      throw ShapeError("cross_entropy: logits " + tz.shape_str() +
                       " vs " + std::to_string(targets.size()) + " targets");
    }
    const std::size_t b = tz.rows(), k = tz.cols();
    for (std::size_t i = 0; i < b; ++i) {
      if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= k) {
        throw ShapeError("cross_entropy: class index " +
                         std::to_string(targets[i]) + " out of range at row " +
                         std::to_string(i));
      }
    }
    std::vector<int> tgt(targets.begin(), targets.end());
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double lse = detail::logsumexp_row(tz.data() + i * k, k);
      loss += lse - tz.at(i, static_cast<std::size_t>(tgt[i]));
    }
    loss /= static_cast<double>(b);
    return emit("cross_entropy", Tensor::scalar(loss), {logits},
                [tgt = std::move(tgt), b, k](Tape& t, Node& self) {
                  if (!t.needs(self.in[0])) return;
                  const double up = self.grad[0] / static_cast<double>(b);
                  const Tensor& tz = t.value(Var{self.in[0]});
                  Tensor& g = t.grad_of(self.in[0]);
                  for (std::size_t i = 0; i < b; ++i) {
                    double mx = tz.at(i, 0);
                    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, tz.at(i, j));
                    double sum = 0.0;
                    for (std::size_t j = 0; j < k; ++j) sum += std::exp(tz.at(i, j) - mx);
                    for (std::size_t j = 0; j < k; ++j) {
                      const double p = std::exp(tz.at(i, j) - mx) / sum;
                      const double onehot =
                          (static_cast<std::size_t>(tgt[i]) == j) ? 1.0 : 0.0;
                      g.at(i, j) += up * (p - onehot);
                    }
                  }
                });
  }

  /// Mean over the batch of -sum_j t_j * log softmax(logits)_j. The target
  /// distribution is a constant: no gradient flows into it.
  Var soft_cross_entropy(const Tensor& target_probs, Var logits) {
    const Tensor& tz = value(logits);
    if (!target_probs.same_shape(tz)) {
      throw ShapeError("soft_cross_entropy: target " + target_probs.shape_str() +
                       " vs logits " + tz.shape_str());
    }
    const std::size_t b = tz.rows(), k = tz.cols();
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += target_probs.at(i, j);
      if (std::abs(s - 1.0) > 1e-9) {
        throw ShapeError("soft_cross_entropy: target row " + std::to_string(i) +
                         " sums to " + std::to_string(s) + ", expected 1");
      }
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double lse = detail::logsumexp_row(tz.data() + i * k, k);
      for (std::size_t j = 0; j < k; ++j) {
        loss += target_probs.at(i, j) * (lse - tz.at(i, j));
      }
    }
    loss /= static_cast<double>(b);
    Tensor tp = target_probs;
    return emit("soft_cross_entropy", Tensor::scalar(loss), {logits},
                [tp = std::move(tp), b, k](Tape& t, Node& self) {
                  if (!t.needs(self.in[0])) return;
                  const double up = self.grad[0] / static_cast<double>(b);
                  const Tensor& tz = t.value(Var{self.in[0]});
                  Tensor& g = t.grad_of(self.in[0]);
                  for (std::size_t i = 0; i < b; ++i) {
                    double mx = tz.at(i, 0);
                    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, tz.at(i, j));
                    double sum = 0.0;
                    for (std::size_t j = 0; j < k; ++j) sum += std::exp(tz.at(i, j) - mx);
                    for (std::size_t j = 0; j < k; ++j) {
                      const double p = std::exp(tz.at(i, j) - mx) / sum;
                      g.at(i, j) += up * (p - tp.at(i, j));
                    }
                  }
                });
  }

  /// Reverse pass from a scalar root. Nodes are visited in reverse creation
  /// order, which is a reverse topological order of the DAG; each reachable
  /// node is processed exactly once.
  void backward(Var root) {
    const Tensor& rv = value(root);
    if (!rv.is_scalar()) {
      throw ShapeError("backward: root must be scalar, got " + rv.shape_str());
    }
    std::vector<char> reachable(nodes_.size(), 0);
    std::vector<std::int32_t> stack{root.id};
    reachable[static_cast<std::size_t>(root.id)] = 1;
    while (!stack.empty()) {
      const std::int32_t id = stack.back();
      stack.pop_back();
      for (const std::int32_t in : nodes_[static_cast<std::size_t>(id)].in) {
        if (in >= 0 && !reachable[static_cast<std::size_t>(in)]) {
          reachable[static_cast<std::size_t>(in)] = 1;
          stack.push_back(in);
        }
      }
    }
    grad_of(root.id)[0] = 1.0;
    for (std::int32_t id = root.id; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (reachable[static_cast<std::size_t>(id)] && n.needs_grad && n.backprop) {
        n.backprop(*this, n);
      }
    }
  }

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    const Tensor* borrowed = nullptr;
    Tensor owned;
    Tensor grad;
    bool needs_grad = false;
    std::array<std::int32_t, 2> in{{-1, -1}};
    std::function<void(Tape&, Node&)> backprop;
    const char* op = "";
  };

  const Node& node(std::int32_t id) const {
    return nodes_[static_cast<std::size_t>(id)];
  }

  bool needs(std::int32_t id) const {
    return id >= 0 && node(id).needs_grad;
  }

  Tensor& grad_of(std::int32_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.size() == 0) {
      n.grad = Tensor(n.borrowed ? n.borrowed->shape() : n.owned.shape());
    }
    return n.grad;
  }

  Var push(Node node) {
    nodes_.push_back(std::move(node));
    return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  template <typename Backprop>
  Var emit(const char* op, Tensor out, std::initializer_list<Var> inputs,
           Backprop&& backprop) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      if (!std::isfinite(out[i])) {
        throw NonFiniteError(std::string(op) + " produced a non-finite value");
      }
    }
    Node node;
    node.owned = std::move(out);
    node.op = op;
    std::size_t slot = 0;
    for (const Var v : inputs) {
      node.in[slot++] = v.id;
      node.needs_grad = node.needs_grad || needs(v.id);
    }
    if (node.needs_grad) {
      node.backprop = std::forward<Backprop>(backprop);
    }
    return push(std::move(node));
  }

  // deque: node references stay valid while later ops append.
  std::deque<Node> nodes_;
};

}  // namespace dpmc
