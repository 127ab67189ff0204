/* Copyright 2026 The Lanepipe Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/
//
// Dense row-major tensors with reverse-mode differentiation, covering exactly
// the operations a small transformer encoder needs. Scalar type is a template
// parameter: float for training runs, double for numeric test oracles.
//
// Values are immutable once produced by an op; gradients are written only by
// backward(), which must run on a single thread. Summation order inside every
// op is fixed (left-to-right over the contracted index), so repeated runs with
// identical inputs are bit-identical within one precision mode.

#ifndef LANEPIPE_TENSOR_HPP_
#define LANEPIPE_TENSOR_HPP_

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "lanepipe/error.hpp"

namespace lanepipe {

// Tracks live bytes of tensor payload buffers (values and gradients) and the
// high-water mark. A tracker is installed per thread via TrackerScope; nodes
// remember the tracker that was active when they were created and report
// frees to it. Lane worker threads inherit the submitting thread's tracker.
class MemoryTracker {
 public:
  void add(std::int64_t bytes) {
    std::int64_t now = live_.fetch_add(bytes, std::memory_order_relaxed) + bytes;
    std::int64_t hw = high_.load(std::memory_order_relaxed);
    while (now > hw && !high_.compare_exchange_weak(hw, now, std::memory_order_relaxed)) {
    }
  }
  void sub(std::int64_t bytes) { live_.fetch_sub(bytes, std::memory_order_relaxed); }

  std::int64_t live_bytes() const { return live_.load(std::memory_order_relaxed); }
  std::int64_t high_water_bytes() const { return high_.load(std::memory_order_relaxed); }
  void reset_high_water() { high_.store(live_.load()); }

  static MemoryTracker*& current() {
    thread_local MemoryTracker* tracker = nullptr;
    return tracker;
  }

 private:
  std::atomic<std::int64_t> live_{0};
  std::atomic<std::int64_t> high_{0};
};

class TrackerScope {
 public:
  explicit TrackerScope(MemoryTracker* t) : saved_(MemoryTracker::current()) {
    MemoryTracker::current() = t;
  }
  ~TrackerScope() { MemoryTracker::current() = saved_; }
  TrackerScope(const TrackerScope&) = delete;
  TrackerScope& operator=(const TrackerScope&) = delete;

 private:
  MemoryTracker* saved_;
};

namespace detail {

template <class S>
struct Node;

template <class S>
using NodePtr = std::shared_ptr<Node<S>>;

template <class S>
struct Node {
  std::vector<std::int64_t> shape;
  std::vector<S> value;
  std::vector<S> grad;  // allocated lazily by ensure_grad()
  bool requires_grad = false;
  bool backward_done = false;
  std::vector<NodePtr<S>> parents;
  // Propagates this node's grad into its parents' grads.
  std::function<void(Node&)> backprop;
  MemoryTracker* tracker = nullptr;

  Node(std::vector<std::int64_t> shp, bool rg)
      : shape(std::move(shp)), requires_grad(rg) {
    std::int64_t n = 1;
    for (std::int64_t d : shape) n *= d;
    value.resize(static_cast<std::size_t>(n));
    tracker = MemoryTracker::current();
    if (tracker) tracker->add(static_cast<std::int64_t>(value.size() * sizeof(S)));
  }

  ~Node() {
    if (tracker) {
      tracker->sub(static_cast<std::int64_t>((value.size() + grad.size()) * sizeof(S)));
    }
  }

  Node(const Node&) = delete;
  Node& operator=(const Node&) = delete;

  std::int64_t numel() const { return static_cast<std::int64_t>(value.size()); }

  void ensure_grad() {
    if (grad.empty()) {
      grad.assign(value.size(), S(0));
      if (tracker) tracker->add(static_cast<std::int64_t>(grad.size() * sizeof(S)));
    }
  }
};

inline std::int64_t numel_of(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (std::int64_t d : shape) n *= d;
  return n;
}

}  // namespace detail

// Value-semantics handle to an immutable node in the autodiff graph.
template <class S>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(detail::NodePtr<S> node) : node_(std::move(node)) {}

  static Tensor zeros(std::vector<std::int64_t> shape, bool requires_grad = false) {
    return Tensor(std::make_shared<detail::Node<S>>(std::move(shape), requires_grad));
  }

  static Tensor from(std::vector<std::int64_t> shape, std::vector<S> data,
                     bool requires_grad = false) {
    if (detail::numel_of(shape) != static_cast<std::int64_t>(data.size())) {
      raise(ErrorCode::kShapeMismatch, "tensor data length does not match shape");
    }
    auto n = std::make_shared<detail::Node<S>>(std::move(shape), requires_grad);
    n->value = std::move(data);
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v) { return from({1}, {v}); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<std::int64_t>& shape() const { return node_->shape; }
  std::int64_t dim(int i) const { return node_->shape[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }

  const std::vector<S>& value() const { return node_->value; }
  const std::vector<S>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }

  S item() const {
    if (numel() != 1) raise(ErrorCode::kNotScalar, "item() on non-scalar tensor");
    return node_->value[0];
  }

  // Mutable access is intended for filling leaves before they enter a graph.
  std::vector<S>& mutable_value() { return node_->value; }

  // Detaches this tensor's graph from the tracker that metered it. Required
  // before a handle outlives the tracker, or the node destructors would write
  // through a dangling pointer.
  void untrack() {
    if (!node_) return;
    std::vector<detail::Node<S>*> work{node_.get()};
    while (!work.empty()) {
      detail::Node<S>* n = work.back();
      work.pop_back();
      if (n->tracker) {
        n->tracker->sub(
            static_cast<std::int64_t>((n->value.size() + n->grad.size()) * sizeof(S)));
        n->tracker = nullptr;
      }
      for (const auto& p : n->parents) work.push_back(p.get());
    }
  }

  detail::NodePtr<S>& node() { return node_; }
  const detail::NodePtr<S>& node() const { return node_; }

 private:
  detail::NodePtr<S> node_;
};

// A named, versioned trainable tensor. The version increases by exactly one
// per optimizer step applied to it, whether or not the value changed.
template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;
  std::uint64_t version = 0;
};

namespace detail {

template <class S>
NodePtr<S> make_op(std::vector<std::int64_t> shape, std::vector<NodePtr<S>> parents,
                   std::function<void(Node<S>&)> backprop) {
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  auto n = std::make_shared<Node<S>>(std::move(shape), rg);
  if (rg) {
    n->parents = std::move(parents);
    n->backprop = std::move(backprop);
  }
  return n;
}

// Rows view: a rank >= 2 tensor is treated as (rows x cols) with cols = last
// dimension. Used by matmul/linear/softmax/layer_norm.
template <class S>
std::pair<std::int64_t, std::int64_t> rows_cols(const Node<S>& n) {
  if (n.shape.empty()) raise(ErrorCode::kShapeMismatch, "rank-0 tensor");
  std::int64_t cols = n.shape.back();
  std::int64_t rows = n.numel() / std::max<std::int64_t>(cols, 1);
  return {rows, cols};
}

// C[r, j] += alpha * sum_k A[r, k] * B[k, j], fixed k-ascending order.
template <class S>
void gemm_acc(const S* a, const S* b, S* c, std::int64_t rows, std::int64_t inner,
              std::int64_t cols, S alpha = S(1)) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* arow = a + r * inner;
    S* crow = c + r * cols;
    for (std::int64_t k = 0; k < inner; ++k) {
      const S av = alpha * arow[k];
      const S* brow = b + k * cols;
      for (std::int64_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[r, j] += alpha * sum_k A[r, k] * B[j, k]  (B used transposed).
template <class S>
void gemm_nt_acc(const S* a, const S* b, S* c, std::int64_t rows, std::int64_t inner,
                 std::int64_t cols, S alpha = S(1)) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* arow = a + r * inner;
    S* crow = c + r * cols;
    for (std::int64_t j = 0; j < cols; ++j) {
      const S* brow = b + j * inner;
      S acc = S(0);
      for (std::int64_t k = 0; k < inner; ++k) acc += arow[k] * brow[k];
      crow[j] += alpha * acc;
    }
  }
}

// C[k, j] += alpha * sum_r A[r, k] * B[r, j]  (A used transposed).
template <class S>
void gemm_tn_acc(const S* a, const S* b, S* c, std::int64_t rows, std::int64_t inner,
                 std::int64_t cols, S alpha = S(1)) {
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* arow = a + r * inner;
    const S* brow = b + r * cols;
    for (std::int64_t k = 0; k < inner; ++k) {
      const S av = alpha * arow[k];
      S* crow = c + k * cols;
      for (std::int64_t j = 0; j < cols; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Forward ops
// ---------------------------------------------------------------------------

// Matrix product: a is (..., m, k) flattened to rows, b is (k, n).
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  const auto& an = *a.node();
  const auto& bn = *b.node();
  if (bn.shape.size() != 2) raise(ErrorCode::kShapeMismatch, "matmul rhs must be rank-2");
  auto [rows, inner] = detail::rows_cols(an);
  if (inner != bn.shape[0]) {
    raise(ErrorCode::kShapeMismatch, "matmul inner dimensions disagree: " +
                                         std::to_string(inner) + " vs " +
                                         std::to_string(bn.shape[0]));
  }
  const std::int64_t cols = bn.shape[1];
  std::vector<std::int64_t> out_shape = an.shape;
  out_shape.back() = cols;

  auto pa = a.node();
  auto pb = b.node();
  auto out = detail::make_op<S>(
      std::move(out_shape), {pa, pb}, [rows, inner, cols](detail::Node<S>& self) {
        auto& A = *self.parents[0];
        auto& B = *self.parents[1];
        if (A.requires_grad) {
          A.ensure_grad();
          detail::gemm_nt_acc(self.grad.data(), B.value.data(), A.grad.data(), rows,
                              cols, inner);
        }
        if (B.requires_grad) {
          B.ensure_grad();
          detail::gemm_tn_acc(A.value.data(), self.grad.data(), B.grad.data(), rows,
                              inner, cols);
        }
      });
  detail::gemm_acc(pa->value.data(), pb->value.data(), out->value.data(), rows, inner,
                   cols);
  return Tensor<S>(out);
}

// x (..., in) * W (in, out) + bias (out), one node.
template <class S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& bias) {
  const auto& xn = *x.node();
  const auto& wn = *w.node();
  const auto& bn = *bias.node();
  if (wn.shape.size() != 2 || bn.shape.size() != 1 || bn.shape[0] != wn.shape[1]) {
    raise(ErrorCode::kShapeMismatch, "linear weight/bias shapes inconsistent");
  }
  auto [rows, inner] = detail::rows_cols(xn);
  if (inner != wn.shape[0]) raise(ErrorCode::kShapeMismatch, "linear input width mismatch");
  const std::int64_t cols = wn.shape[1];
  std::vector<std::int64_t> out_shape = xn.shape;
  out_shape.back() = cols;

  auto px = x.node();
  auto pw = w.node();
  auto pb = bias.node();
  auto out = detail::make_op<S>(
      std::move(out_shape), {px, pw, pb},
      [rows, inner, cols](detail::Node<S>& self) {
        auto& X = *self.parents[0];
        auto& W = *self.parents[1];
        auto& B = *self.parents[2];
        if (X.requires_grad) {
          X.ensure_grad();
          detail::gemm_nt_acc(self.grad.data(), W.value.data(), X.grad.data(), rows,
                              cols, inner);
        }
        if (W.requires_grad) {
          W.ensure_grad();
          detail::gemm_tn_acc(X.value.data(), self.grad.data(), W.grad.data(), rows,
                              inner, cols);
        }
        if (B.requires_grad) {
          B.ensure_grad();
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < cols; ++j)
              B.grad[static_cast<std::size_t>(j)] +=
                  self.grad[static_cast<std::size_t>(r * cols + j)];
        }
      });
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < cols; ++j)
      out->value[static_cast<std::size_t>(r * cols + j)] =
          pb->value[static_cast<std::size_t>(j)];
  detail::gemm_acc(px->value.data(), pw->value.data(), out->value.data(), rows, inner,
                   cols);
  return Tensor<S>(out);
}

// Row-wise softmax over the last dimension, max-subtracted for stability.
template <class S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  const auto& xn = *x.node();
  auto [rows, cols] = detail::rows_cols(xn);
  auto px = x.node();
  auto out = detail::make_op<S>(
      xn.shape, {px}, [rows, cols](detail::Node<S>& self) {
        auto& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        // dS = P .* (dP - rowdot(dP, P))
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* p = self.value.data() + r * cols;
          const S* dp = self.grad.data() + r * cols;
          S dot = S(0);
          for (std::int64_t j = 0; j < cols; ++j) dot += dp[j] * p[j];
          S* dx = X.grad.data() + r * cols;
          for (std::int64_t j = 0; j < cols; ++j) dx[j] += p[j] * (dp[j] - dot);
        }
      });
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* row = px->value.data() + r * cols;
    S* orow = out->value.data() + r * cols;
    S mx = row[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, row[j]);
    S sum = S(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    const S inv = S(1) / sum;
    for (std::int64_t j = 0; j < cols; ++j) orow[j] *= inv;
  }
  return Tensor<S>(out);
}

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) raise(ErrorCode::kShapeMismatch, "add shape mismatch");
  auto pa = a.node();
  auto pb = b.node();
  auto out = detail::make_op<S>(pa->shape, {pa, pb}, [](detail::Node<S>& self) {
    for (int i = 0; i < 2; ++i) {
      auto& P = *self.parents[static_cast<std::size_t>(i)];
      if (!P.requires_grad) continue;
      P.ensure_grad();
      for (std::size_t j = 0; j < self.grad.size(); ++j) P.grad[j] += self.grad[j];
    }
  });
  for (std::size_t j = 0; j < out->value.size(); ++j)
    out->value[j] = pa->value[j] + pb->value[j];
  return Tensor<S>(out);
}

// Adds a rank-1 bias row to every row of x; the only broadcast in the library.
template <class S>
Tensor<S> add_bias_row(const Tensor<S>& x, const Tensor<S>& bias) {
  const auto& xn = *x.node();
  const auto& bn = *bias.node();
  auto [rows, cols] = detail::rows_cols(xn);
  if (bn.shape.size() != 1 || bn.shape[0] != cols) {
    raise(ErrorCode::kShapeMismatch, "bias row width mismatch");
  }
  auto px = x.node();
  auto pb = bias.node();
  auto out = detail::make_op<S>(xn.shape, {px, pb}, [rows, cols](detail::Node<S>& self) {
    auto& X = *self.parents[0];
    auto& B = *self.parents[1];
    if (X.requires_grad) {
      X.ensure_grad();
      for (std::size_t j = 0; j < self.grad.size(); ++j) X.grad[j] += self.grad[j];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < cols; ++j)
          B.grad[static_cast<std::size_t>(j)] +=
              self.grad[static_cast<std::size_t>(r * cols + j)];
    }
  });
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < cols; ++j)
      out->value[static_cast<std::size_t>(r * cols + j)] =
          px->value[static_cast<std::size_t>(r * cols + j)] +
          pb->value[static_cast<std::size_t>(j)];
  return Tensor<S>(out);
}

template <class S>
Tensor<S> scale(const Tensor<S>& x, S alpha) {
  auto px = x.node();
  auto out = detail::make_op<S>(px->shape, {px}, [alpha](detail::Node<S>& self) {
    auto& X = *self.parents[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    for (std::size_t j = 0; j < self.grad.size(); ++j) X.grad[j] += alpha * self.grad[j];
  });
  for (std::size_t j = 0; j < out->value.size(); ++j) out->value[j] = alpha * px->value[j];
  return Tensor<S>(out);
}

template <class S>
Tensor<S> relu(const Tensor<S>& x) {
  auto px = x.node();
  auto out = detail::make_op<S>(px->shape, {px}, [](detail::Node<S>& self) {
    auto& X = *self.parents[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    for (std::size_t j = 0; j < self.grad.size(); ++j)
      if (X.value[j] > S(0)) X.grad[j] += self.grad[j];
  });
  for (std::size_t j = 0; j < out->value.size(); ++j)
    out->value[j] = px->value[j] > S(0) ? px->value[j] : S(0);
  return Tensor<S>(out);
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape()) raise(ErrorCode::kShapeMismatch, "mul shape mismatch");
  auto pa = a.node();
  auto pb = b.node();
  auto out = detail::make_op<S>(pa->shape, {pa, pb}, [](detail::Node<S>& self) {
    auto& A = *self.parents[0];
    auto& B = *self.parents[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t j = 0; j < self.grad.size(); ++j)
        A.grad[j] += self.grad[j] * B.value[j];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t j = 0; j < self.grad.size(); ++j)
        B.grad[j] += self.grad[j] * A.value[j];
    }
  });
  for (std::size_t j = 0; j < out->value.size(); ++j)
    out->value[j] = pa->value[j] * pb->value[j];
  return Tensor<S>(out);
}

template <class S>
Tensor<S> sum_all(const Tensor<S>& x) {
  auto px = x.node();
  auto out = detail::make_op<S>({1}, {px}, [](detail::Node<S>& self) {
    auto& X = *self.parents[0];
    if (!X.requires_grad) return;
    X.ensure_grad();
    for (std::size_t j = 0; j < X.grad.size(); ++j) X.grad[j] += self.grad[0];
  });
  S acc = S(0);
  for (S v : px->value) acc += v;
  out->value[0] = acc;
  return Tensor<S>(out);
}

// Normalizes the last dimension to mean 0 / variance 1 (epsilon inside the
// square root), then applies the elementwise affine gain and bias.
// Statistics are recomputed in backward instead of being captured, so the op
// retains nothing beyond its output.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gain, const Tensor<S>& bias,
                     S eps = S(1e-5)) {
  const auto& xn = *x.node();
  auto [rows, cols] = detail::rows_cols(xn);
  if (gain.rank() != 1 || gain.dim(0) != cols || bias.rank() != 1 || bias.dim(0) != cols) {
    raise(ErrorCode::kShapeMismatch, "layer_norm gain/bias width mismatch");
  }
  auto px = x.node();
  auto pg = gain.node();
  auto pb = bias.node();
  auto out = detail::make_op<S>(
      xn.shape, {px, pg, pb}, [rows, cols, eps](detail::Node<S>& self) {
        auto& X = *self.parents[0];
        auto& G = *self.parents[1];
        auto& B = *self.parents[2];
        if (X.requires_grad) X.ensure_grad();
        if (G.requires_grad) G.ensure_grad();
        if (B.requires_grad) B.ensure_grad();
        const S invn = S(1) / static_cast<S>(cols);
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* xr = X.value.data() + r * cols;
          const S* dy = self.grad.data() + r * cols;
          S mean = S(0);
          for (std::int64_t j = 0; j < cols; ++j) mean += xr[j];
          mean *= invn;
          S var = S(0);
          for (std::int64_t j = 0; j < cols; ++j) {
            const S d = xr[j] - mean;
            var += d * d;
          }
          var *= invn;
          const S inv_std = S(1) / std::sqrt(var + eps);
          S sum_dxhat = S(0), sum_dxhat_xhat = S(0);
          for (std::int64_t j = 0; j < cols; ++j) {
            const S xhat = (xr[j] - mean) * inv_std;
            const S dxhat = dy[j] * G.value[static_cast<std::size_t>(j)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            if (G.requires_grad) G.grad[static_cast<std::size_t>(j)] += dy[j] * xhat;
            if (B.requires_grad) B.grad[static_cast<std::size_t>(j)] += dy[j];
          }
          if (X.requires_grad) {
            S* dx = X.grad.data() + r * cols;
            for (std::int64_t j = 0; j < cols; ++j) {
              const S xhat = (xr[j] - mean) * inv_std;
              const S dxhat = dy[j] * G.value[static_cast<std::size_t>(j)];
              dx[j] += inv_std * (dxhat - invn * sum_dxhat - xhat * invn * sum_dxhat_xhat);
            }
          }
        }
      });
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* xr = px->value.data() + r * cols;
    S* orow = out->value.data() + r * cols;
    S mean = S(0);
    for (std::int64_t j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<S>(cols);
    S var = S(0);
    for (std::int64_t j = 0; j < cols; ++j) {
      const S d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<S>(cols);
    const S inv_std = S(1) / std::sqrt(var + eps);
    for (std::int64_t j = 0; j < cols; ++j)
      orow[j] = (xr[j] - mean) * inv_std * pg->value[static_cast<std::size_t>(j)] +
                pb->value[static_cast<std::size_t>(j)];
  }
  return Tensor<S>(out);
}

// Mean cross-entropy of row-wise logits against integer labels. Accepts
// rank-1 logits (a single sample) or rank-2 (batch x classes). The softmax is
// recomputed in backward.
template <class S>
Tensor<S> cross_entropy(const Tensor<S>& logits, std::span<const std::int32_t> labels) {
  const auto& ln = *logits.node();
  auto [rows, cols] = detail::rows_cols(ln);
  if (static_cast<std::int64_t>(labels.size()) != rows) {
    raise(ErrorCode::kShapeMismatch, "cross_entropy needs one label per row");
  }
  for (std::int32_t lb : labels) {
    if (lb < 0 || lb >= cols) {
      raise(ErrorCode::kLabelOutOfRange,
            "label " + std::to_string(lb) + " outside [0, " + std::to_string(cols) + ")");
    }
  }
  std::vector<std::int32_t> owned(labels.begin(), labels.end());
  auto pl = logits.node();
  auto out = detail::make_op<S>(
      {1}, {pl}, [rows, cols, owned = std::move(owned)](detail::Node<S>& self) {
        auto& L = *self.parents[0];
        if (!L.requires_grad) return;
        L.ensure_grad();
        const S inv_rows = S(1) / static_cast<S>(rows);
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* z = L.value.data() + r * cols;
          S mx = z[0];
          for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
          S sum = S(0);
          for (std::int64_t j = 0; j < cols; ++j) sum += std::exp(z[j] - mx);
          const S inv = S(1) / sum;
          S* dz = L.grad.data() + r * cols;
          for (std::int64_t j = 0; j < cols; ++j) {
            S p = std::exp(z[j] - mx) * inv;
            if (j == owned[static_cast<std::size_t>(r)]) p -= S(1);
            dz[j] += self.grad[0] * p * inv_rows;
          }
        }
      });
  S total = S(0);
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* z = pl->value.data() + r * cols;
    S mx = z[0];
    for (std::int64_t j = 1; j < cols; ++j) mx = std::max(mx, z[j]);
    S sum = S(0);
    for (std::int64_t j = 0; j < cols; ++j) sum += std::exp(z[j] - mx);
    total += std::log(sum) + mx - z[labels[static_cast<std::size_t>(r)]];
  }
  out->value[0] = total / static_cast<S>(rows);
  return Tensor<S>(out);
}

// Gathers rows of an embedding table for a (batch x seq_len) token grid.
template <class S>
Tensor<S> embedding(const Tensor<S>& table, std::span<const std::int32_t> tokens,
                    std::int64_t batch, std::int64_t seq_len) {
  const auto& tn = *table.node();
  if (tn.shape.size() != 2) raise(ErrorCode::kShapeMismatch, "embedding table must be rank-2");
  const std::int64_t vocab = tn.shape[0];
  const std::int64_t width = tn.shape[1];
  if (static_cast<std::int64_t>(tokens.size()) != batch * seq_len) {
    raise(ErrorCode::kShapeMismatch, "token count does not match batch x seq_len");
  }
  for (std::int32_t t : tokens) {
    if (t < 0 || t >= vocab) raise(ErrorCode::kLabelOutOfRange, "token id outside vocab");
  }
  std::vector<std::int32_t> owned(tokens.begin(), tokens.end());
  auto pt = table.node();
  auto out = detail::make_op<S>(
      {batch, seq_len, width}, {pt},
      [width, owned](detail::Node<S>& self) {
        auto& T = *self.parents[0];
        if (!T.requires_grad) return;
        T.ensure_grad();
        for (std::size_t i = 0; i < owned.size(); ++i) {
          const S* dy = self.grad.data() + static_cast<std::int64_t>(i) * width;
          S* dt = T.grad.data() + static_cast<std::int64_t>(owned[i]) * width;
          for (std::int64_t j = 0; j < width; ++j) dt[j] += dy[j];
        }
      });
  for (std::size_t i = 0; i < owned.size(); ++i) {
    const S* src = pt->value.data() + static_cast<std::int64_t>(owned[i]) * width;
    S* dst = out->value.data() + static_cast<std::int64_t>(i) * width;
    std::copy(src, src + width, dst);
  }
  return Tensor<S>(out);
}

// Picks the position-0 row of every sample: (B, n, d) -> (B, d).
template <class S>
Tensor<S> select_first_position(const Tensor<S>& x) {
  const auto& xn = *x.node();
  if (xn.shape.size() != 3) raise(ErrorCode::kShapeMismatch, "expected rank-3 (B, n, d)");
  const std::int64_t batch = xn.shape[0], seq = xn.shape[1], width = xn.shape[2];
  auto px = x.node();
  auto out = detail::make_op<S>(
      {batch, width}, {px}, [batch, seq, width](detail::Node<S>& self) {
        auto& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
          const S* dy = self.grad.data() + b * width;
          S* dx = X.grad.data() + b * seq * width;
          for (std::int64_t j = 0; j < width; ++j) dx[j] += dy[j];
        }
      });
  for (std::int64_t b = 0; b < batch; ++b) {
    const S* src = px->value.data() + b * seq * width;
    S* dst = out->value.data() + b * width;
    std::copy(src, src + width, dst);
  }
  return Tensor<S>(out);
}

// Concatenates along the last dimension. All inputs must agree on the leading
// dimensions. Parent order fixes both the output column order and the
// backward accumulation order.
template <class S>
Tensor<S> concat_last_dim(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) raise(ErrorCode::kShapeMismatch, "concat of zero tensors");
  auto lead = parts[0].shape();
  lead.pop_back();
  std::int64_t total_cols = 0;
  std::vector<detail::NodePtr<S>> parents;
  std::vector<std::int64_t> widths;
  parents.reserve(parts.size());
  for (const auto& p : parts) {
    auto s = p.shape();
    std::int64_t w = s.back();
    s.pop_back();
    if (s != lead) raise(ErrorCode::kShapeMismatch, "concat leading dims disagree");
    total_cols += w;
    widths.push_back(w);
    parents.push_back(p.node());
  }
  std::int64_t rows = 1;
  for (std::int64_t d : lead) rows *= d;
  std::vector<std::int64_t> out_shape = lead;
  out_shape.push_back(total_cols);

  auto out = detail::make_op<S>(
      std::move(out_shape), std::move(parents),
      [rows, total_cols, widths](detail::Node<S>& self) {
        std::int64_t off = 0;
        for (std::size_t i = 0; i < self.parents.size(); ++i) {
          auto& P = *self.parents[i];
          const std::int64_t w = widths[i];
          if (P.requires_grad) {
            P.ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
              const S* dy = self.grad.data() + r * total_cols + off;
              S* dp = P.grad.data() + r * w;
              for (std::int64_t j = 0; j < w; ++j) dp[j] += dy[j];
            }
          }
          off += w;
        }
      });
  std::int64_t off = 0;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    const auto& pn = *parts[i].node();
    const std::int64_t w = widths[i];
    for (std::int64_t r = 0; r < rows; ++r) {
      const S* src = pn.value.data() + r * w;
      S* dst = out->value.data() + r * total_cols + off;
      std::copy(src, src + w, dst);
    }
    off += w;
  }
  return Tensor<S>(out);
}

// Column slice [c0, c1) of a rank-2 tensor; gradient scatters back into the
// same columns. Lets execution strategies share one weight matrix while
// issuing narrower products.
template <class S>
Tensor<S> slice_cols(const Tensor<S>& x, std::int64_t c0, std::int64_t c1) {
  const auto& xn = *x.node();
  if (xn.shape.size() != 2) raise(ErrorCode::kShapeMismatch, "slice_cols needs rank-2");
  const std::int64_t rows = xn.shape[0], cols = xn.shape[1];
  if (c0 < 0 || c1 > cols || c0 >= c1) {
    raise(ErrorCode::kShapeMismatch, "slice_cols range invalid");
  }
  const std::int64_t w = c1 - c0;
  auto px = x.node();
  auto out = detail::make_op<S>(
      {rows, w}, {px}, [rows, cols, c0, w](detail::Node<S>& self) {
        auto& X = *self.parents[0];
        if (!X.requires_grad) return;
        X.ensure_grad();
        for (std::int64_t r = 0; r < rows; ++r) {
          const S* dy = self.grad.data() + r * w;
          S* dx = X.grad.data() + r * cols + c0;
          for (std::int64_t j = 0; j < w; ++j) dx[j] += dy[j];
        }
      });
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* src = px->value.data() + r * cols + c0;
    S* dst = out->value.data() + r * w;
    std::copy(src, src + w, dst);
  }
  return Tensor<S>(out);
}

// Per-head scaled score blocks. q and k are (B, n, heads * dh), or rank-2
// (n, heads * dh) read as B = 1; the output is (B * heads, n, n) with
// out[b * heads + h, i, j] =
// alpha * sum_c q[b, i, h * dh + c] * k[b, j, h * dh + c]. Heads never mix,
// which is what makes a fused projection equivalent to per-head products.
template <class S>
Tensor<S> bmm_head_scores(const Tensor<S>& q, const Tensor<S>& k, std::int64_t heads,
                          S alpha) {
  const auto& qn = *q.node();
  const auto& kn = *k.node();
  if ((qn.shape.size() != 3 && qn.shape.size() != 2) || qn.shape != kn.shape) {
    raise(ErrorCode::kShapeMismatch, "head scores need matching rank-2 or rank-3 inputs");
  }
  const bool batched = qn.shape.size() == 3;
  const std::int64_t batch = batched ? qn.shape[0] : 1;
  const std::int64_t n = qn.shape[batched ? 1 : 0];
  const std::int64_t w = qn.shape.back();
  if (heads <= 0 || w % heads != 0) {
    raise(ErrorCode::kShapeMismatch, "width not divisible by head count");
  }
  const std::int64_t dh = w / heads;
  auto pq = q.node();
  auto pk = k.node();
  auto out = detail::make_op<S>(
      {batch * heads, n, n}, {pq, pk},
      [batch, n, w, heads, dh, alpha](detail::Node<S>& self) {
        auto& Q = *self.parents[0];
        auto& K = *self.parents[1];
        if (Q.requires_grad) Q.ensure_grad();
        if (K.requires_grad) K.ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t h = 0; h < heads; ++h) {
            const S* ds = self.grad.data() + ((b * heads + h) * n) * n;
            const std::int64_t base = b * n * w + h * dh;
            if (Q.requires_grad) {
              for (std::int64_t i = 0; i < n; ++i) {
                S* dq = Q.grad.data() + base + i * w;
                const S* dsrow = ds + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                  const S g = alpha * dsrow[j];
                  const S* krow = K.value.data() + base + j * w;
                  for (std::int64_t c = 0; c < dh; ++c) dq[c] += g * krow[c];
                }
              }
            }
            if (K.requires_grad) {
              for (std::int64_t i = 0; i < n; ++i) {
                const S* qrow = Q.value.data() + base + i * w;
                const S* dsrow = ds + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                  const S g = alpha * dsrow[j];
                  S* dk = K.grad.data() + base + j * w;
                  for (std::int64_t c = 0; c < dh; ++c) dk[c] += g * qrow[c];
                }
              }
            }
          }
        }
      });
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      S* orow = out->value.data() + ((b * heads + h) * n) * n;
      const std::int64_t base = b * n * w + h * dh;
      for (std::int64_t i = 0; i < n; ++i) {
        const S* qrow = pq->value.data() + base + i * w;
        for (std::int64_t j = 0; j < n; ++j) {
          const S* krow = pk->value.data() + base + j * w;
          S acc = S(0);
          for (std::int64_t c = 0; c < dh; ++c) acc += qrow[c] * krow[c];
          orow[i * n + j] = alpha * acc;
        }
      }
    }
  }
  return Tensor<S>(out);
}

// Applies per-head probability blocks to values: probs (B * heads, n, n),
// v (B, n, heads * dh) -> (B, n, heads * dh); rank-2 v is read as B = 1 and
// yields a rank-2 result.
// out[b, i, h * dh + c] = sum_j probs[b * heads + h, i, j] * v[b, j, h * dh + c].
// The head-major output layout is the concatenation, no separate op needed.
template <class S>
Tensor<S> bmm_head_mix(const Tensor<S>& probs, const Tensor<S>& v, std::int64_t heads) {
  const auto& pn = *probs.node();
  const auto& vn = *v.node();
  if (pn.shape.size() != 3 || (vn.shape.size() != 3 && vn.shape.size() != 2)) {
    raise(ErrorCode::kShapeMismatch, "head mix needs rank-3 probs");
  }
  const bool batched = vn.shape.size() == 3;
  const std::int64_t batch = batched ? vn.shape[0] : 1;
  const std::int64_t n = vn.shape[batched ? 1 : 0];
  const std::int64_t w = vn.shape.back();
  if (heads <= 0 || w % heads != 0 || pn.shape[0] != batch * heads ||
      pn.shape[1] != n || pn.shape[2] != n) {
    raise(ErrorCode::kShapeMismatch, "head mix shapes inconsistent");
  }
  const std::int64_t dh = w / heads;
  auto pp = probs.node();
  auto pv = v.node();
  const std::vector<std::int64_t> out_shape =
      batched ? std::vector<std::int64_t>{batch, n, w} : std::vector<std::int64_t>{n, w};
  auto out = detail::make_op<S>(
      out_shape, {pp, pv},
      [batch, n, w, heads, dh](detail::Node<S>& self) {
        auto& P = *self.parents[0];
        auto& V = *self.parents[1];
        if (P.requires_grad) P.ensure_grad();
        if (V.requires_grad) V.ensure_grad();
        for (std::int64_t b = 0; b < batch; ++b) {
          for (std::int64_t h = 0; h < heads; ++h) {
            const std::int64_t pbase = ((b * heads + h) * n) * n;
            const std::int64_t vbase = b * n * w + h * dh;
            if (P.requires_grad) {
              for (std::int64_t i = 0; i < n; ++i) {
                const S* dy = self.grad.data() + vbase + i * w;
                S* dp = P.grad.data() + pbase + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                  const S* vrow = V.value.data() + vbase + j * w;
                  S acc = S(0);
                  for (std::int64_t c = 0; c < dh; ++c) acc += dy[c] * vrow[c];
                  dp[j] += acc;
                }
              }
            }
            if (V.requires_grad) {
              for (std::int64_t i = 0; i < n; ++i) {
                const S* dy = self.grad.data() + vbase + i * w;
                const S* prow = P.value.data() + pbase + i * n;
                for (std::int64_t j = 0; j < n; ++j) {
                  S* dv = V.grad.data() + vbase + j * w;
                  const S g = prow[j];
                  for (std::int64_t c = 0; c < dh; ++c) dv[c] += g * dy[c];
                }
              }
            }
          }
        }
      });
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      const std::int64_t pbase = ((b * heads + h) * n) * n;
      const std::int64_t vbase = b * n * w + h * dh;
      for (std::int64_t i = 0; i < n; ++i) {
        const S* prow = pp->value.data() + pbase + i * n;
        S* orow = out->value.data() + vbase + i * w;
        for (std::int64_t j = 0; j < n; ++j) {
          const S* vrow = pv->value.data() + vbase + j * w;
          const S g = prow[j];
          for (std::int64_t c = 0; c < dh; ++c) orow[c] += g * vrow[c];
        }
      }
    }
  }
  return Tensor<S>(out);
}

// ---------------------------------------------------------------------------
// Backward
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
void run_backward(NodePtr<S> root) {
  if (root->backward_done) {
    raise(ErrorCode::kGraphAlreadyConsumed, "backward already ran on this graph");
  }
  root->backward_done = true;

  // Iterative post-order DFS; order is fixed by graph construction order.
  std::vector<Node<S>*> topo;
  std::unordered_set<Node<S>*> seen;
  std::vector<std::pair<Node<S>*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node<S>* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node<S>* n = *it;
    if (n->backprop && !n->grad.empty()) n->backprop(*n);
  }
}

}  // namespace detail

// Backpropagates from a scalar loss; every reachable requires_grad tensor
// accumulates dLoss/dTensor. A second call on the same graph is an error.
template <class S>
void backward(const Tensor<S>& loss) {
  if (loss.numel() != 1) raise(ErrorCode::kNotScalar, "backward root must be scalar");
  auto root = loss.node();
  root->ensure_grad();
  root->grad[0] += S(1);
  detail::run_backward(root);
}

// Backpropagates from a non-scalar root with an externally supplied seed
// gradient (used at pipeline stage boundaries).
template <class S>
void backward_with_seed(const Tensor<S>& root_t, std::span<const S> seed) {
  auto root = root_t.node();
  if (static_cast<std::int64_t>(seed.size()) != root->numel()) {
    raise(ErrorCode::kShapeMismatch, "seed gradient shape mismatch");
  }
  root->ensure_grad();
  for (std::size_t i = 0; i < seed.size(); ++i) root->grad[i] += seed[i];
  detail::run_backward(root);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// value <- value - lr * grad; version advances by one whether or not the
// value moved. Gradients are passed in explicitly because they may come from
// a stashed graph or a remote stage rather than a local backward. Each
// parameter gets a fresh value node so older snapshots captured by in-flight
// graphs stay intact.
template <class S>
void sgd_step(std::vector<Parameter<S>>& params, S lr,
              const std::vector<std::span<const S>>& grads) {
  if (params.size() != grads.size()) {
    raise(ErrorCode::kShapeMismatch, "sgd_step: one gradient per parameter required");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (static_cast<std::int64_t>(grads[i].size()) != params[i].value.numel()) {
      raise(ErrorCode::kShapeMismatch,
            "sgd_step: gradient shape mismatch for " + params[i].name);
    }
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& p = params[i];
    Tensor<S> next = Tensor<S>::zeros(p.value.shape(), true);
    const auto& old = p.value.value();
    auto& nv = next.mutable_value();
    for (std::size_t j = 0; j < nv.size(); ++j) nv[j] = old[j] - lr * grads[i][j];
    p.value = std::move(next);
    p.version += 1;
  }
}

}  // namespace lanepipe

#endif  // LANEPIPE_TENSOR_HPP_
