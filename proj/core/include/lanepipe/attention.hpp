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
// Multi-head self-attention with three interchangeable execution shapes:
//   fused:    per-head weight matrices concatenated into three wide tensors,
//             one projection each, block-diagonal per-head softmax
//   per-head: each head projected and attended independently, concatenated
//   spans:    disjoint contiguous head ranges (one per execution lane), each
//             fused or per-head on its own, concatenated in head order
// All three walk the same per-element summation order, so results agree to
// the last bit within one precision mode. There is no output projection; the
// concatenated head mix is the sublayer output.

#ifndef LANEPIPE_ATTENTION_HPP_
#define LANEPIPE_ATTENTION_HPP_

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "lanepipe/error.hpp"
#include "lanepipe/tensor.hpp"

namespace lanepipe {

enum class AttentionMode { kFused, kPerHead };

inline const char* attention_mode_name(AttentionMode m) {
  return m == AttentionMode::kFused ? "fused" : "per_head";
}

inline AttentionMode attention_mode_from_name(const std::string& s) {
  if (s == "fused") return AttentionMode::kFused;
  if (s == "per_head") return AttentionMode::kPerHead;
  raise(ErrorCode::kInvalidConfig, "unknown attention mode: " + s);
}

// Weights of one attention head; each matrix is (d_model, d_head).
template <class S>
struct HeadWeights {
  Tensor<S> wq, wk, wv;
  std::int64_t head_index = 0;
};

template <class S>
struct AttentionLayer {
  std::vector<HeadWeights<S>> heads;  // ordered by head_index, 0..K-1
  std::int64_t d_model = 0;
  std::int64_t d_head = 0;

  std::int64_t head_count() const { return static_cast<std::int64_t>(heads.size()); }

  void validate() const {
    if (heads.empty() || d_model <= 0 || d_head <= 0 ||
        head_count() * d_head != d_model) {
      raise(ErrorCode::kInvalidConfig, "attention layer dims inconsistent");
    }
    for (std::size_t i = 0; i < heads.size(); ++i) {
      const auto& h = heads[i];
      if (h.head_index != static_cast<std::int64_t>(i)) {
        raise(ErrorCode::kInvalidConfig, "head indices must be 0..K-1 in order");
      }
      for (const Tensor<S>* w : {&h.wq, &h.wk, &h.wv}) {
        if (w->rank() != 2 || w->dim(0) != d_model || w->dim(1) != d_head) {
          raise(ErrorCode::kShapeMismatch, "head weight must be d_model x d_head");
        }
      }
    }
  }
};

// Standard scaling; a layer can be run unscaled by passing alpha = 1.
template <class S>
S default_attention_scale(std::int64_t d_head) {
  return S(1) / std::sqrt(static_cast<S>(d_head));
}

// One head: Z = softmax(alpha * Q Kᵀ) V with Q = x wq, K = x wk, V = x wv.
// x is (n, d_model) or (B, n, d_model).
template <class S>
Tensor<S> head_forward(const HeadWeights<S>& h, const Tensor<S>& x, S alpha) {
  Tensor<S> q = matmul(x, h.wq);
  Tensor<S> k = matmul(x, h.wk);
  Tensor<S> v = matmul(x, h.wv);
  Tensor<S> probs = softmax_rows(bmm_head_scores(q, k, 1, alpha));
  return bmm_head_mix(probs, v, 1);
}

namespace detail_attn {

// Concatenated weight tensors for heads [first, first + count). The wide
// tensor is a graph node, so gradients flow back into each head's matrices.
template <class S>
Tensor<S> concat_weights(const AttentionLayer<S>& layer, std::int64_t first,
                         std::int64_t count, Tensor<S> HeadWeights<S>::* member) {
  std::vector<Tensor<S>> parts;
  parts.reserve(static_cast<std::size_t>(count));
  for (std::int64_t h = first; h < first + count; ++h) {
    parts.push_back(layer.heads[static_cast<std::size_t>(h)].*member);
  }
  if (parts.size() == 1) return parts[0];
  return concat_last_dim(parts);
}

}  // namespace detail_attn

// Heads [first, first + count) as one wide projection with block-diagonal
// per-head softmax.
template <class S>
Tensor<S> fused_range_forward(const AttentionLayer<S>& layer, const Tensor<S>& x,
                              std::int64_t first, std::int64_t count, S alpha) {
  if (first < 0 || count <= 0 || first + count > layer.head_count()) {
    raise(ErrorCode::kInvalidPlan, "head range outside layer");
  }
  Tensor<S> wq = detail_attn::concat_weights(layer, first, count, &HeadWeights<S>::wq);
  Tensor<S> wk = detail_attn::concat_weights(layer, first, count, &HeadWeights<S>::wk);
  Tensor<S> wv = detail_attn::concat_weights(layer, first, count, &HeadWeights<S>::wv);
  Tensor<S> q = matmul(x, wq);
  Tensor<S> k = matmul(x, wk);
  Tensor<S> v = matmul(x, wv);
  Tensor<S> probs = softmax_rows(bmm_head_scores(q, k, count, alpha));
  return bmm_head_mix(probs, v, count);
}

// Heads [first, first + count) as independent single-head passes,
// concatenated in head order.
template <class S>
Tensor<S> per_head_range_forward(const AttentionLayer<S>& layer, const Tensor<S>& x,
                                 std::int64_t first, std::int64_t count, S alpha) {
  if (first < 0 || count <= 0 || first + count > layer.head_count()) {
    raise(ErrorCode::kInvalidPlan, "head range outside layer");
  }
  std::vector<Tensor<S>> pieces;
  pieces.reserve(static_cast<std::size_t>(count));
  for (std::int64_t h = first; h < first + count; ++h) {
    pieces.push_back(head_forward(layer.heads[static_cast<std::size_t>(h)], x, alpha));
  }
  if (pieces.size() == 1) return pieces[0];
  return concat_last_dim(pieces);
}

template <class S>
Tensor<S> range_forward(const AttentionLayer<S>& layer, const Tensor<S>& x,
                        std::int64_t first, std::int64_t count, AttentionMode mode,
                        S alpha) {
  return mode == AttentionMode::kFused
             ? fused_range_forward(layer, x, first, count, alpha)
             : per_head_range_forward(layer, x, first, count, alpha);
}

// Whole layer in one fused pass.
template <class S>
Tensor<S> fused_forward(const AttentionLayer<S>& layer, const Tensor<S>& x, S alpha) {
  return fused_range_forward(layer, x, 0, layer.head_count(), alpha);
}

// Whole layer head by head.
template <class S>
Tensor<S> per_head_forward(const AttentionLayer<S>& layer, const Tensor<S>& x, S alpha) {
  return per_head_range_forward(layer, x, 0, layer.head_count(), alpha);
}

}  // namespace lanepipe

#endif  // LANEPIPE_ATTENTION_HPP_
