// Copyright 2026 The Lanepipe Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#ifndef LANEPIPE_MODEL_HPP_
#define LANEPIPE_MODEL_HPP_

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "lanepipe/attention.hpp"
#include "lanepipe/error.hpp"
#include "lanepipe/tensor.hpp"

namespace lanepipe {

// Desk-scale transformer encoder for sequence classification. Pre-LN blocks:
//   x = x + Attention(LN(x));  x = x + FFN(LN(x))
// with no output projection after the head concat. The classifier reads the
// position-0 output vector.
struct EncoderConfig {
  std::int64_t layers = 6;    // L
  std::int64_t heads = 12;    // K
  std::int64_t d_model = 48;
  std::int64_t d_ff = 96;
  std::int64_t vocab = 64;
  std::int64_t seq_len = 16;
  std::int64_t classes = 4;
  std::uint32_t seed = 1;

  std::int64_t d_head() const { return d_model / heads; }
  void validate() const;  // all positive; heads * d_head == d_model

  std::string to_json() const;
  static EncoderConfig from_json(const std::string& text);

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

// Closed-form trainable scalar count for a config.
inline std::int64_t parameter_scalar_count(const EncoderConfig& cfg) {
  const std::int64_t per_block = 2 * cfg.d_model                    // first LN
                                 + 3 * cfg.d_model * cfg.d_model    // K heads of QKV
                                 + 2 * cfg.d_model                  // second LN
                                 + cfg.d_model * cfg.d_ff + cfg.d_ff
                                 + cfg.d_ff * cfg.d_model + cfg.d_model;
  return cfg.vocab * cfg.d_model + cfg.layers * per_block +
         2 * cfg.d_model +  // final LN ahead of the classifier
         cfg.d_model * cfg.classes + cfg.classes;
}

// Flat parameter layout:
//   [0]                 embedding (vocab, d_model)
//   per block b:        ln1.gain, ln1.bias,
//                       h0.wq, h0.wk, h0.wv, ..., h{K-1}.wv,
//                       ln2.gain, ln2.bias, ffn.w1, ffn.b1, ffn.w2, ffn.b2
//   tail:               lnf.gain, lnf.bias, cls.w (d_model, classes),
//                       cls.b (classes)
inline std::size_t params_per_block(const EncoderConfig& cfg) {
  return 2 + 3 * static_cast<std::size_t>(cfg.heads) + 2 + 4;
}
inline std::size_t block_param_first(const EncoderConfig& cfg, std::int64_t block) {
  return 1 + static_cast<std::size_t>(block) * params_per_block(cfg);
}
inline std::size_t classifier_param_first(const EncoderConfig& cfg) {
  return block_param_first(cfg, cfg.layers);
}
inline std::size_t total_param_count(const EncoderConfig& cfg) {
  return classifier_param_first(cfg) + 4;
}

template <class S>
struct Model {
  EncoderConfig cfg;
  std::vector<Parameter<S>> params;
};

namespace detail_model {

// Fixed initializer stream: one u32 draw per weight scalar, mapped into
// (-bound, bound). Gains, biases, and offsets draw nothing.
template <class S>
void fill_uniform(std::mt19937& rng, Tensor<S>& t, S bound) {
  for (S& v : t.mutable_value()) {
    const double u = (static_cast<double>(rng()) + 0.5) / 4294967296.0;
    v = static_cast<S>(static_cast<double>(bound) * (2.0 * u - 1.0));
  }
}

template <class S>
void fill_const(Tensor<S>& t, S c) {
  for (S& v : t.mutable_value()) v = c;
}

// Walks the parameter layout in declaration order, invoking weight(name,
// shape) or constant(name, shape, c) for each entry. Every builder shares this
// walk so slices stay aligned with the full model.
template <class S, class W, class C>
void walk_params(const EncoderConfig& cfg, W&& weight, C&& constant) {
  weight("emb", {cfg.vocab, cfg.d_model});
  for (std::int64_t b = 0; b < cfg.layers; ++b) {
    const std::string blk = "blk" + std::to_string(b) + ".";
    constant(blk + "ln1.gain", {cfg.d_model}, S(1));
    constant(blk + "ln1.bias", {cfg.d_model}, S(0));
    for (std::int64_t h = 0; h < cfg.heads; ++h) {
      const std::string hd = blk + "h" + std::to_string(h) + ".";
      weight(hd + "wq", {cfg.d_model, cfg.d_head()});
      weight(hd + "wk", {cfg.d_model, cfg.d_head()});
      weight(hd + "wv", {cfg.d_model, cfg.d_head()});
    }
    constant(blk + "ln2.gain", {cfg.d_model}, S(1));
    constant(blk + "ln2.bias", {cfg.d_model}, S(0));
    weight(blk + "ffn.w1", {cfg.d_model, cfg.d_ff});
    constant(blk + "ffn.b1", {cfg.d_ff}, S(0));
    weight(blk + "ffn.w2", {cfg.d_ff, cfg.d_model});
    constant(blk + "ffn.b2", {cfg.d_model}, S(0));
  }
  constant("lnf.gain", {cfg.d_model}, S(1));
  constant("lnf.bias", {cfg.d_model}, S(0));
  // Zero-started head: logits begin exactly uniform, so the untrained loss is
  // ln(classes) for every config and seed.
  constant("cls.w", {cfg.d_model, cfg.classes}, S(0));
  constant("cls.b", {cfg.classes}, S(0));
}

}  // namespace detail_model

// Builds parameters [first, first + count) of the layout, bit-identical to
// the same slice of build_model. Skipped weights advance the initializer
// stream without allocating.
template <class S>
std::vector<Parameter<S>> build_param_slice(const EncoderConfig& cfg, std::size_t first,
                                            std::size_t count) {
  cfg.validate();
  if (first + count > total_param_count(cfg)) {
    raise(ErrorCode::kInvalidConfig, "parameter slice outside layout");
  }
  std::vector<Parameter<S>> out;
  out.reserve(count);
  std::mt19937 rng(cfg.seed);
  const S bound = S(1) / std::sqrt(static_cast<S>(cfg.d_model));
  std::size_t index = 0;

  detail_model::walk_params<S>(
      cfg,
      [&](std::string name, std::vector<std::int64_t> shape) {
        if (index >= first && index < first + count) {
          Tensor<S> t = Tensor<S>::zeros(std::move(shape), true);
          detail_model::fill_uniform(rng, t, bound);
          out.push_back({std::move(name), std::move(t), 0});
        } else {
          rng.discard(static_cast<unsigned long long>(detail::numel_of(shape)));
        }
        ++index;
      },
      [&](std::string name, std::vector<std::int64_t> shape, S c) {
        if (index >= first && index < first + count) {
          Tensor<S> t = Tensor<S>::zeros(std::move(shape), true);
          detail_model::fill_const(t, c);
          out.push_back({std::move(name), std::move(t), 0});
        }
        ++index;
      });
  return out;
}

// Deterministic construction: the same config yields bit-identical
// parameters. Weight matrices are uniform within +-1/sqrt(d_model); LN gains
// start at one, every bias at zero.
template <class S>
Model<S> build_model(const EncoderConfig& cfg) {
  cfg.validate();
  Model<S> m;
  m.cfg = cfg;
  m.params = build_param_slice<S>(cfg, 0, total_param_count(cfg));
  return m;
}

// Assembles a block's attention layer as a view over current parameter
// values. `params` holds the layout slice starting at absolute index
// `offset`; rebuild the view after every optimizer step.
template <class S>
AttentionLayer<S> attention_layer_view_at(const EncoderConfig& cfg,
                                          const std::vector<Parameter<S>>& params,
                                          std::size_t offset, std::int64_t block) {
  AttentionLayer<S> layer;
  layer.d_model = cfg.d_model;
  layer.d_head = cfg.d_head();
  const std::size_t first = block_param_first(cfg, block) + 2 - offset;
  for (std::int64_t h = 0; h < cfg.heads; ++h) {
    const std::size_t at = first + 3 * static_cast<std::size_t>(h);
    layer.heads.push_back(
        {params[at].value, params[at + 1].value, params[at + 2].value, h});
  }
  return layer;
}

template <class S>
AttentionLayer<S> attention_layer_view(const Model<S>& m, std::int64_t block) {
  return attention_layer_view_at(m.cfg, m.params, 0, block);
}

// Pluggable attention execution: the default runs the fused shape inline;
// the pipeline swaps in a lane-splitting executor.
template <class S>
using AttentionExec =
    std::function<Tensor<S>(const AttentionLayer<S>&, const Tensor<S>&, S alpha)>;

template <class S>
AttentionExec<S> inline_attention_exec(AttentionMode mode = AttentionMode::kFused) {
  return [mode](const AttentionLayer<S>& layer, const Tensor<S>& x, S alpha) {
    return range_forward(layer, x, 0, layer.head_count(), mode, alpha);
  };
}

// Token grid -> (B, seq_len, d_model).
template <class S>
Tensor<S> embed_tokens(const Model<S>& m, std::span<const std::int32_t> tokens,
                       std::int64_t batch) {
  return embedding(m.params[0].value, tokens, batch, m.cfg.seq_len);
}

// Applies encoder blocks [lo, hi) to x. `params` is the layout slice starting
// at absolute index `offset` and must cover the requested blocks.
template <class S>
Tensor<S> run_blocks_at(const EncoderConfig& cfg, const std::vector<Parameter<S>>& params,
                        std::size_t offset, Tensor<S> x, std::int64_t lo, std::int64_t hi,
                        const AttentionExec<S>& attn_exec) {
  if (lo < 0 || hi > cfg.layers || lo > hi) {
    raise(ErrorCode::kInvalidConfig, "block range outside model");
  }
  const S alpha = default_attention_scale<S>(cfg.d_head());
  for (std::int64_t b = lo; b < hi; ++b) {
    const std::size_t at = block_param_first(cfg, b) - offset;
    const AttentionLayer<S> layer = attention_layer_view_at(cfg, params, offset, b);
    Tensor<S> normed = layer_norm(x, params[at].value, params[at + 1].value);
    x = add(x, attn_exec(layer, normed, alpha));

    const std::size_t ln2 = at + 2 + 3 * static_cast<std::size_t>(cfg.heads);
    Tensor<S> normed2 = layer_norm(x, params[ln2].value, params[ln2 + 1].value);
    Tensor<S> hidden = relu(linear(normed2, params[ln2 + 2].value, params[ln2 + 3].value));
    x = add(x, linear(hidden, params[ln2 + 4].value, params[ln2 + 5].value));
  }
  return x;
}

template <class S>
Tensor<S> run_blocks(const Model<S>& m, Tensor<S> x, std::int64_t lo, std::int64_t hi,
                     const AttentionExec<S>& attn_exec) {
  return run_blocks_at(m.cfg, m.params, 0, std::move(x), lo, hi, attn_exec);
}

// (B, seq_len, d_model) -> (B, classes) logits from the normalized
// position-0 vector.
template <class S>
Tensor<S> classify_at(const EncoderConfig& cfg, const std::vector<Parameter<S>>& params,
                      std::size_t offset, const Tensor<S>& x) {
  const std::size_t at = classifier_param_first(cfg) - offset;
  Tensor<S> pooled = layer_norm(select_first_position(x), params[at].value,
                                params[at + 1].value);
  return linear(pooled, params[at + 2].value, params[at + 3].value);
}

template <class S>
Tensor<S> classify(const Model<S>& m, const Tensor<S>& x) {
  return classify_at(m.cfg, m.params, 0, x);
}

struct Batch {
  std::vector<std::int32_t> tokens;  // batch_size * seq_len, row-major
  std::vector<std::int32_t> labels;  // batch_size
  std::int64_t batch_size = 0;
  std::int64_t seq_len = 0;
};

template <class S>
struct ForwardResult {
  Tensor<S> loss;
  Tensor<S> logits;
  double accuracy = 0.0;
};

template <class S>
double batch_accuracy(const Tensor<S>& logits, std::span<const std::int32_t> labels) {
  const std::int64_t classes = logits.dim(logits.rank() - 1);
  const std::int64_t rows = logits.numel() / classes;
  std::int64_t hits = 0;
  for (std::int64_t r = 0; r < rows; ++r) {
    const S* z = logits.value().data() + r * classes;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < classes; ++j) {
      if (z[j] > z[best]) best = j;
    }
    if (best == labels[static_cast<std::size_t>(r)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(rows);
}

// Full forward pass: embedding, all blocks, classifier, mean cross-entropy.
template <class S>
ForwardResult<S> forward_loss(const Model<S>& m, const Batch& batch,
                              const AttentionExec<S>& attn_exec) {
  if (batch.seq_len != m.cfg.seq_len ||
      batch.tokens.size() !=
          static_cast<std::size_t>(batch.batch_size * batch.seq_len) ||
      batch.labels.size() != static_cast<std::size_t>(batch.batch_size)) {
    raise(ErrorCode::kShapeMismatch, "batch dims do not match model config");
  }
  Tensor<S> x = embed_tokens(m, batch.tokens, batch.batch_size);
  x = run_blocks(m, x, 0, m.cfg.layers, attn_exec);
  ForwardResult<S> r;
  r.logits = classify(m, x);
  r.loss = cross_entropy(r.logits, batch.labels);
  r.accuracy = batch_accuracy(r.logits, batch.labels);
  return r;
}

template <class S>
ForwardResult<S> forward_loss(const Model<S>& m, const Batch& batch) {
  return forward_loss(m, batch, inline_attention_exec<S>());
}

// Gradient views over a parameter list after a backward pass. The graph that
// produced the gradients must stay alive while the views are in use.
template <class S>
std::vector<std::span<const S>> grad_views(const std::vector<Parameter<S>>& params) {
  std::vector<std::span<const S>> out;
  out.reserve(params.size());
  for (const auto& p : params) {
    if (!p.value.has_grad()) {
      raise(ErrorCode::kShapeMismatch, "parameter " + p.name + " has no gradient");
    }
    out.emplace_back(p.value.grad());
  }
  return out;
}

// One canonical train step: forward, backward, SGD over every parameter.
// The single-stage baseline and the degenerate S=1 pipeline both run exactly
// this sequence, so their trajectories are bit-comparable.
template <class S>
ForwardResult<S> sequential_train_step(Model<S>& m, const Batch& batch, S lr,
                                       const AttentionExec<S>& attn_exec) {
  ForwardResult<S> r = forward_loss(m, batch, attn_exec);
  backward(r.loss);
  sgd_step(m.params, lr, grad_views(m.params));
  return r;
}

template <class S>
ForwardResult<S> sequential_train_step(Model<S>& m, const Batch& batch, S lr) {
  return sequential_train_step(m, batch, lr, inline_attention_exec<S>());
}

// Deterministic classification task: every sample plants a majority token
// drawn from the label's vocab bucket (vocab split into `classes` equal
// ranges), so the label is recoverable from token statistics. Sample i of any
// batch stream has label i mod classes, keeping classes balanced within one
// sample.
class SyntheticTask {
 public:
  SyntheticTask(std::int64_t vocab, std::int64_t seq_len, std::int64_t classes,
                std::uint32_t seed);

  // Samples [first_index, first_index + size); random-access reproducible.
  Batch make_batch(std::int64_t first_index, std::int64_t size) const;

  std::int64_t vocab() const { return vocab_; }
  std::int64_t seq_len() const { return seq_len_; }
  std::int64_t classes() const { return classes_; }

 private:
  std::int64_t vocab_;
  std::int64_t seq_len_;
  std::int64_t classes_;
  std::uint32_t seed_;
};

// Checkpoint file: u32 LE config-JSON length, the JSON, then one WEIGHTS
// frame holding every parameter tensor in layout order.
void save_checkpoint(const std::string& path, const Model<float>& m);
Model<float> load_checkpoint(const std::string& path);

}  // namespace lanepipe

#endif  // LANEPIPE_MODEL_HPP_
