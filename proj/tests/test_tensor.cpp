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

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "lanepipe/error.hpp"
#include "lanepipe/tensor.hpp"

using namespace lanepipe;

namespace {

double urand(std::mt19937& rng, double lo, double hi) {
  const std::uint64_t r =
      (static_cast<std::uint64_t>(rng()) << 32) | static_cast<std::uint64_t>(rng());
  const double u = static_cast<double>(r >> 11) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

std::int64_t irand(std::mt19937& rng, std::int64_t lo, std::int64_t hi) {
  return lo + static_cast<std::int64_t>(rng() % static_cast<std::uint32_t>(hi - lo + 1));
}

std::vector<double> rand_values(std::mt19937& rng, std::int64_t n, double lo = -1.0,
                                double hi = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = urand(rng, lo, hi);
  return v;
}

// Independent matrix-product reference: j-major with an explicit accumulator,
// a different loop nest than the library's.
std::vector<double> ref_matmul(const std::vector<double>& a, const std::vector<double>& b,
                               std::int64_t m, std::int64_t k, std::int64_t n) {
  std::vector<double> c(static_cast<std::size_t>(m * n), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::int64_t t = 0; t < k; ++t) {
        acc += a[static_cast<std::size_t>(i * k + t)] *
               b[static_cast<std::size_t>(t * n + j)];
      }
      c[static_cast<std::size_t>(i * n + j)] = acc;
    }
  }
  return c;
}

#define CHECK_RAISES(expr, expected_code)                    \
  do {                                                       \
    bool caught_ = false;                                    \
    try {                                                    \
      (void)(expr);                                          \
    } catch (const Error& e_) {                              \
      caught_ = true;                                        \
      CHECK(e_.code() == (expected_code));                   \
    }                                                        \
    CHECK_MESSAGE(caught_, "expected an Error from " #expr); \
  } while (0)

// ---------------------------------------------------------------------------
// Finite-difference gradient checking (64-bit only).
// ---------------------------------------------------------------------------

struct LeafSpec {
  std::vector<std::int64_t> shape;
  double lo = -1.0;
  double hi = 1.0;
  // Values with |v| < avoid_zero are pushed out to +-avoid_zero (kinked ops).
  double avoid_zero = 0.0;
  // Optional post-draw adjustment (e.g. guarantee per-row spread).
  std::function<void(std::vector<double>&)> condition;
};

using Builder = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Scalar reducer with a non-uniform seed gradient: 0.5 * sum(x .* x).
Tensor<double> half_sq_sum(const Tensor<double>& x) {
  return scale(sum_all(mul(x, x)), 0.5);
}

void run_gradcheck(const std::string& name, const std::vector<LeafSpec>& specs,
                   const Builder& build, std::mt19937& rng) {
  CAPTURE(name);
  std::vector<std::vector<double>> vals;
  vals.reserve(specs.size());
  for (const auto& s : specs) {
    auto v = rand_values(rng, detail::numel_of(s.shape), s.lo, s.hi);
    if (s.avoid_zero > 0.0) {
      for (auto& x : v) {
        if (std::abs(x) < s.avoid_zero) x = x < 0 ? -s.avoid_zero : s.avoid_zero;
      }
    }
    if (s.condition) s.condition(v);
    vals.push_back(std::move(v));
  }

  auto make_leaves = [&](const std::vector<std::vector<double>>& vv, bool rg) {
    std::vector<Tensor<double>> leaves;
    leaves.reserve(specs.size());
    for (std::size_t i = 0; i < specs.size(); ++i) {
      leaves.push_back(Tensor<double>::from(specs[i].shape, vv[i], rg));
    }
    return leaves;
  };

  auto leaves = make_leaves(vals, true);
  Tensor<double> loss = build(leaves);
  REQUIRE(loss.numel() == 1);
  backward(loss);

  const double h = 1e-5;
  for (std::size_t li = 0; li < specs.size(); ++li) {
    for (std::size_t e = 0; e < vals[li].size(); ++e) {
      auto vp = vals;
      vp[li][e] += h;
      const double fp = build(make_leaves(vp, false)).item();
      auto vm = vals;
      vm[li][e] -= h;
      const double fm = build(make_leaves(vm, false)).item();
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = leaves[li].has_grad() ? leaves[li].grad()[e] : 0.0;
      const double tol =
          1e-4 * std::max({std::abs(analytic), std::abs(numeric), 1e-3});
      CAPTURE(li);
      CAPTURE(e);
      CHECK(std::abs(analytic - numeric) <= tol);
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward values against hand examples and the triple-loop oracle
// ---------------------------------------------------------------------------

TEST_CASE("matmul identity and hand examples") {
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto m = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto prod = matmul(eye, m);
  CHECK(prod.value() == std::vector<double>{1, 2, 3, 4});

  auto a = Tensor<double>::from({1, 2}, {1, 2});
  auto b = Tensor<double>::from({2, 1}, {3, 4});
  CHECK(matmul(a, b).item() == doctest::Approx(11.0));
}

TEST_CASE("matmul matches triple-loop reference on random instances") {
  std::mt19937 rng(20260814);
  for (int iter = 0; iter < 20; ++iter) {
    const std::int64_t m = irand(rng, 1, 6), k = irand(rng, 1, 6), n = irand(rng, 1, 6);
    auto av = rand_values(rng, m * k);
    auto bv = rand_values(rng, k * n);
    auto c = matmul(Tensor<double>::from({m, k}, av), Tensor<double>::from({k, n}, bv));
    auto want = ref_matmul(av, bv, m, k, n);
    for (std::size_t i = 0; i < want.size(); ++i) {
      CHECK(c.value()[i] == doctest::Approx(want[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  CHECK_RAISES(matmul(a, b), ErrorCode::kShapeMismatch);
}

TEST_CASE("softmax symmetry, stability, and reference row") {
  auto s = softmax_rows(Tensor<double>::from({1, 2}, {0, 0}));
  CHECK(s.value()[0] == doctest::Approx(0.5));
  CHECK(s.value()[1] == doctest::Approx(0.5));

  auto big = softmax_rows(Tensor<double>::from({1, 2}, {1000, 1000}));
  CHECK(std::isfinite(big.value()[0]));
  CHECK(big.value()[0] == doctest::Approx(0.5));

  auto r = softmax_rows(Tensor<double>::from({1, 3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(r.value()[0] == doctest::Approx(std::exp(1.0) / z).epsilon(1e-12));
  CHECK(r.value()[1] == doctest::Approx(std::exp(2.0) / z).epsilon(1e-12));
  CHECK(r.value()[2] == doctest::Approx(std::exp(3.0) / z).epsilon(1e-12));
}

TEST_CASE("softmax rows sum to one for inputs up to 1e3 in magnitude") {
  std::mt19937 rng(7);
  for (int iter = 0; iter < 50; ++iter) {
    const std::int64_t rows = irand(rng, 1, 4), cols = irand(rng, 1, 8);
    auto x = Tensor<double>::from({rows, cols}, rand_values(rng, rows * cols, -1e3, 1e3));
    auto p = softmax_rows(x);
    for (std::int64_t r = 0; r < rows; ++r) {
      double sum = 0.0;
      for (std::int64_t c = 0; c < cols; ++c) {
        const double v = p.value()[static_cast<std::size_t>(r * cols + c)];
        CHECK(std::isfinite(v));
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("relu, cross-entropy, and layer-norm hand examples") {
  auto r = relu(Tensor<double>::from({3}, {-1, 0, 2}));
  CHECK(r.value() == std::vector<double>{0, 0, 2});

  const std::int32_t label0[] = {0};
  auto ce = cross_entropy(Tensor<double>::from({2}, {0, 0}), label0);
  CHECK(ce.item() == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  auto ln = layer_norm(Tensor<double>::from({3}, {1, 2, 3}),
                       Tensor<double>::from({3}, {1, 1, 1}),
                       Tensor<double>::from({3}, {0, 0, 0}));
  double mean = 0.0;
  for (double v : ln.value()) mean += v;
  mean /= 3.0;
  double var = 0.0;
  for (double v : ln.value()) var += (v - mean) * (v - mean);
  var /= 3.0;
  CHECK(std::abs(mean) <= 1e-6);
  // The regularizer inside the square root dampens the output variance to
  // var/(var + 1e-5); for this input that is 1 - 1.5e-5, so the check allows
  // exactly that much.
  CHECK(std::abs(var - 1.0) <= 2e-5);
}

TEST_CASE("layer_norm output is finite even on a constant row") {
  auto ln = layer_norm(Tensor<double>::from({4}, {5, 5, 5, 5}),
                       Tensor<double>::from({4}, {1, 1, 1, 1}),
                       Tensor<double>::from({4}, {0, 0, 0, 0}));
  for (double v : ln.value()) CHECK(std::isfinite(v));
}

TEST_CASE("cross_entropy label chooses the right logit") {
  const std::int32_t labels[] = {2, 0};
  auto logits = Tensor<double>::from({2, 3}, {0.1, -0.3, 0.7, 1.2, 0.0, -0.5});
  auto loss = cross_entropy(logits, labels);
  double want = 0.0;
  {
    const double z0 = std::exp(0.1) + std::exp(-0.3) + std::exp(0.7);
    want += std::log(z0) - 0.7;
    const double z1 = std::exp(1.2) + std::exp(0.0) + std::exp(-0.5);
    want += std::log(z1) - 1.2;
  }
  CHECK(loss.item() == doctest::Approx(want / 2.0).epsilon(1e-12));
}

// ---------------------------------------------------------------------------
// Backward: trivial identities, then finite differences across every op
// ---------------------------------------------------------------------------

TEST_CASE("backward of sum gives all-ones gradient") {
  auto x = Tensor<double>::from({2, 3}, {1, -2, 3, 4, -5, 6}, true);
  backward(sum_all(x));
  CHECK(x.grad() == std::vector<double>(6, 1.0));
}

TEST_CASE("backward of half sum of squares gives x back") {
  auto x = Tensor<double>::from({4}, {0.5, -1.5, 2.0, 0.0}, true);
  backward(half_sq_sum(x));
  for (int i = 0; i < 4; ++i) {
    CHECK(x.grad()[static_cast<std::size_t>(i)] ==
          doctest::Approx(x.value()[static_cast<std::size_t>(i)]));
  }
}

TEST_CASE("gradients match central finite differences on random instances") {
  std::mt19937 rng(915234);
  const int kInstances = 100;

  SUBCASE("matmul") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t m = irand(rng, 1, 4), k = irand(rng, 1, 4), n = irand(rng, 1, 4);
      run_gradcheck(
          "matmul", {{{m, k}}, {{k, n}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(matmul(L[0], L[1]));
          },
          rng);
    }
  }

  SUBCASE("linear") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t r = irand(rng, 1, 4), in = irand(rng, 1, 4), out = irand(rng, 1, 4);
      run_gradcheck(
          "linear", {{{r, in}}, {{in, out}}, {{out}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(linear(L[0], L[1], L[2]));
          },
          rng);
    }
  }

  SUBCASE("softmax_rows") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t r = irand(rng, 1, 3), c = irand(rng, 2, 5);
      run_gradcheck(
          "softmax_rows", {{{r, c}, -2.0, 2.0}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(softmax_rows(L[0]));
          },
          rng);
    }
  }

  SUBCASE("add and add_bias_row") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t r = irand(rng, 1, 4), c = irand(rng, 1, 4);
      run_gradcheck(
          "add", {{{r, c}}, {{r, c}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(add(L[0], L[1]));
          },
          rng);
      run_gradcheck(
          "add_bias_row", {{{r, c}}, {{c}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(add_bias_row(L[0], L[1]));
          },
          rng);
    }
  }

  SUBCASE("scale, mul, relu") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t n = irand(rng, 1, 8);
      run_gradcheck(
          "scale", {{{n}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(scale(L[0], 0.7));
          },
          rng);
      run_gradcheck(
          "mul", {{{n}}, {{n}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(mul(L[0], L[1]));
          },
          rng);
      LeafSpec relu_spec{{n}};
      relu_spec.avoid_zero = 1e-3;
      run_gradcheck(
          "relu", {relu_spec},
          [](const std::vector<Tensor<double>>& L) { return half_sq_sum(relu(L[0])); },
          rng);
    }
  }

  SUBCASE("layer_norm") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t r = irand(rng, 1, 3), c = irand(rng, 3, 6);
      LeafSpec xs{{r, c}, -2.0, 2.0};
      // Rows with near-zero spread make the normalizer's third derivative
      // blow up and finite differences meaningless; force a spread.
      xs.condition = [r, c](std::vector<double>& v) {
        for (std::int64_t row = 0; row < r; ++row) {
          double mean = 0.0;
          for (std::int64_t j = 0; j < c; ++j) mean += v[static_cast<std::size_t>(row * c + j)];
          mean /= static_cast<double>(c);
          double var = 0.0;
          for (std::int64_t j = 0; j < c; ++j) {
            const double d = v[static_cast<std::size_t>(row * c + j)] - mean;
            var += d * d;
          }
          var /= static_cast<double>(c);
          if (var < 0.1) {
            for (std::int64_t j = 0; j < c; ++j) {
              v[static_cast<std::size_t>(row * c + j)] += (j % 2 == 0 ? 0.7 : -0.7);
            }
          }
        }
      };
      run_gradcheck(
          "layer_norm", {xs, {{c}, 0.5, 1.5}, {{c}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(layer_norm(L[0], L[1], L[2]));
          },
          rng);
    }
  }

  SUBCASE("cross_entropy") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t r = irand(rng, 1, 4), c = irand(rng, 2, 5);
      std::vector<std::int32_t> labels(static_cast<std::size_t>(r));
      for (auto& lb : labels) lb = static_cast<std::int32_t>(irand(rng, 0, c - 1));
      run_gradcheck(
          "cross_entropy", {{{r, c}, -2.0, 2.0}},
          [labels](const std::vector<Tensor<double>>& L) {
            return cross_entropy(L[0], labels);
          },
          rng);
    }
  }

  SUBCASE("embedding and select_first_position") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t vocab = irand(rng, 2, 5), w = irand(rng, 1, 4);
      const std::int64_t b = irand(rng, 1, 2), n = irand(rng, 1, 3);
      std::vector<std::int32_t> tokens(static_cast<std::size_t>(b * n));
      for (auto& t : tokens) t = static_cast<std::int32_t>(irand(rng, 0, vocab - 1));
      run_gradcheck(
          "embedding", {{{vocab, w}}},
          [tokens, b, n](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(embedding(L[0], tokens, b, n));
          },
          rng);
      run_gradcheck(
          "select_first_position", {{{b, n, w}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(select_first_position(L[0]));
          },
          rng);
    }
  }

  SUBCASE("concat_last_dim and slice_cols") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t r = irand(rng, 1, 3);
      const std::int64_t c1 = irand(rng, 1, 3), c2 = irand(rng, 1, 3), c3 = irand(rng, 1, 3);
      run_gradcheck(
          "concat_last_dim", {{{r, c1}}, {{r, c2}}, {{r, c3}}},
          [](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(concat_last_dim<double>({L[0], L[1], L[2]}));
          },
          rng);
      const std::int64_t cols = irand(rng, 2, 6);
      const std::int64_t a = irand(rng, 0, cols - 1);
      const std::int64_t b = irand(rng, a + 1, cols);
      run_gradcheck(
          "slice_cols", {{{r, cols}}},
          [a, b](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(slice_cols(L[0], a, b));
          },
          rng);
    }
  }

  SUBCASE("head-blocked score and mix products") {
    for (int i = 0; i < kInstances; ++i) {
      const std::int64_t B = irand(rng, 1, 2), heads = irand(rng, 1, 3);
      const std::int64_t n = irand(rng, 1, 3), dh = irand(rng, 1, 3);
      const double alpha = 1.0 / std::sqrt(static_cast<double>(dh));
      run_gradcheck(
          "bmm_head_scores", {{{B, n, heads * dh}}, {{B, n, heads * dh}}},
          [heads, alpha](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(bmm_head_scores(L[0], L[1], heads, alpha));
          },
          rng);
      run_gradcheck(
          "bmm_head_mix", {{{B * heads, n, n}}, {{B, n, heads * dh}}},
          [heads](const std::vector<Tensor<double>>& L) {
            return half_sq_sum(bmm_head_mix(L[0], L[1], heads));
          },
          rng);
    }
  }

  SUBCASE("composed block: layer_norm -> linear -> relu -> linear -> loss") {
    for (int i = 0; i < 20; ++i) {
      const std::int64_t r = irand(rng, 1, 3), d = irand(rng, 3, 5), hdim = irand(rng, 2, 4);
      std::vector<std::int32_t> labels(static_cast<std::size_t>(r));
      for (auto& lb : labels) lb = static_cast<std::int32_t>(irand(rng, 0, 1));
      LeafSpec xs{{r, d}, -2.0, 2.0};
      run_gradcheck(
          "composed_block",
          {xs, {{d}, 0.5, 1.5}, {{d}}, {{d, hdim}}, {{hdim}}, {{hdim, 2}}, {{2}}},
          [labels](const std::vector<Tensor<double>>& L) {
            auto h = layer_norm(L[0], L[1], L[2]);
            auto z = relu(linear(h, L[3], L[4]));
            return cross_entropy(linear(z, L[5], L[6]), labels);
          },
          rng);
    }
  }
}

// ---------------------------------------------------------------------------
// Head-blocked products against a per-head slicing reference
// ---------------------------------------------------------------------------

TEST_CASE("bmm_head_scores and bmm_head_mix match explicit per-head reference") {
  std::mt19937 rng(5150);
  const std::int64_t B = 2, heads = 3, n = 4, dh = 2, w = heads * dh;
  auto qv = rand_values(rng, B * n * w);
  auto kv = rand_values(rng, B * n * w);
  auto vv = rand_values(rng, B * n * w);
  const double alpha = 0.6;

  auto q = Tensor<double>::from({B, n, w}, qv);
  auto k = Tensor<double>::from({B, n, w}, kv);
  auto v = Tensor<double>::from({B, n, w}, vv);
  auto scores = bmm_head_scores(q, k, heads, alpha);
  auto mixed = bmm_head_mix(scores, v, heads);

  auto slice_head = [&](const std::vector<double>& src, std::int64_t b, std::int64_t h) {
    std::vector<double> out(static_cast<std::size_t>(n * dh));
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c < dh; ++c)
        out[static_cast<std::size_t>(i * dh + c)] =
            src[static_cast<std::size_t>(b * n * w + i * w + h * dh + c)];
    return out;
  };
  auto transpose = [&](const std::vector<double>& m_in, std::int64_t rows, std::int64_t cols) {
    std::vector<double> out(m_in.size());
    for (std::int64_t i = 0; i < rows; ++i)
      for (std::int64_t j = 0; j < cols; ++j)
        out[static_cast<std::size_t>(j * rows + i)] = m_in[static_cast<std::size_t>(i * cols + j)];
    return out;
  };

  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t h = 0; h < heads; ++h) {
      auto qh = slice_head(qv, b, h);
      auto kh = slice_head(kv, b, h);
      auto vh = slice_head(vv, b, h);
      auto want_scores = ref_matmul(qh, transpose(kh, n, dh), n, dh, n);
      for (auto& s : want_scores) s *= alpha;
      for (std::int64_t i = 0; i < n * n; ++i) {
        CHECK(scores.value()[static_cast<std::size_t>(((b * heads + h) * n * n) + i)] ==
              doctest::Approx(want_scores[static_cast<std::size_t>(i)]).epsilon(1e-12));
      }
      auto want_mix = ref_matmul(want_scores, vh, n, n, dh);
      for (std::int64_t i = 0; i < n; ++i) {
        for (std::int64_t c = 0; c < dh; ++c) {
          CHECK(mixed.value()[static_cast<std::size_t>(b * n * w + i * w + h * dh + c)] ==
                doctest::Approx(want_mix[static_cast<std::size_t>(i * dh + c)]).epsilon(1e-12));
        }
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Error paths
// ---------------------------------------------------------------------------

TEST_CASE("backward rejects non-scalar roots and double consumption") {
  auto x = Tensor<double>::from({2}, {1, 2}, true);
  CHECK_RAISES(backward(x), ErrorCode::kNotScalar);

  auto loss = sum_all(x);
  backward(loss);
  CHECK_RAISES(backward(loss), ErrorCode::kGraphAlreadyConsumed);
}

TEST_CASE("shape and label validation") {
  auto a = Tensor<double>::zeros({2, 2});
  auto b = Tensor<double>::zeros({3, 2});
  CHECK_RAISES(add(a, b), ErrorCode::kShapeMismatch);
  CHECK_RAISES(Tensor<double>::from({2, 2}, {1, 2, 3}), ErrorCode::kShapeMismatch);
  CHECK_RAISES(a.item(), ErrorCode::kNotScalar);

  const std::int32_t bad_label[] = {3};
  CHECK_RAISES(cross_entropy(Tensor<double>::zeros({1, 3}), bad_label),
               ErrorCode::kLabelOutOfRange);
  const std::int32_t neg_label[] = {-1};
  CHECK_RAISES(cross_entropy(Tensor<double>::zeros({1, 3}), neg_label),
               ErrorCode::kLabelOutOfRange);

  const std::int32_t bad_token[] = {9};
  CHECK_RAISES(embedding(Tensor<double>::zeros({4, 2}), bad_token, 1, 1),
               ErrorCode::kLabelOutOfRange);

  CHECK_RAISES(slice_cols(Tensor<double>::zeros({2, 3}), 2, 2), ErrorCode::kShapeMismatch);
  CHECK_RAISES(bmm_head_scores(Tensor<double>::zeros({1, 2, 3}),
                               Tensor<double>::zeros({1, 2, 3}), 2, 1.0),
               ErrorCode::kShapeMismatch);
}

TEST_CASE("backward_with_seed needs a matching seed length") {
  auto x = Tensor<double>::from({2, 2}, {1, 2, 3, 4}, true);
  auto y = scale(x, 2.0);
  const double short_seed[] = {1.0};
  CHECK_RAISES(backward_with_seed(y, std::span<const double>(short_seed, 1)),
               ErrorCode::kShapeMismatch);
  const std::vector<double> seed{1, 0, 0, 1};
  backward_with_seed(y, std::span<const double>(seed.data(), seed.size()));
  CHECK(x.grad() == std::vector<double>{2, 0, 0, 2});
}

// ---------------------------------------------------------------------------
// Optimizer semantics
// ---------------------------------------------------------------------------

TEST_CASE("sgd_step updates value and always advances version") {
  std::vector<Parameter<double>> params;
  params.push_back({"w", Tensor<double>::from({1}, {1.0}, true), 0});

  std::vector<double> g{1.0};
  sgd_step(params, 0.1, {std::span<const double>(g.data(), 1)});
  CHECK(params[0].value.item() == doctest::Approx(0.9));
  CHECK(params[0].version == 1);

  std::vector<double> zero{0.0};
  sgd_step(params, 0.1, {std::span<const double>(zero.data(), 1)});
  CHECK(params[0].value.item() == doctest::Approx(0.9));
  CHECK(params[0].version == 2);

  sgd_step(params, 0.1, {std::span<const double>(g.data(), 1)});
  sgd_step(params, 0.1, {std::span<const double>(g.data(), 1)});
  CHECK(params[0].version == 4);

  std::vector<double> wrong{1.0, 2.0};
  CHECK_RAISES(sgd_step(params, 0.1, {std::span<const double>(wrong.data(), 2)}),
               ErrorCode::kShapeMismatch);
}

TEST_CASE("sgd_step leaves earlier value snapshots untouched") {
  std::vector<Parameter<double>> params;
  params.push_back({"w", Tensor<double>::from({2}, {1.0, 2.0}, true), 0});

  Tensor<double> snapshot = params[0].value;
  auto y = scale(snapshot, 3.0);

  std::vector<double> g{1.0, 1.0};
  sgd_step(params, 0.5, {std::span<const double>(g.data(), 2)});

  CHECK(params[0].value.value() == std::vector<double>{0.5, 1.5});
  CHECK(snapshot.value() == std::vector<double>{1.0, 2.0});
  CHECK(y.value() == std::vector<double>{3.0, 6.0});
  backward_with_seed(y, std::span<const double>(g.data(), 2));
  CHECK(snapshot.grad() == std::vector<double>{3.0, 3.0});
}

// ---------------------------------------------------------------------------
// Determinism and finiteness
// ---------------------------------------------------------------------------

TEST_CASE("identical inputs give bit-identical results") {
  std::mt19937 rng(42);
  auto xv = rand_values(rng, 12);
  auto wv = rand_values(rng, 12);

  auto once = [&]() {
    auto x = Tensor<float>::from({3, 4}, std::vector<float>(xv.begin(), xv.end()), true);
    auto w = Tensor<float>::from({4, 3}, std::vector<float>(wv.begin(), wv.end()), true);
    auto probs = softmax_rows(matmul(x, w));
    auto loss = scale(sum_all(mul(probs, probs)), 0.5f);
    backward(loss);
    return std::make_pair(probs.value(), w.grad());
  };
  auto [v1, g1] = once();
  auto [v2, g2] = once();
  CHECK(std::memcmp(v1.data(), v2.data(), v1.size() * sizeof(float)) == 0);
  CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(float)) == 0);
}

TEST_CASE("operations stay finite on bounded-magnitude inputs") {
  std::mt19937 rng(99);
  for (int iter = 0; iter < 10; ++iter) {
    auto x = Tensor<double>::from({3, 5}, rand_values(rng, 15, -1e3, 1e3));
    auto w = Tensor<double>::from({5, 4}, rand_values(rng, 20, -1e3, 1e3));
    for (double v : matmul(x, w).value()) CHECK(std::isfinite(v));
    for (double v : softmax_rows(x).value()) CHECK(std::isfinite(v));
    auto ln = layer_norm(x, Tensor<double>::from({5}, rand_values(rng, 5)),
                         Tensor<double>::from({5}, rand_values(rng, 5)));
    for (double v : ln.value()) CHECK(std::isfinite(v));
    const std::int32_t labels[] = {0, 1, 2};
    CHECK(std::isfinite(
        cross_entropy(Tensor<double>::from({3, 5}, rand_values(rng, 15, -1e3, 1e3)), labels)
            .item()));
  }
}

// ---------------------------------------------------------------------------
// Memory tracking
// ---------------------------------------------------------------------------

TEST_CASE("tracker counts value and gradient bytes and frees on release") {
  MemoryTracker mt;
  CHECK(mt.live_bytes() == 0);
  {
    TrackerScope scope(&mt);
    auto a = Tensor<float>::zeros({4, 5}, true);
    CHECK(mt.live_bytes() == 80);
    auto b = Tensor<float>::zeros({5, 3}, true);
    CHECK(mt.live_bytes() == 140);
    auto c = matmul(a, b);
    CHECK(mt.live_bytes() == 188);
    auto loss = sum_all(c);
    CHECK(mt.live_bytes() == 192);
    backward(loss);
    // Gradients: loss 4 + c 48 + a 80 + b 60.
    CHECK(mt.live_bytes() == 192 + 4 + 48 + 80 + 60);
    CHECK(mt.high_water_bytes() == mt.live_bytes());
  }
  CHECK(mt.live_bytes() == 0);
  CHECK(mt.high_water_bytes() == 384);
}

TEST_CASE("nodes report frees to their own tracker even if scope changed") {
  MemoryTracker mt;
  Tensor<float> escaped;
  {
    TrackerScope scope(&mt);
    escaped = Tensor<float>::zeros({8});
  }
  CHECK(mt.live_bytes() == 32);
  escaped = Tensor<float>();
  CHECK(mt.live_bytes() == 0);
}
