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

#include <benchmark/benchmark.h>

#include <cstdint>
#include <random>
#include <vector>

#include "lanepipe/attention.hpp"
#include "lanepipe/lanes.hpp"
#include "lanepipe/tensor.hpp"

namespace {

using namespace lanepipe;

constexpr std::int64_t kHeads = 12;
constexpr std::int64_t kDModel = 48;
constexpr std::int64_t kBatch = 8;
constexpr std::int64_t kSeq = 16;

Tensor<float> random_tensor(std::mt19937& rng, std::vector<std::int64_t> shape) {
  std::uniform_real_distribution<float> dist(-0.5f, 0.5f);
  Tensor<float> t = Tensor<float>::zeros(std::move(shape));
  for (float& v : t.mutable_value()) v = dist(rng);
  return t;
}

AttentionLayer<float> make_layer() {
  std::mt19937 rng(7);
  AttentionLayer<float> layer;
  layer.d_model = kDModel;
  layer.d_head = kDModel / kHeads;
  for (std::int64_t h = 0; h < kHeads; ++h) {
    layer.heads.push_back({random_tensor(rng, {kDModel, layer.d_head}),
                           random_tensor(rng, {kDModel, layer.d_head}),
                           random_tensor(rng, {kDModel, layer.d_head}), h});
  }
  return layer;
}

Tensor<float> make_input() {
  std::mt19937 rng(8);
  return random_tensor(rng, {kBatch, kSeq, kDModel});
}

LaneSet make_lanes(int count) {
  std::vector<LaneSpec> specs(static_cast<std::size_t>(count));
  for (int j = 0; j < count; ++j) {
    specs[static_cast<std::size_t>(j)].lane_id = j;
    specs[static_cast<std::size_t>(j)].name = "worker" + std::to_string(j);
    specs[static_cast<std::size_t>(j)].kind = LaneKind::kReal;
  }
  return discover_lanes(specs);
}

void BM_FusedForward(benchmark::State& state) {
  const AttentionLayer<float> layer = make_layer();
  const Tensor<float> x = make_input();
  const float alpha = default_attention_scale<float>(layer.d_head);
  for (auto _ : state) {
    Tensor<float> y = fused_forward(layer, x, alpha);
    benchmark::DoNotOptimize(y.value().data());
  }
}
BENCHMARK(BM_FusedForward);

void BM_PerHeadForward(benchmark::State& state) {
  const AttentionLayer<float> layer = make_layer();
  const Tensor<float> x = make_input();
  const float alpha = default_attention_scale<float>(layer.d_head);
  for (auto _ : state) {
    Tensor<float> y = per_head_forward(layer, x, alpha);
    benchmark::DoNotOptimize(y.value().data());
  }
}
BENCHMARK(BM_PerHeadForward);

// Splits the 12 heads evenly across `segments` worker lanes.
void BM_SplitForward(benchmark::State& state) {
  const int segments = static_cast<int>(state.range(0));
  const AttentionLayer<float> layer = make_layer();
  const Tensor<float> x = make_input();
  const float alpha = default_attention_scale<float>(layer.d_head);
  LaneSet lanes = make_lanes(segments);

  ExecutionPlan plan;
  const std::int64_t per = kHeads / segments;
  for (int j = 0; j < segments; ++j) {
    plan.segments.push_back({j, j * per, per, AttentionMode::kFused});
  }
  validate_execution_plan(plan, kHeads);

  for (auto _ : state) {
    SplitResult r = split_forward(layer, x, plan, lanes, alpha);
    benchmark::DoNotOptimize(r.output.value().data());
  }
}
BENCHMARK(BM_SplitForward)->Arg(1)->Arg(2)->Arg(4)->UseRealTime();

}  // namespace

BENCHMARK_MAIN();
