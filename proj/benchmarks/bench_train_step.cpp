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

#include "lanepipe/model.hpp"

namespace {

using namespace lanepipe;

void BM_ForwardLoss(benchmark::State& state) {
  EncoderConfig cfg;
  Model<float> m = build_model<float>(cfg);
  SyntheticTask task(cfg.vocab, cfg.seq_len, cfg.classes, 1);
  const Batch batch = task.make_batch(0, state.range(0));
  for (auto _ : state) {
    ForwardResult<float> r = forward_loss(m, batch);
    benchmark::DoNotOptimize(r.loss.item());
  }
}
BENCHMARK(BM_ForwardLoss)->Arg(1)->Arg(8)->Arg(32);

void BM_TrainStep(benchmark::State& state) {
  EncoderConfig cfg;
  Model<float> m = build_model<float>(cfg);
  SyntheticTask task(cfg.vocab, cfg.seq_len, cfg.classes, 1);
  const Batch batch = task.make_batch(0, state.range(0));
  for (auto _ : state) {
    ForwardResult<float> r = sequential_train_step(m, batch, 0.05f);
    benchmark::DoNotOptimize(r.loss.item());
  }
}
BENCHMARK(BM_TrainStep)->Arg(1)->Arg(8)->Arg(32);

}  // namespace

BENCHMARK_MAIN();
