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

#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "lanepipe/scheduler.hpp"

namespace {

using namespace lanepipe;

constexpr std::int64_t kHeads = 12;

// Random monotone table: per-lane speed factor, strictly increasing rows.
ProfileTable make_table(std::int64_t lanes) {
  std::mt19937 rng(99);
  std::uniform_real_distribution<double> jitter(0.8, 1.2);
  std::uniform_real_distribution<double> log_scale(-0.8, 0.8);

  ProfileTable t;
  t.heads = kHeads;
  t.repetitions = 5;
  t.warmup = 2;
  for (std::int64_t j = 0; j < lanes; ++j) {
    t.lane_ids.push_back(static_cast<int>(j));
    const double scale = std::exp(log_scale(rng));
    std::vector<ProfileEntry> row;
    double acc = 0.0;
    for (std::int64_t k = 0; k < kHeads; ++k) {
      acc += scale * jitter(rng);
      row.push_back({acc, acc, AttentionMode::kFused});
    }
    t.entries.push_back(std::move(row));
  }
  t.validate();
  return t;
}

void BM_Allocate(benchmark::State& state) {
  const ProfileTable table = make_table(state.range(0));
  const double eps = default_epsilon_ms(table, kHeads);
  for (auto _ : state) {
    AllocationPlan plan = allocate(table, kHeads, eps, eps / 10.0);
    benchmark::DoNotOptimize(plan.makespan_ms);
  }
}
BENCHMARK(BM_Allocate)->Arg(2)->Arg(3)->Arg(4);

void BM_BruteForceAllocate(benchmark::State& state) {
  const ProfileTable table = make_table(state.range(0));
  for (auto _ : state) {
    AllocationPlan plan = brute_force_allocate(table, kHeads);
    benchmark::DoNotOptimize(plan.makespan_ms);
  }
}
BENCHMARK(BM_BruteForceAllocate)->Arg(2)->Arg(3)->Arg(4);

}  // namespace

BENCHMARK_MAIN();
