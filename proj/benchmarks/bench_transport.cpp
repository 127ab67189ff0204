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

#include "lanepipe/transport.hpp"

namespace {

using namespace lanepipe;

// An activation frame as the pipeline ships it: one (batch, seq, d_model)
// tensor plus the per-sample labels.
PipeMessage make_message() {
  std::mt19937 rng(5);
  std::uniform_real_distribution<float> dist(-1.0f, 1.0f);

  std::vector<float> act(8 * 16 * 48);
  for (float& v : act) v = dist(rng);
  std::vector<float> labels(8);
  for (float& v : labels) v = dist(rng);

  PipeMessage m;
  m.type = MsgType::kActivation;
  m.batch_id = 42;
  m.version = 7;
  m.tensors.push_back(WireTensor::from_f32({8, 16, 48}, std::move(act)));
  m.tensors.push_back(WireTensor::from_f32({8}, std::move(labels)));
  return m;
}

void BM_Encode(benchmark::State& state) {
  const PipeMessage m = make_message();
  std::size_t bytes = 0;
  for (auto _ : state) {
    std::vector<std::uint8_t> frame = encode(m);
    bytes = frame.size();
    benchmark::DoNotOptimize(frame.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(bytes) * state.iterations());
}
BENCHMARK(BM_Encode);

void BM_Decode(benchmark::State& state) {
  const std::vector<std::uint8_t> frame = encode(make_message());
  for (auto _ : state) {
    PipeMessage m = decode(frame);
    benchmark::DoNotOptimize(m.tensors.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(frame.size()) * state.iterations());
}
BENCHMARK(BM_Decode);

void BM_DecodeStream(benchmark::State& state) {
  const std::vector<std::uint8_t> frame = encode(make_message());
  std::vector<std::uint8_t> stream;
  for (int i = 0; i < 16; ++i) stream.insert(stream.end(), frame.begin(), frame.end());
  for (auto _ : state) {
    std::vector<PipeMessage> msgs = decode_stream(stream);
    benchmark::DoNotOptimize(msgs.data());
  }
  state.SetBytesProcessed(static_cast<std::int64_t>(stream.size()) * state.iterations());
}
BENCHMARK(BM_DecodeStream);

}  // namespace

BENCHMARK_MAIN();
