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
// 1F1B pipeline training across S stages. Each stage walks its own schedule
// (warmup forwards, strict forward/backward alternation, drain) against FIFO
// links, stashing the forward graph and the exact weight nodes each batch
// used so its backward replays against the same snapshot. Stages keep a
// model-time clock: attention costs come from the lane cost models, stamps
// ride loopback messages, and the steady-state gap between backward
// completions is the measured batch latency.

#ifndef LANEPIPE_PIPELINE_HPP_
#define LANEPIPE_PIPELINE_HPP_

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "lanepipe/lanes.hpp"
#include "lanepipe/model.hpp"
#include "lanepipe/partition.hpp"
#include "lanepipe/transport.hpp"

namespace lanepipe {

enum class PipePhase : std::uint8_t { kForward = 0, kBackward = 1 };

const char* pipe_phase_name(PipePhase p);

struct PipeEvent {
  PipePhase phase = PipePhase::kForward;
  std::int64_t batch = 0;

  friend bool operator==(const PipeEvent&, const PipeEvent&) = default;
};

// Event order for one stage: min(stages - stage, batches) warmup forwards,
// then strict F/B alternation, then draining backwards; 2 * batches events.
std::vector<PipeEvent> stage_schedule(std::int64_t stages, std::int64_t stage,
                                      std::int64_t batches);

// stage_schedule for every stage.
std::vector<std::vector<PipeEvent>> build_schedule(std::int64_t stages,
                                                   std::int64_t batches);

// One executed phase. `version` is the weight version the phase used (equal
// for a batch's forward and backward by the stashing contract). `ms` is model
// time when the stage runs on lanes, wall time otherwise. `t_ms` is the
// stage's clock after the event; clocks synchronize across stages through
// message stamps. `stash_size` is the occupancy after the event.
struct TraceEvent {
  std::int64_t stage = 0;
  std::int64_t batch = 0;
  PipePhase phase = PipePhase::kForward;
  std::int64_t version = 0;
  double ms = 0.0;
  std::int64_t peak_bytes = 0;
  double t_ms = 0.0;
  std::int64_t stash_size = 0;
  double loss = -1.0;      // last-stage forwards only
  double accuracy = -1.0;  // last-stage forwards only
};

// {"stage":..,"batch":..,"phase":..,"version":..,"ms":..,"peak_bytes":..,
//  "t_ms":..} plus loss/accuracy when present. One line, no newline.
std::string trace_event_to_json(const TraceEvent& e);

// Thread-safe JSONL sink shared by concurrently running stages.
class MetricsWriter {
 public:
  explicit MetricsWriter(std::ostream* out) : out_(out) {}
  void write(const TraceEvent& e);

 private:
  std::mutex mu_;
  std::ostream* out_;
};

// Saved forward state for one in-flight batch: the boundary tensors, the loss
// (last stage), and the weight nodes the forward captured. Holding `weights`
// is what stashes the version: the optimizer replaces parameter nodes instead
// of mutating them, so these stay frozen until the ticket dies.
struct BatchTicket {
  std::int64_t batch_id = 0;
  std::int64_t version = 0;
  Tensor<float> input;
  Tensor<float> output;
  Tensor<float> loss;
  std::vector<Tensor<float>> weights;
  double attention_ms = 0.0;
};

// In-flight tickets keyed by batch id. Capacity is the stage's admission
// limit; exceeding it or taking an absent batch is a protocol violation.
class WeightStash {
 public:
  explicit WeightStash(std::int64_t capacity);

  void put(BatchTicket ticket);            // kStashMiss on overflow/duplicate
  BatchTicket take(std::int64_t batch_id);  // kStashMiss when absent

  std::int64_t size() const { return static_cast<std::int64_t>(tickets_.size()); }
  std::int64_t capacity() const { return capacity_; }

 private:
  std::int64_t capacity_;
  std::map<std::int64_t, BatchTicket> tickets_;
};

// How a stage executes attention. Null lanes: inline fused execution with no
// model-time cost. With lanes, forwards run split_forward under `plan` and
// cost its makespan; backwards cost `backward_scale` times the forward's
// attention time (autograd itself runs inline).
struct StageBackend {
  LaneSet* lanes = nullptr;
  ExecutionPlan plan;
  double backward_scale = 2.0;
};

struct StageContext {
  StageSpec spec;
  std::int64_t stages = 1;
  EncoderConfig cfg;
  std::int64_t batches = 1;
  std::int64_t batch_size = 1;
  float lr = 0.05f;
  std::uint32_t task_seed = 1;  // stage 0's data loader
  Link* upstream = nullptr;     // toward stage - 1; required unless stage 0
  Link* downstream = nullptr;   // toward stage + 1; required unless last
  StageBackend backend;
  MetricsWriter* metrics = nullptr;
  MemoryTracker* tracker = nullptr;  // installed thread-wide for the run
};

struct StageReport {
  std::int64_t stage = 0;
  std::vector<TraceEvent> trace;
  std::int64_t commits = 0;
  std::int64_t high_water_bytes = 0;
  std::vector<Parameter<float>> params;  // final values, layout order
  std::vector<double> losses;            // last stage only, batch order
  std::vector<double> accuracies;        // last stage only, batch order
  double steady_ms = 0.0;  // median gap between backward completions
};

// Runs one stage's full schedule. Raises kStashMiss on protocol violations
// and propagates kTransportClosed from the links.
StageReport run_stage(StageContext& ctx);

// [first, last) layout indices owned by a stage: stage 0 takes the embedding,
// the last stage takes the final norm and classifier.
std::pair<std::size_t, std::size_t> stage_param_range(const EncoderConfig& cfg,
                                                      const StageSpec& spec,
                                                      std::int64_t stages);

// Trainable scalar count of a stage's slice.
std::int64_t stage_param_scalars(const EncoderConfig& cfg, const StageSpec& spec,
                                 std::int64_t stages);

// Analytic peak accounting for one stage:
//   params * (1 + stash_depth) + activations * in_flight + scratch
// with stash_depth = in_flight = stages - stage, and scratch covering the
// gradient buffers of one weight set and one activation graph. Activation
// bytes come from a self-contained dry run of one microbatch.
struct MemoryBreakdown {
  std::int64_t stage = 0;
  std::int64_t param_bytes = 0;
  std::int64_t stash_depth = 0;
  std::int64_t activation_bytes = 0;
  std::int64_t in_flight = 0;
  std::int64_t scratch_bytes = 0;
  std::int64_t total_bytes = 0;

  std::string to_json() const;
};

MemoryBreakdown account_memory(const EncoderConfig& cfg, const StageSpec& spec,
                               std::int64_t stages, std::int64_t batch_size);

// One simulated or real device: a named group of lanes that a stage owns.
struct DeviceSpec {
  std::string name;
  std::vector<LaneSpec> lanes;
};

// The benchmark fleet: three identical devices, each with a "cpu" lane
// (1.0 * k ms fused, 1.2 * k per-head) and a "gpu" lane (3.0 + 0.5 * k fused,
// 3.0 * k per-head), so head-splitting across both beats either alone.
std::vector<DeviceSpec> reference_fleet();

struct PipelineOptions {
  EncoderConfig cfg;
  std::int64_t stages = 1;
  std::int64_t batches = 1;
  std::int64_t batch_size = 1;
  float lr = 0.05f;
  std::uint32_t task_seed = 1;
  std::vector<double> capacities;        // stage compute weights; empty = equal
  std::vector<StageBackend> backends;    // size `stages`, or empty for inline
  MetricsWriter* metrics = nullptr;
  bool track_memory = true;
};

struct PipelineResult {
  std::vector<StageSpec> stages;
  std::vector<StageReport> reports;
  std::vector<MemoryBreakdown> accounting;
  Model<float> model;            // reassembled final parameters
  std::vector<double> losses;    // per batch, from the last stage
  double steady_ms = 0.0;        // stage 0's steady-state batch gap
};

// All-in-one run: partitions the blocks, wires loopback links, runs every
// stage on its own thread, and reassembles the trained model. The first
// failing stage's error is rethrown after every thread joins.
PipelineResult run_pipeline(const PipelineOptions& options);

}  // namespace lanepipe

#endif  // LANEPIPE_PIPELINE_HPP_
