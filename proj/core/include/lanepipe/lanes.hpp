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
// Execution lanes: a uniform front over heterogeneous compute backends. A
// real lane runs work on its own thread and reports scaled wall time; a
// simulated lane runs the same work for numerical fidelity but reports the
// time its cost model dictates, which makes timing-sensitive behavior exactly
// reproducible. Profiling measures every (lane, head count, mode) cell and
// produces the table the head allocator searches over.

#ifndef LANEPIPE_LANES_HPP_
#define LANEPIPE_LANES_HPP_

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "lanepipe/attention.hpp"
#include "lanepipe/error.hpp"
#include "lanepipe/tensor.hpp"

namespace lanepipe {

enum class LaneKind { kReal, kSimulated };

// Cost in milliseconds as a function of head count, per mode. A non-empty
// table wins over the affine form; table[k-1] is the cost of k heads.
struct CostModel {
  std::vector<double> table;
  double a = 0.0;
  double b = 0.0;

  double at(std::int64_t k) const {
    if (!table.empty()) {
      if (k < 1 || k > static_cast<std::int64_t>(table.size())) {
        raise(ErrorCode::kInvalidConfig,
              "cost table has no entry for k=" + std::to_string(k));
      }
      return table[static_cast<std::size_t>(k - 1)];
    }
    return a + b * static_cast<double>(k);
  }
};

struct LaneSpec {
  int lane_id = 0;
  std::string name;
  LaneKind kind = LaneKind::kSimulated;
  CostModel fused;     // simulated lanes only
  CostModel per_head;  // simulated lanes only
  double speed = 1.0;              // real lanes: wall-time multiplier
  double contention = 1.0;         // simulated lanes: multiplies every cost
  std::int64_t fail_after_runs = -1;  // fault injection for tests; -1 = never
};

// One lane-executed piece of an attention layer.
struct PlanSegment {
  int lane_id = 0;
  std::int64_t first_head = 0;
  std::int64_t head_count = 0;
  AttentionMode mode = AttentionMode::kFused;
};

// Per-layer execution recipe: segments partition [0, K) in ascending order.
struct ExecutionPlan {
  std::vector<PlanSegment> segments;
};

void validate_execution_plan(const ExecutionPlan& plan, std::int64_t n_heads);

struct SegmentResult {
  Tensor<float> output;
  double elapsed_ms = 0.0;
};

// A serial worker: one thread, one task at a time, tasks run in submission
// order. Submitted work runs under the submitting thread's MemoryTracker.
class Lane {
 public:
  explicit Lane(LaneSpec spec);
  ~Lane();
  Lane(const Lane&) = delete;
  Lane& operator=(const Lane&) = delete;

  const LaneSpec& spec() const { return spec_; }

  // Executes the segment's share of the layer. The caller keeps layer and x
  // alive until the future resolves. elapsed_ms is model time on simulated
  // lanes and speed-scaled wall time on real lanes.
  std::future<SegmentResult> submit_segment(const AttentionLayer<float>& layer,
                                            const Tensor<float>& x,
                                            const PlanSegment& segment, float alpha);

  SegmentResult run_segment(const AttentionLayer<float>& layer, const Tensor<float>& x,
                            const PlanSegment& segment, float alpha);

 private:
  void worker_loop();

  LaneSpec spec_;
  std::int64_t runs_started_ = 0;  // guarded by mu_
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> queue_;
  bool stopping_ = false;
  std::thread worker_;
};

// Ordered collection of lanes with unique ids.
class LaneSet {
 public:
  explicit LaneSet(std::vector<LaneSpec> specs);

  std::size_t size() const { return lanes_.size(); }
  Lane& at(std::size_t idx) { return *lanes_[idx]; }
  const Lane& at(std::size_t idx) const { return *lanes_[idx]; }
  Lane& by_id(int lane_id);
  std::vector<int> ids() const;

 private:
  std::vector<std::unique_ptr<Lane>> lanes_;
};

// Validates descriptors (unique ids, at least one lane) and builds the set.
LaneSet discover_lanes(const std::vector<LaneSpec>& specs);

struct ProfileEntry {
  double ms = 0.0;      // after isotonic cleanup; what the allocator reads
  double raw_ms = 0.0;  // min-of-modes median before cleanup
  AttentionMode mode = AttentionMode::kFused;
};

// Measured cost table: entries[j][k-1] is lane j's cost for k heads.
struct ProfileTable {
  std::vector<int> lane_ids;
  std::int64_t heads = 0;  // K
  int repetitions = 0;     // R
  int warmup = 0;
  std::vector<std::vector<ProfileEntry>> entries;

  std::size_t lane_count() const { return lane_ids.size(); }
  double ms(std::size_t lane_idx, std::int64_t k) const {
    return entries[lane_idx][static_cast<std::size_t>(k - 1)].ms;
  }
  const ProfileEntry& entry(std::size_t lane_idx, std::int64_t k) const {
    return entries[lane_idx][static_cast<std::size_t>(k - 1)];
  }

  void validate() const;  // complete k=1..K per lane, positive times

  std::string to_json() const;
  static ProfileTable from_json(const std::string& text);
};

// Workload shape used for profiling runs.
struct ProfileInput {
  std::int64_t d_head = 4;
  std::int64_t seq_len = 16;
  std::uint32_t seed = 1;
  bool scale_scores = true;
};

// Times every (lane, k in 1..K, mode) cell: `warmup` untimed runs, then
// `repetitions` timed ones (odd, >= 3), keeping the median per mode and the
// faster mode per cell (tie: fused). Monotone repair follows:
// ms[k] = max(ms[k], ms[k-1]). A lane that throws is dropped with a warning
// on stderr; profiling fails only if no lane survives.
ProfileTable profile(LaneSet& lanes, std::int64_t n_heads, const ProfileInput& input,
                     int repetitions = 5, int warmup = 2);

struct SplitResult {
  Tensor<float> output;
  std::vector<std::pair<int, double>> lane_elapsed_ms;  // (lane_id, ms)
  double makespan_ms = 0.0;
};

// Runs each plan segment on its lane concurrently and concatenates outputs in
// head order. Numerically identical to running the whole layer on one lane.
SplitResult split_forward(const AttentionLayer<float>& layer, const Tensor<float>& x,
                          const ExecutionPlan& plan, LaneSet& lanes, float alpha);

}  // namespace lanepipe

#endif  // LANEPIPE_LANES_HPP_
