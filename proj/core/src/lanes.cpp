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

#include "lanepipe/lanes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iostream>
#include <random>
#include <set>
#include <utility>

#include "json.hpp"

namespace lanepipe {

void validate_execution_plan(const ExecutionPlan& plan, std::int64_t n_heads) {
  if (plan.segments.empty()) {
    raise(ErrorCode::kInvalidPlan, "execution plan has no segments");
  }
  std::set<int> seen_lanes;
  std::int64_t next = 0;
  for (const auto& seg : plan.segments) {
    if (!seen_lanes.insert(seg.lane_id).second) {
      raise(ErrorCode::kInvalidPlan,
            "lane " + std::to_string(seg.lane_id) + " appears twice in plan");
    }
    if (seg.first_head != next || seg.head_count <= 0) {
      raise(ErrorCode::kInvalidPlan, "plan segments must tile [0, K) in order");
    }
    next += seg.head_count;
  }
  if (next != n_heads) {
    raise(ErrorCode::kInvalidPlan, "plan covers " + std::to_string(next) + " of " +
                                       std::to_string(n_heads) + " heads");
  }
}

// ---------------------------------------------------------------------------
// Lane
// ---------------------------------------------------------------------------

Lane::Lane(LaneSpec spec) : spec_(std::move(spec)) {
  worker_ = std::thread([this] { worker_loop(); });
}

Lane::~Lane() {
  {
    std::lock_guard<std::mutex> lock(mu_);
    stopping_ = true;
  }
  cv_.notify_all();
  worker_.join();
}

void Lane::worker_loop() {
  for (;;) {
    std::function<void()> task;
    {
      std::unique_lock<std::mutex> lock(mu_);
      cv_.wait(lock, [this] { return stopping_ || !queue_.empty(); });
      if (queue_.empty()) return;
      task = std::move(queue_.front());
      queue_.pop_front();
    }
    task();
  }
}

std::future<SegmentResult> Lane::submit_segment(const AttentionLayer<float>& layer,
                                                const Tensor<float>& x,
                                                const PlanSegment& segment, float alpha) {
  auto promise = std::make_shared<std::promise<SegmentResult>>();
  std::future<SegmentResult> fut = promise->get_future();
  MemoryTracker* tracker = MemoryTracker::current();

  auto task = [this, &layer, &x, segment, alpha, tracker, promise]() {
    try {
      TrackerScope scope(tracker);
      const std::int64_t run_index = runs_started_++;
      if (spec_.fail_after_runs >= 0 && run_index >= spec_.fail_after_runs) {
        raise(ErrorCode::kLaneFailure,
              "lane " + std::to_string(spec_.lane_id) + " failed (fault injection)");
      }
      SegmentResult result;
      const auto t0 = std::chrono::steady_clock::now();
      result.output = range_forward(layer, x, segment.first_head, segment.head_count,
                                    segment.mode, alpha);
      const auto t1 = std::chrono::steady_clock::now();
      if (spec_.kind == LaneKind::kSimulated) {
        const CostModel& cost =
            segment.mode == AttentionMode::kFused ? spec_.fused : spec_.per_head;
        const double ms = cost.at(segment.head_count) * spec_.contention;
        if (!(ms > 0.0)) {
          raise(ErrorCode::kInvalidConfig,
                "simulated lane " + std::to_string(spec_.lane_id) +
                    " has non-positive cost at k=" + std::to_string(segment.head_count));
        }
        result.elapsed_ms = ms;
      } else {
        const double wall_ms =
            std::chrono::duration<double, std::milli>(t1 - t0).count();
        result.elapsed_ms = wall_ms * spec_.speed;
      }
      promise->set_value(std::move(result));
    } catch (...) {
      promise->set_exception(std::current_exception());
    }
  };

  {
    std::lock_guard<std::mutex> lock(mu_);
    if (stopping_) raise(ErrorCode::kLaneFailure, "lane is shutting down");
    queue_.push_back(std::move(task));
  }
  cv_.notify_one();
  return fut;
}

SegmentResult Lane::run_segment(const AttentionLayer<float>& layer, const Tensor<float>& x,
                                const PlanSegment& segment, float alpha) {
  return submit_segment(layer, x, segment, alpha).get();
}

// ---------------------------------------------------------------------------
// LaneSet
// ---------------------------------------------------------------------------

LaneSet::LaneSet(std::vector<LaneSpec> specs) {
  if (specs.empty()) raise(ErrorCode::kEmptyLaneSet, "no lanes configured");
  std::set<int> ids;
  for (const auto& s : specs) {
    if (!ids.insert(s.lane_id).second) {
      raise(ErrorCode::kDuplicateLaneId,
            "lane id " + std::to_string(s.lane_id) + " used twice");
    }
  }
  lanes_.reserve(specs.size());
  for (auto& s : specs) lanes_.push_back(std::make_unique<Lane>(std::move(s)));
}

Lane& LaneSet::by_id(int lane_id) {
  for (auto& l : lanes_) {
    if (l->spec().lane_id == lane_id) return *l;
  }
  raise(ErrorCode::kUnknownLane, "no lane with id " + std::to_string(lane_id));
}

std::vector<int> LaneSet::ids() const {
  std::vector<int> out;
  out.reserve(lanes_.size());
  for (const auto& l : lanes_) out.push_back(l->spec().lane_id);
  return out;
}

LaneSet discover_lanes(const std::vector<LaneSpec>& specs) { return LaneSet(specs); }

// ---------------------------------------------------------------------------
// ProfileTable
// ---------------------------------------------------------------------------

void ProfileTable::validate() const {
  if (heads < 1 || lane_ids.empty() || entries.size() != lane_ids.size()) {
    raise(ErrorCode::kIncompleteTable, "profile table structure invalid");
  }
  std::set<int> ids(lane_ids.begin(), lane_ids.end());
  if (ids.size() != lane_ids.size()) {
    raise(ErrorCode::kIncompleteTable, "profile table repeats a lane id");
  }
  for (std::size_t j = 0; j < entries.size(); ++j) {
    if (entries[j].size() != static_cast<std::size_t>(heads)) {
      raise(ErrorCode::kIncompleteTable,
            "lane " + std::to_string(lane_ids[j]) + " covers " +
                std::to_string(entries[j].size()) + " of " + std::to_string(heads) +
                " head counts");
    }
    for (const auto& e : entries[j]) {
      if (!(e.ms > 0.0) || !(e.raw_ms > 0.0)) {
        raise(ErrorCode::kIncompleteTable, "profile table has a non-positive time");
      }
    }
  }
}

std::string ProfileTable::to_json() const {
  nlohmann::ordered_json doc;
  doc["lanes"] = lane_ids;
  doc["K"] = heads;
  doc["R"] = repetitions;
  doc["warmup"] = warmup;
  doc["entries"] = nlohmann::ordered_json::array();
  for (std::size_t j = 0; j < entries.size(); ++j) {
    for (std::int64_t k = 1; k <= heads; ++k) {
      const auto& e = entries[j][static_cast<std::size_t>(k - 1)];
      doc["entries"].push_back({{"lane", lane_ids[j]},
                                {"k", k},
                                {"ms", e.ms},
                                {"mode", attention_mode_name(e.mode)},
                                {"raw_ms", e.raw_ms}});
    }
  }
  return doc.dump(2);
}

ProfileTable ProfileTable::from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::kInvalidConfig, std::string("profile table JSON: ") + e.what());
  }
  ProfileTable table;
  try {
    table.lane_ids = doc.at("lanes").get<std::vector<int>>();
    table.heads = doc.at("K").get<std::int64_t>();
    table.repetitions = doc.value("R", 0);
    table.warmup = doc.value("warmup", 0);
    if (table.heads < 1 || table.lane_ids.empty()) {
      raise(ErrorCode::kIncompleteTable, "profile table needs lanes and K >= 1");
    }
    table.entries.assign(table.lane_ids.size(),
                         std::vector<ProfileEntry>(static_cast<std::size_t>(table.heads)));
    std::vector<std::vector<bool>> seen(
        table.lane_ids.size(), std::vector<bool>(static_cast<std::size_t>(table.heads)));
    for (const auto& e : doc.at("entries")) {
      const int lane = e.at("lane").get<int>();
      const std::int64_t k = e.at("k").get<std::int64_t>();
      auto it = std::find(table.lane_ids.begin(), table.lane_ids.end(), lane);
      if (it == table.lane_ids.end()) {
        raise(ErrorCode::kUnknownLane,
              "entry references lane " + std::to_string(lane) + " not in lanes list");
      }
      if (k < 1 || k > table.heads) {
        raise(ErrorCode::kIncompleteTable, "entry k out of range");
      }
      const auto j = static_cast<std::size_t>(it - table.lane_ids.begin());
      if (seen[j][static_cast<std::size_t>(k - 1)]) {
        raise(ErrorCode::kIncompleteTable, "duplicate entry in profile table");
      }
      seen[j][static_cast<std::size_t>(k - 1)] = true;
      ProfileEntry& cell = table.entries[j][static_cast<std::size_t>(k - 1)];
      cell.ms = e.at("ms").get<double>();
      cell.mode = attention_mode_from_name(e.at("mode").get<std::string>());
      cell.raw_ms = e.value("raw_ms", cell.ms);
    }
    for (std::size_t j = 0; j < seen.size(); ++j) {
      for (std::int64_t k = 1; k <= table.heads; ++k) {
        if (!seen[j][static_cast<std::size_t>(k - 1)]) {
          raise(ErrorCode::kIncompleteTable,
                "missing entry for lane " + std::to_string(table.lane_ids[j]) +
                    ", k=" + std::to_string(k));
        }
      }
    }
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::kInvalidConfig, std::string("profile table JSON: ") + e.what());
  }
  table.validate();
  return table;
}

// ---------------------------------------------------------------------------
// Profiling
// ---------------------------------------------------------------------------

namespace {

double urand_float(std::mt19937& rng, double lo, double hi) {
  const std::uint64_t r =
      (static_cast<std::uint64_t>(rng()) << 32) | static_cast<std::uint64_t>(rng());
  const double u = static_cast<double>(r >> 11) * 0x1.0p-53;
  return lo + u * (hi - lo);
}

AttentionLayer<float> make_profile_layer(std::mt19937& rng, std::int64_t n_heads,
                                         std::int64_t d_head) {
  AttentionLayer<float> layer;
  layer.d_model = n_heads * d_head;
  layer.d_head = d_head;
  const double bound = 1.0 / std::sqrt(static_cast<double>(layer.d_model));
  for (std::int64_t h = 0; h < n_heads; ++h) {
    HeadWeights<float> hw;
    hw.head_index = h;
    for (Tensor<float> HeadWeights<float>::* member :
         {&HeadWeights<float>::wq, &HeadWeights<float>::wk, &HeadWeights<float>::wv}) {
      auto t = Tensor<float>::zeros({layer.d_model, d_head});
      for (auto& v : t.mutable_value()) {
        v = static_cast<float>(urand_float(rng, -bound, bound));
      }
      hw.*member = std::move(t);
    }
    layer.heads.push_back(std::move(hw));
  }
  return layer;
}

}  // namespace

ProfileTable profile(LaneSet& lanes, std::int64_t n_heads, const ProfileInput& input,
                     int repetitions, int warmup) {
  if (n_heads < 1) raise(ErrorCode::kInvalidConfig, "profiling needs K >= 1");
  if (repetitions < 3 || repetitions % 2 == 0) {
    raise(ErrorCode::kInvalidConfig, "repetitions must be odd and >= 3");
  }
  if (warmup < 0) raise(ErrorCode::kInvalidConfig, "warmup must be >= 0");

  std::mt19937 rng(input.seed);
  AttentionLayer<float> layer = make_profile_layer(rng, n_heads, input.d_head);
  auto x = Tensor<float>::zeros({input.seq_len, layer.d_model});
  for (auto& v : x.mutable_value()) v = static_cast<float>(urand_float(rng, -1.0, 1.0));
  const float alpha = input.scale_scores
                          ? default_attention_scale<float>(input.d_head)
                          : 1.0f;

  ProfileTable table;
  table.heads = n_heads;
  table.repetitions = repetitions;
  table.warmup = warmup;

  for (std::size_t li = 0; li < lanes.size(); ++li) {
    Lane& lane = lanes.at(li);
    std::vector<ProfileEntry> row(static_cast<std::size_t>(n_heads));
    try {
      for (std::int64_t k = 1; k <= n_heads; ++k) {
        double best_ms = 0.0;
        AttentionMode best_mode = AttentionMode::kFused;
        bool first = true;
        for (AttentionMode mode : {AttentionMode::kFused, AttentionMode::kPerHead}) {
          PlanSegment seg{lane.spec().lane_id, 0, k, mode};
          for (int w = 0; w < warmup; ++w) lane.run_segment(layer, x, seg, alpha);
          std::vector<double> times(static_cast<std::size_t>(repetitions));
          for (auto& t : times) t = lane.run_segment(layer, x, seg, alpha).elapsed_ms;
          std::sort(times.begin(), times.end());
          const double median = times[times.size() / 2];
          // Strict < keeps fused on ties.
          if (first || median < best_ms) {
            best_ms = median;
            best_mode = mode;
            first = false;
          }
        }
        row[static_cast<std::size_t>(k - 1)] = ProfileEntry{best_ms, best_ms, best_mode};
      }
    } catch (const Error& e) {
      std::cerr << "profile: excluding lane " << lane.spec().lane_id << " ("
                << error_code_name(e.code()) << ": " << e.what() << ")\n";
      continue;
    }
    for (std::int64_t k = 2; k <= n_heads; ++k) {
      auto& cur = row[static_cast<std::size_t>(k - 1)];
      cur.ms = std::max(cur.ms, row[static_cast<std::size_t>(k - 2)].ms);
    }
    table.lane_ids.push_back(lane.spec().lane_id);
    table.entries.push_back(std::move(row));
  }

  if (table.lane_ids.empty()) {
    raise(ErrorCode::kLaneFailure, "every lane failed during profiling");
  }
  table.validate();
  return table;
}

// ---------------------------------------------------------------------------
// Split execution
// ---------------------------------------------------------------------------

SplitResult split_forward(const AttentionLayer<float>& layer, const Tensor<float>& x,
                          const ExecutionPlan& plan, LaneSet& lanes, float alpha) {
  validate_execution_plan(plan, layer.head_count());
  std::vector<Lane*> segment_lanes;
  segment_lanes.reserve(plan.segments.size());
  for (const auto& seg : plan.segments) segment_lanes.push_back(&lanes.by_id(seg.lane_id));

  std::vector<std::future<SegmentResult>> futures;
  futures.reserve(plan.segments.size());
  for (std::size_t i = 0; i < plan.segments.size(); ++i) {
    futures.push_back(
        segment_lanes[i]->submit_segment(layer, x, plan.segments[i], alpha));
  }

  // Drain every future even on failure; tasks reference layer and x by
  // pointer and must all be finished before this frame unwinds.
  SplitResult result;
  std::vector<Tensor<float>> pieces;
  pieces.reserve(futures.size());
  std::exception_ptr failure;
  for (std::size_t i = 0; i < futures.size(); ++i) {
    try {
      SegmentResult seg = futures[i].get();
      result.lane_elapsed_ms.emplace_back(plan.segments[i].lane_id, seg.elapsed_ms);
      result.makespan_ms = std::max(result.makespan_ms, seg.elapsed_ms);
      pieces.push_back(std::move(seg.output));
    } catch (...) {
      if (!failure) failure = std::current_exception();
    }
  }
  if (failure) std::rethrow_exception(failure);
  result.output = pieces.size() == 1 ? pieces[0] : concat_last_dim(pieces);
  return result;
}

}  // namespace lanepipe
