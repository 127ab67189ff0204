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
// Head allocation: given a measured cost table T[j][k] (lane j running k
// heads), choose per-lane head counts summing to K that minimize the parallel
// makespan. The search binary-searches a target completion time; each lane
// picks the head count whose cost lands nearest the target and lanes too far
// off are benched. A trim pass resolves over-allocation and a fallback covers
// the case where no target was feasible. An exhaustive minimizer serves as
// the test oracle.

#ifndef LANEPIPE_SCHEDULER_HPP_
#define LANEPIPE_SCHEDULER_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "lanepipe/lanes.hpp"

namespace lanepipe {

struct PlanEntry {
  int lane_id = 0;
  std::int64_t k = 0;
};

struct AllocationPlan {
  std::vector<PlanEntry> entries;  // one per table lane, k >= 0, table order
  double makespan_ms = 0.0;
  double epsilon_ms = 0.0;
  double sigma_ms = 0.0;

  std::int64_t total_heads() const {
    std::int64_t sum = 0;
    for (const auto& e : entries) sum += e.k;
    return sum;
  }

  std::string to_json() const;
  static AllocationPlan from_json(const std::string& text);
};

struct ValidityResult {
  bool valid = false;
  std::vector<std::int64_t> k_per_lane;  // table order, 0 = benched
};

// One probe of the target time `mid_ms`: every lane picks
// k = argmin_{1..K} |T[j][k] - mid| (ties toward smaller k) and is benched
// (k = 0) when even the best pick is more than eps_ms away. The probe
// succeeds when the picked counts cover at least K heads.
ValidityResult is_valid(double mid_ms, std::int64_t n_heads, const ProfileTable& table,
                        double eps_ms);

// 5% of the best single-lane full-K time.
double default_epsilon_ms(const ProfileTable& table, std::int64_t n_heads);

// Binary search over the target time on [0, min_j T[j][K]], keeping the last
// feasible assignment: feasible -> r = mid - sigma, infeasible ->
// l = mid + sigma, while l <= r. Over-allocation is trimmed by repeatedly
// decrementing the entry with the largest realized T[j][k_j] (ties toward the
// smaller lane id). If no target was feasible, all K heads go to the lane
// with the smallest T[j][K]. Guarantees makespan <= min_j T[j][K] + eps.
AllocationPlan allocate(const ProfileTable& table, std::int64_t n_heads, double eps_ms,
                        double sigma_ms);

// allocate() with the default policy: eps = 5% of min_j T[j][K], sigma = eps/10.
AllocationPlan allocate(const ProfileTable& table, std::int64_t n_heads);

// Exhaustive oracle: tries every split of K heads over the lanes (zeros
// allowed) and returns the lexicographically smallest minimizer. Refuses
// inputs with more than 10^7 splits.
AllocationPlan brute_force_allocate(const ProfileTable& table, std::int64_t n_heads);

// Realizes a head-count plan as contiguous per-lane segments in table lane
// order, each segment using the mode the profile chose for that (lane, k).
ExecutionPlan to_execution_plan(const AllocationPlan& plan, const ProfileTable& table);

}  // namespace lanepipe

#endif  // LANEPIPE_SCHEDULER_HPP_
