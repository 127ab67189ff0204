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

#include "lanepipe/scheduler.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"

namespace lanepipe {

namespace {

void require_table_covers(const ProfileTable& table, std::int64_t n_heads) {
  table.validate();
  if (n_heads < 1) raise(ErrorCode::kInvalidConfig, "head count must be >= 1");
  if (table.heads < n_heads) {
    raise(ErrorCode::kIncompleteTable,
          "table covers k up to " + std::to_string(table.heads) + ", need " +
              std::to_string(n_heads));
  }
}

double best_single_lane_ms(const ProfileTable& table, std::int64_t n_heads) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < table.lane_count(); ++j) {
    best = std::min(best, table.ms(j, n_heads));
  }
  return best;
}

double makespan_of(const ProfileTable& table, const std::vector<std::int64_t>& ks) {
  double mk = 0.0;
  for (std::size_t j = 0; j < ks.size(); ++j) {
    if (ks[j] > 0) mk = std::max(mk, table.ms(j, ks[j]));
  }
  return mk;
}

AllocationPlan finish_plan(const ProfileTable& table, std::vector<std::int64_t> ks,
                           double eps_ms, double sigma_ms) {
  AllocationPlan plan;
  plan.epsilon_ms = eps_ms;
  plan.sigma_ms = sigma_ms;
  for (std::size_t j = 0; j < table.lane_count(); ++j) {
    plan.entries.push_back({table.lane_ids[j], ks[j]});
  }
  plan.makespan_ms = makespan_of(table, ks);
  return plan;
}

}  // namespace

ValidityResult is_valid(double mid_ms, std::int64_t n_heads, const ProfileTable& table,
                        double eps_ms) {
  require_table_covers(table, n_heads);
  ValidityResult res;
  res.k_per_lane.assign(table.lane_count(), 0);
  std::int64_t total = 0;
  for (std::size_t j = 0; j < table.lane_count(); ++j) {
    std::int64_t best_k = 1;
    double best_dist = std::abs(table.ms(j, 1) - mid_ms);
    for (std::int64_t k = 2; k <= n_heads; ++k) {
      const double dist = std::abs(table.ms(j, k) - mid_ms);
      if (dist < best_dist) {
        best_dist = dist;
        best_k = k;
      }
    }
    if (best_dist <= eps_ms) {
      res.k_per_lane[j] = best_k;
      total += best_k;
    }
  }
  res.valid = total >= n_heads;
  return res;
}

double default_epsilon_ms(const ProfileTable& table, std::int64_t n_heads) {
  require_table_covers(table, n_heads);
  return 0.05 * best_single_lane_ms(table, n_heads);
}

AllocationPlan allocate(const ProfileTable& table, std::int64_t n_heads, double eps_ms,
                        double sigma_ms) {
  require_table_covers(table, n_heads);
  if (!(eps_ms > 0.0) || !(sigma_ms > 0.0)) {
    raise(ErrorCode::kInvalidConfig, "eps and sigma must be positive");
  }

  double l = 0.0;
  double r = best_single_lane_ms(table, n_heads);
  const double single_lane_bound = r;

  std::vector<std::int64_t> last_valid;
  while (l <= r) {
    const double mid = 0.5 * (l + r);
    ValidityResult probe = is_valid(mid, n_heads, table, eps_ms);
    if (probe.valid) {
      last_valid = std::move(probe.k_per_lane);
      r = mid - sigma_ms;
    } else {
      l = mid + sigma_ms;
    }
  }

  std::vector<std::int64_t> ks;
  if (last_valid.empty()) {
    // No target time ever admitted K heads: run everything on the lane that
    // is fastest at the full head count (first such lane on ties).
    ks.assign(table.lane_count(), 0);
    std::size_t best = 0;
    for (std::size_t j = 1; j < table.lane_count(); ++j) {
      if (table.ms(j, n_heads) < table.ms(best, n_heads)) best = j;
    }
    ks[best] = n_heads;
  } else {
    ks = std::move(last_valid);
    std::int64_t total = 0;
    for (auto k : ks) total += k;
    while (total > n_heads) {
      std::size_t victim = table.lane_count();
      double victim_ms = -1.0;
      for (std::size_t j = 0; j < ks.size(); ++j) {
        if (ks[j] == 0) continue;
        const double ms = table.ms(j, ks[j]);
        const bool better =
            victim == table.lane_count() || ms > victim_ms ||
            (ms == victim_ms && table.lane_ids[j] < table.lane_ids[victim]);
        if (better) {
          victim = j;
          victim_ms = ms;
        }
      }
      ks[victim] -= 1;
      total -= 1;
    }
  }

  AllocationPlan plan = finish_plan(table, std::move(ks), eps_ms, sigma_ms);
  if (plan.makespan_ms > single_lane_bound + eps_ms + 1e-9) {
    raise(ErrorCode::kInvalidPlan, "allocation exceeded its single-lane bound");
  }
  return plan;
}

AllocationPlan allocate(const ProfileTable& table, std::int64_t n_heads) {
  const double eps = default_epsilon_ms(table, n_heads);
  return allocate(table, n_heads, eps, eps / 10.0);
}

AllocationPlan brute_force_allocate(const ProfileTable& table, std::int64_t n_heads) {
  require_table_covers(table, n_heads);
  const std::size_t m = table.lane_count();

  // Number of splits is C(K + M - 1, M - 1); refuse anything above 10^7.
  double combos = 1.0;
  for (std::size_t i = 1; i < m; ++i) {
    combos *= static_cast<double>(n_heads + static_cast<std::int64_t>(i)) /
              static_cast<double>(i);
    if (combos > 1e7) {
      raise(ErrorCode::kTooLarge, "brute force would enumerate over 10^7 splits");
    }
  }

  std::vector<std::int64_t> current(m, 0), best_ks;
  double best_ms = std::numeric_limits<double>::infinity();

  // Ascending enumeration: the first minimizer found is the lexicographically
  // smallest, so only strict improvements replace it.
  auto recurse = [&](auto&& self, std::size_t j, std::int64_t remaining,
                     double max_so_far) -> void {
    if (max_so_far >= best_ms) return;
    if (j + 1 == m) {
      current[j] = remaining;
      const double ms =
          remaining > 0 ? std::max(max_so_far, table.ms(j, remaining)) : max_so_far;
      if (ms < best_ms) {
        best_ms = ms;
        best_ks = current;
      }
      return;
    }
    for (std::int64_t k = 0; k <= remaining; ++k) {
      current[j] = k;
      const double ms = k > 0 ? std::max(max_so_far, table.ms(j, k)) : max_so_far;
      self(self, j + 1, remaining - k, ms);
    }
  };
  recurse(recurse, 0, n_heads, 0.0);

  return finish_plan(table, std::move(best_ks), 0.0, 0.0);
}

ExecutionPlan to_execution_plan(const AllocationPlan& plan, const ProfileTable& table) {
  ExecutionPlan exec;
  std::int64_t next = 0;
  for (const auto& e : plan.entries) {
    if (e.k < 0) raise(ErrorCode::kInvalidPlan, "negative head count");
    if (e.k == 0) continue;
    auto it = std::find(table.lane_ids.begin(), table.lane_ids.end(), e.lane_id);
    if (it == table.lane_ids.end()) {
      raise(ErrorCode::kUnknownLane,
            "plan lane " + std::to_string(e.lane_id) + " missing from table");
    }
    const auto j = static_cast<std::size_t>(it - table.lane_ids.begin());
    PlanSegment seg;
    seg.lane_id = e.lane_id;
    seg.first_head = next;
    seg.head_count = e.k;
    seg.mode = table.entry(j, e.k).mode;
    exec.segments.push_back(seg);
    next += e.k;
  }
  if (exec.segments.empty()) {
    raise(ErrorCode::kInvalidPlan, "plan assigns no heads");
  }
  return exec;
}

std::string AllocationPlan::to_json() const {
  nlohmann::ordered_json doc;
  doc["epsilon_ms"] = epsilon_ms;
  doc["sigma_ms"] = sigma_ms;
  doc["entries"] = nlohmann::ordered_json::array();
  for (const auto& e : entries) {
    doc["entries"].push_back({{"lane", e.lane_id}, {"k", e.k}});
  }
  doc["makespan_ms"] = makespan_ms;
  return doc.dump(2);
}

AllocationPlan AllocationPlan::from_json(const std::string& text) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::kInvalidConfig, std::string("plan JSON: ") + e.what());
  }
  AllocationPlan plan;
  try {
    plan.epsilon_ms = doc.at("epsilon_ms").get<double>();
    plan.sigma_ms = doc.at("sigma_ms").get<double>();
    plan.makespan_ms = doc.at("makespan_ms").get<double>();
    for (const auto& e : doc.at("entries")) {
      plan.entries.push_back({e.at("lane").get<int>(), e.at("k").get<std::int64_t>()});
    }
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::kInvalidConfig, std::string("plan JSON: ") + e.what());
  }
  return plan;
}

}  // namespace lanepipe
