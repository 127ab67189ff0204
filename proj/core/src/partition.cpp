// Copyright 2026 The Lanepipe Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "lanepipe/partition.hpp"

#include <algorithm>
#include "json.hpp"

#include "lanepipe/error.hpp"

namespace lanepipe {

std::vector<StageSpec> partition(std::int64_t blocks, const std::vector<double>& capacities) {
  const std::size_t stages = capacities.size();
  if (stages == 0) raise(ErrorCode::kInvalidConfig, "partition: no capacities");
  for (double c : capacities) {
    if (!(c > 0.0)) raise(ErrorCode::kInvalidConfig, "partition: capacity must be positive");
  }
  if (blocks < static_cast<std::int64_t>(stages)) {
    raise(ErrorCode::kTooFewBlocks, "partition: fewer blocks than stages");
  }

  std::vector<std::int64_t> counts(stages, 1);
  for (std::int64_t granted = static_cast<std::int64_t>(stages); granted < blocks; ++granted) {
    std::size_t best = 0;
    double best_key = static_cast<double>(counts[0] + 1) / capacities[0];
    for (std::size_t s = 1; s < stages; ++s) {
      const double key = static_cast<double>(counts[s] + 1) / capacities[s];
      if (key < best_key) {
        best = s;
        best_key = key;
      }
    }
    ++counts[best];
  }

  std::vector<StageSpec> result(stages);
  std::int64_t lo = 0;
  for (std::size_t s = 0; s < stages; ++s) {
    result[s].stage_index = static_cast<int>(s);
    result[s].layer_lo = lo;
    result[s].layer_hi = lo + counts[s];
    result[s].is_central = (s == 0);
    lo = result[s].layer_hi;
  }
  return result;
}

double partition_bottleneck(const std::vector<StageSpec>& stages,
                            const std::vector<double>& capacities) {
  if (stages.size() != capacities.size()) {
    raise(ErrorCode::kInvalidConfig, "partition_bottleneck: size mismatch");
  }
  double worst = 0.0;
  for (std::size_t s = 0; s < stages.size(); ++s) {
    worst = std::max(worst, static_cast<double>(stages[s].block_count()) / capacities[s]);
  }
  return worst;
}

std::string partition_to_json(const std::vector<StageSpec>& stages,
                              const std::vector<double>& capacities) {
  nlohmann::ordered_json doc;
  doc["capacities"] = capacities;
  auto& ranges = doc["ranges"] = nlohmann::ordered_json::array();
  for (const auto& st : stages) ranges.push_back({st.layer_lo, st.layer_hi});
  return doc.dump(2);
}

}  // namespace lanepipe
