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

#ifndef LANEPIPE_PARTITION_HPP_
#define LANEPIPE_PARTITION_HPP_

#include <cstdint>
#include <string>
#include <vector>

namespace lanepipe {

// Contiguous block range [layer_lo, layer_hi) owned by one pipeline stage.
// Stage 0 is the central stage: it owns the embedding, drives scheduling,
// and (for S > 1) the last stage owns the classifier head.
struct StageSpec {
  int stage_index = 0;
  std::int64_t layer_lo = 0;
  std::int64_t layer_hi = 0;
  bool is_central = false;

  std::int64_t block_count() const { return layer_hi - layer_lo; }
};

// Splits L identical blocks into one contiguous range per capacity score,
// minimizing max_s(blocks_s / capacity_s). Every stage receives at least one
// block. Greedy: start from one block each, then repeatedly grant the next
// block to the stage whose (n_s + 1) / c_s is smallest (ties: smaller index).
// Raises kTooFewBlocks when L < S, kInvalidConfig on empty capacities or a
// non-positive score.
std::vector<StageSpec> partition(std::int64_t blocks, const std::vector<double>& capacities);

// Bottleneck of a stage list under the given capacities: max_s(n_s / c_s).
double partition_bottleneck(const std::vector<StageSpec>& stages,
                            const std::vector<double>& capacities);

// JSON document {"capacities": [...], "ranges": [[lo, hi), ...]}.
std::string partition_to_json(const std::vector<StageSpec>& stages,
                              const std::vector<double>& capacities);

}  // namespace lanepipe

#endif  // LANEPIPE_PARTITION_HPP_
