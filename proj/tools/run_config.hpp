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
// Run configuration document for the lanepipe command line tool. One JSON
// file describes the fleet (devices and their lanes), the encoder, the
// training hyperparameters, the allocator policy, and how this process
// participates (all-in-one over loopback, or coordinator/worker over TCP).

#ifndef LANEPIPE_TOOLS_RUN_CONFIG_HPP_
#define LANEPIPE_TOOLS_RUN_CONFIG_HPP_

#include <cstdint>
#include <string>
#include <vector>

#include "lanepipe/model.hpp"
#include "lanepipe/pipeline.hpp"

namespace lanepipe {

struct RunConfig {
  // all-in-one: every stage on a thread over loopback links.
  // coordinator: this process runs stage 0 over TCP and writes the checkpoint.
  // worker: this process runs stage `worker_stage` over TCP.
  std::string role = "all-in-one";
  std::int64_t worker_stage = -1;

  // One "host:port" per stage boundary; stage s+1 listens at endpoints[s]
  // and stage s connects to it. Unused in all-in-one runs.
  std::vector<std::string> endpoints;

  std::vector<DeviceSpec> devices;  // one pipeline stage per device
  EncoderConfig encoder;

  std::int64_t batches = 50;
  std::int64_t batch_size = 8;
  float lr = 0.05f;
  std::uint32_t task_seed = 1;

  // Allocator slack: epsilon = epsilon_pct% of the best single-lane full-set
  // cost, sigma = sigma_ratio * epsilon.
  double epsilon_pct = 5.0;
  double sigma_ratio = 0.1;

  std::string out_dir = "out";
};

// Parses and validates the document, appending one line per violation.
// The returned config is meaningful only when `violations` stays empty.
RunConfig parse_run_config(const std::string& text, std::vector<std::string>& violations);

// parse_run_config on a file; a missing or unreadable file is a violation.
RunConfig load_run_config(const std::string& path, std::vector<std::string>& violations);

// "host:port" -> {host, port}; raises kInvalidConfig on malformed input.
std::pair<std::string, std::uint16_t> split_endpoint(const std::string& endpoint);

}  // namespace lanepipe

#endif  // LANEPIPE_TOOLS_RUN_CONFIG_HPP_
