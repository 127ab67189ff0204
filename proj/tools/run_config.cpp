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

#include "run_config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "lanepipe/error.hpp"

namespace lanepipe {
namespace {

using nlohmann::json;

bool finite_nonneg(double v) { return std::isfinite(v) && v >= 0.0; }

// Reads an integer field if present, recording a violation on wrong type.
template <class T>
void read_int(const json& j, const char* key, T& out, const std::string& where,
              std::vector<std::string>& violations) {
  if (!j.contains(key)) return;
  if (!j[key].is_number_integer()) {
    violations.push_back(where + "." + key + ": expected an integer");
    return;
  }
  out = j[key].get<T>();
}

void read_double(const json& j, const char* key, double& out, const std::string& where,
                 std::vector<std::string>& violations) {
  if (!j.contains(key)) return;
  if (!j[key].is_number()) {
    violations.push_back(where + "." + key + ": expected a number");
    return;
  }
  out = j[key].get<double>();
}

CostModel cost_from_json(const json& j, const std::string& where,
                         std::vector<std::string>& violations) {
  CostModel cost;
  if (!j.is_object()) {
    violations.push_back(where + ": expected an object with a/b or table");
    return cost;
  }
  if (j.contains("table")) {
    if (!j["table"].is_array()) {
      violations.push_back(where + ".table: expected an array of costs");
    } else {
      for (const auto& v : j["table"]) {
        if (!v.is_number() || !finite_nonneg(v.get<double>())) {
          violations.push_back(where + ".table: costs must be finite and >= 0");
          break;
        }
        cost.table.push_back(v.get<double>());
      }
    }
  }
  read_double(j, "a", cost.a, where, violations);
  read_double(j, "b", cost.b, where, violations);
  if (!finite_nonneg(cost.a) || !finite_nonneg(cost.b)) {
    violations.push_back(where + ": a and b must be finite and >= 0");
  }
  return cost;
}

LaneSpec lane_from_json(const json& j, const std::string& where,
                        std::vector<std::string>& violations) {
  LaneSpec lane;
  read_int(j, "lane_id", lane.lane_id, where, violations);
  if (lane.lane_id < 0) violations.push_back(where + ".lane_id: must be >= 0");
  if (j.contains("name")) lane.name = j["name"].get<std::string>();
  if (lane.name.empty()) violations.push_back(where + ".name: must be non-empty");

  std::string kind = "simulated";
  if (j.contains("kind")) {
    if (!j["kind"].is_string()) {
      violations.push_back(where + ".kind: expected a string");
    } else {
      kind = j["kind"].get<std::string>();
    }
  }
  if (kind == "simulated") {
    lane.kind = LaneKind::kSimulated;
  } else if (kind == "real") {
    lane.kind = LaneKind::kReal;
  } else {
    violations.push_back(where + ".kind: must be 'simulated' or 'real'");
  }

  if (j.contains("fused")) lane.fused = cost_from_json(j["fused"], where + ".fused", violations);
  if (j.contains("per_head")) {
    lane.per_head = cost_from_json(j["per_head"], where + ".per_head", violations);
  }
  read_double(j, "speed", lane.speed, where, violations);
  read_double(j, "contention", lane.contention, where, violations);
  if (!(lane.speed > 0.0)) violations.push_back(where + ".speed: must be > 0");
  if (!(lane.contention > 0.0)) violations.push_back(where + ".contention: must be > 0");
  read_int(j, "fail_after_runs", lane.fail_after_runs, where, violations);
  return lane;
}

void check_encoder(const EncoderConfig& e, std::vector<std::string>& violations) {
  if (e.layers < 1) violations.push_back("encoder.layers: must be >= 1");
  if (e.heads < 1) violations.push_back("encoder.heads: must be >= 1");
  if (e.d_model < 1) violations.push_back("encoder.d_model: must be >= 1");
  if (e.d_ff < 1) violations.push_back("encoder.d_ff: must be >= 1");
  if (e.vocab < 1) violations.push_back("encoder.vocab: must be >= 1");
  if (e.seq_len < 1) violations.push_back("encoder.seq_len: must be >= 1");
  if (e.classes < 2) violations.push_back("encoder.classes: must be >= 2");
  if (e.heads >= 1 && e.d_model >= 1 && e.d_model % e.heads != 0) {
    violations.push_back("encoder.d_model: must be divisible by encoder.heads");
  }
}

}  // namespace

RunConfig parse_run_config(const std::string& text, std::vector<std::string>& violations) {
  RunConfig rc;
  json j = json::parse(text, nullptr, false);
  if (j.is_discarded() || !j.is_object()) {
    violations.push_back("document: not a JSON object");
    return rc;
  }

  if (j.contains("role")) {
    if (!j["role"].is_string()) {
      violations.push_back("role: expected a string");
    } else {
      rc.role = j["role"].get<std::string>();
    }
  }
  const bool known_role =
      rc.role == "all-in-one" || rc.role == "coordinator" || rc.role == "worker";
  if (!known_role) {
    violations.push_back("role: must be one of all-in-one|coordinator|worker");
  }

  read_int(j, "stage", rc.worker_stage, "document", violations);
  if (j.contains("endpoints")) {
    if (!j["endpoints"].is_array()) {
      violations.push_back("endpoints: expected an array of host:port strings");
    } else {
      for (const auto& e : j["endpoints"]) {
        if (!e.is_string()) {
          violations.push_back("endpoints: every entry must be a string");
          continue;
        }
        rc.endpoints.push_back(e.get<std::string>());
        try {
          split_endpoint(rc.endpoints.back());
        } catch (const Error&) {
          violations.push_back("endpoints: '" + rc.endpoints.back() +
                               "' is not host:port with port in 1..65535");
        }
      }
    }
  }

  if (!j.contains("devices") || !j["devices"].is_array() || j["devices"].empty()) {
    violations.push_back("devices: at least one device with lanes is required");
  } else {
    int di = 0;
    for (const auto& dj : j["devices"]) {
      const std::string where = "devices[" + std::to_string(di++) + "]";
      DeviceSpec dev;
      if (dj.contains("name")) dev.name = dj["name"].get<std::string>();
      if (dev.name.empty()) violations.push_back(where + ".name: must be non-empty");
      if (!dj.contains("lanes") || !dj["lanes"].is_array() || dj["lanes"].empty()) {
        violations.push_back(where + ".lanes: at least one lane is required");
      } else {
        std::set<int> ids;
        int li = 0;
        for (const auto& lj : dj["lanes"]) {
          LaneSpec lane = lane_from_json(
              lj, where + ".lanes[" + std::to_string(li++) + "]", violations);
          if (!ids.insert(lane.lane_id).second) {
            violations.push_back(where + ": duplicate lane_id " +
                                 std::to_string(lane.lane_id));
          }
          dev.lanes.push_back(std::move(lane));
        }
      }
      rc.devices.push_back(std::move(dev));
    }
  }

  if (j.contains("encoder")) {
    try {
      rc.encoder = EncoderConfig::from_json(j["encoder"].dump());
    } catch (const Error& e) {
      violations.push_back(std::string("encoder: ") + e.what());
    }
  }
  check_encoder(rc.encoder, violations);

  if (j.contains("training")) {
    const json& t = j["training"];
    const std::string where = "training";
    if (!t.is_object()) {
      violations.push_back("training: expected an object");
    } else {
      read_int(t, "batches", rc.batches, where, violations);
      read_int(t, "batch_size", rc.batch_size, where, violations);
      double lr = rc.lr;
      read_double(t, "lr", lr, where, violations);
      rc.lr = static_cast<float>(lr);
      read_int(t, "task_seed", rc.task_seed, where, violations);
    }
  }
  if (rc.batches < 1) violations.push_back("training.batches: must be >= 1");
  if (rc.batch_size < 1) violations.push_back("training.batch_size: must be >= 1");
  if (!(rc.lr > 0.0f) || !std::isfinite(rc.lr)) {
    violations.push_back("training.lr: must be finite and > 0");
  }

  if (j.contains("policy")) {
    const json& p = j["policy"];
    if (!p.is_object()) {
      violations.push_back("policy: expected an object");
    } else {
      read_double(p, "epsilon_pct", rc.epsilon_pct, "policy", violations);
      read_double(p, "sigma_ratio", rc.sigma_ratio, "policy", violations);
    }
  }
  if (!finite_nonneg(rc.epsilon_pct)) violations.push_back("policy.epsilon_pct: must be >= 0");
  if (!std::isfinite(rc.sigma_ratio) || rc.sigma_ratio < 0.0 || rc.sigma_ratio > 1.0) {
    violations.push_back("policy.sigma_ratio: must be in [0, 1]");
  }

  if (j.contains("out_dir")) rc.out_dir = j["out_dir"].get<std::string>();
  if (rc.out_dir.empty()) violations.push_back("out_dir: must be non-empty");

  // A bare "seed" seeds both the weights and the data loader; an explicit
  // training.task_seed (read above) still wins for the data side.
  if (j.contains("seed")) {
    std::uint32_t seed = rc.encoder.seed;
    read_int(j, "seed", seed, "document", violations);
    rc.encoder.seed = seed;
    if (!j.contains("training") || !j["training"].contains("task_seed")) {
      rc.task_seed = seed;
    }
  }

  const std::int64_t stages = static_cast<std::int64_t>(rc.devices.size());
  if (rc.role == "worker") {
    if (rc.worker_stage < 0 || rc.worker_stage >= stages) {
      violations.push_back("stage: worker role requires 0 <= stage < devices count");
    }
  }
  if (rc.role == "coordinator" && rc.worker_stage > 0) {
    violations.push_back("stage: the coordinator always runs stage 0");
  }
  if (known_role && rc.role != "all-in-one" && !rc.devices.empty()) {
    if (static_cast<std::int64_t>(rc.endpoints.size()) != stages - 1) {
      violations.push_back("endpoints: need exactly one per stage boundary (" +
                           std::to_string(stages - 1) + ")");
    }
  }
  return rc;
}

RunConfig load_run_config(const std::string& path, std::vector<std::string>& violations) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    violations.push_back("config: cannot read '" + path + "'");
    return RunConfig{};
  }
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), violations);
}

std::pair<std::string, std::uint16_t> split_endpoint(const std::string& endpoint) {
  const std::size_t colon = endpoint.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == endpoint.size()) {
    raise(ErrorCode::kInvalidConfig, "endpoint must be host:port");
  }
  const std::string host = endpoint.substr(0, colon);
  int port = 0;
  try {
    port = std::stoi(endpoint.substr(colon + 1));
  } catch (const std::exception&) {
    raise(ErrorCode::kInvalidConfig, "endpoint port is not a number");
  }
  if (port < 1 || port > 65535) {
    raise(ErrorCode::kInvalidConfig, "endpoint port outside 1..65535");
  }
  return {host, static_cast<std::uint16_t>(port)};
}

}  // namespace lanepipe
