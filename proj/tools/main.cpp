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
// lanepipe: profile lanes, allocate attention heads, train across pipeline
// stages, and compare metrics streams.
//
//   lanepipe profile  --config fleet.json --out out/
//   lanepipe allocate --table out/profile_device0.json --heads 12 --out out/
//   lanepipe train    --config fleet.json --arm confidant --out out/
//   lanepipe report   out/metrics_single.jsonl out/metrics_confidant.jsonl
//
// Exit codes: 0 success, 1 runtime failure, 2 configuration or validation
// failure (every violation is listed).

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lanepipe/pipeline.hpp"
#include "lanepipe/scheduler.hpp"
#include "run_config.hpp"

namespace lanepipe {
namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitConfig = 2;

// Configuration-class errors exit with 2; everything else is a runtime
// failure and exits with 1.
bool is_config_error(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kEmptyLaneSet:
    case ErrorCode::kDuplicateLaneId:
    case ErrorCode::kIncompleteTable:
    case ErrorCode::kInvalidPlan:
    case ErrorCode::kUnknownLane:
    case ErrorCode::kTooFewBlocks:
      return true;
    default:
      return false;
  }
}

int fail(const Error& e) {
  std::cerr << "error: " << e.what() << " [" << error_code_name(e.code()) << "]\n";
  return is_config_error(e.code()) ? kExitConfig : kExitRuntime;
}

int reject(const std::vector<std::string>& violations) {
  std::cerr << "invalid configuration (" << violations.size() << " violation"
            << (violations.size() == 1 ? "" : "s") << "):\n";
  for (const auto& v : violations) std::cerr << "  - " << v << "\n";
  return kExitConfig;
}

std::string slurp_or_raise(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::kInvalidConfig, "cannot read '" + path + "'");
  std::ostringstream text;
  text << in.rdbuf();
  return text.str();
}

void write_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) raise(ErrorCode::kInvalidConfig, "cannot write '" + path + "'");
  out << text;
}

ProfileInput profile_input_for(const EncoderConfig& encoder) {
  ProfileInput in;
  in.d_head = encoder.d_head();
  in.seq_len = encoder.seq_len;
  return in;
}

// Profile-then-allocate for one device, honoring the config's slack policy.
std::pair<ProfileTable, AllocationPlan> plan_for_device(LaneSet& lanes, const RunConfig& rc) {
  ProfileTable table = profile(lanes, rc.encoder.heads, profile_input_for(rc.encoder));
  double best_single = 0.0;
  for (std::size_t j = 0; j < table.lane_ids.size(); ++j) {
    const double full = table.ms(static_cast<int>(j), rc.encoder.heads);
    if (j == 0 || full < best_single) best_single = full;
  }
  const double eps = rc.epsilon_pct / 100.0 * best_single;
  return {table, allocate(table, rc.encoder.heads, eps, rc.sigma_ratio * eps)};
}

ExecutionPlan fused_plan(const EncoderConfig& encoder) {
  ExecutionPlan plan;
  plan.segments = {{0, 0, static_cast<int>(encoder.heads), AttentionMode::kFused}};
  return plan;
}

struct ArmSetup {
  std::int64_t stages = 1;
  std::vector<LaneSet> lanes;          // one per stage
  std::vector<ExecutionPlan> plans;    // one per stage
  double attention_makespan_ms = 0.0;  // per block, from the plan
};

// single:      one stage, first lane of device 0, fused attention
// single-mbs:  one stage, every lane of device 0, allocated split
// pipeline:    one stage per device, first lanes, fused attention
// confidant:   one stage per device, every lane, allocated split
ArmSetup setup_arm(const std::string& arm, const RunConfig& rc) {
  const bool split = arm == "single-mbs" || arm == "confidant";
  const bool staged = arm == "pipeline" || arm == "confidant";
  if (!split && !staged && arm != "single") {
    raise(ErrorCode::kInvalidConfig,
          "arm must be one of single|single-mbs|pipeline|confidant");
  }

  ArmSetup setup;
  setup.stages = staged ? static_cast<std::int64_t>(rc.devices.size()) : 1;
  for (std::int64_t s = 0; s < setup.stages; ++s) {
    const DeviceSpec& dev = rc.devices[static_cast<std::size_t>(s)];
    if (split) {
      setup.lanes.push_back(discover_lanes(dev.lanes));
    } else {
      setup.lanes.push_back(discover_lanes({dev.lanes.front()}));
    }
  }
  for (std::int64_t s = 0; s < setup.stages; ++s) {
    if (split) {
      auto [table, plan] = plan_for_device(setup.lanes[static_cast<std::size_t>(s)], rc);
      setup.plans.push_back(to_execution_plan(plan, table));
      setup.attention_makespan_ms = std::max(setup.attention_makespan_ms, plan.makespan_ms);
    } else {
      setup.plans.push_back(fused_plan(rc.encoder));
      const LaneSpec& lane = rc.devices[static_cast<std::size_t>(s)].lanes.front();
      setup.attention_makespan_ms =
          std::max(setup.attention_makespan_ms, lane.fused.at(rc.encoder.heads));
    }
  }
  return setup;
}

int cmd_profile(const std::string& config_path, const std::string& out_dir) {
  std::vector<std::string> violations;
  RunConfig rc = load_run_config(config_path, violations);
  if (!violations.empty()) return reject(violations);
  const std::string out = out_dir.empty() ? rc.out_dir : out_dir;
  std::filesystem::create_directories(out);

  for (const DeviceSpec& dev : rc.devices) {
    try {
      LaneSet lanes = discover_lanes(dev.lanes);
      ProfileTable table = profile(lanes, rc.encoder.heads, profile_input_for(rc.encoder));
      const std::string path = out + "/profile_" + dev.name + ".json";
      write_file(path, table.to_json());

      double best = 0.0;
      std::size_t best_lane = 0;
      for (std::size_t j = 0; j < table.lane_ids.size(); ++j) {
        const double full = table.ms(static_cast<int>(j), rc.encoder.heads);
        if (j == 0 || full < best) {
          best = full;
          best_lane = j;
        }
      }
      std::cout << dev.name << ": " << table.lane_ids.size() << " lanes x "
                << rc.encoder.heads << " heads -> " << path << " (best single lane "
                << lanes.at(best_lane).spec().name << " at " << best << " ms)\n";
    } catch (const Error& e) {
      // A device whose every lane fails is unusable configuration.
      std::cerr << "error: " << dev.name << ": " << e.what() << "\n";
      return kExitConfig;
    }
  }
  return kExitOk;
}

int cmd_allocate(const std::string& table_path, std::int64_t heads, double epsilon_ms,
                 double sigma_ms, const std::string& out_dir) {
  ProfileTable table = ProfileTable::from_json(slurp_or_raise(table_path));
  if (heads <= 0) heads = table.heads;
  if (epsilon_ms < 0.0) epsilon_ms = default_epsilon_ms(table, heads);
  if (sigma_ms < 0.0) sigma_ms = epsilon_ms / 10.0;

  AllocationPlan plan = allocate(table, heads, epsilon_ms, sigma_ms);
  std::filesystem::create_directories(out_dir);
  const std::string path = out_dir + "/plan.json";
  write_file(path, plan.to_json());

  std::cout << "allocated " << heads << " heads across " << plan.entries.size()
            << " lanes -> " << path << "\n";
  for (const auto& e : plan.entries) {
    std::cout << "  lane " << e.lane_id << ": " << e.k << " heads\n";
  }
  std::cout << "makespan " << plan.makespan_ms << " ms (epsilon " << plan.epsilon_ms
            << ", sigma " << plan.sigma_ms << ")\n";
  return kExitOk;
}

nlohmann::ordered_json summary_json(const std::string& arm, const PipelineResult& result,
                                    const ArmSetup& setup, const RunConfig& rc) {
  nlohmann::ordered_json j;
  j["arm"] = arm;
  j["stages"] = setup.stages;
  j["batches"] = rc.batches;
  j["batch_size"] = rc.batch_size;
  j["attention_makespan_ms"] = setup.attention_makespan_ms;
  j["steady_ms"] = result.steady_ms;
  j["initial_loss"] = result.losses.front();
  j["final_loss"] = result.losses.back();
  j["accounting"] = nlohmann::ordered_json::array();
  for (const auto& b : result.accounting) {
    j["accounting"].push_back(nlohmann::ordered_json::parse(b.to_json()));
  }
  std::int64_t peak = 0;
  for (const auto& r : result.reports) peak = std::max(peak, r.high_water_bytes);
  j["peak_bytes"] = peak;
  return j;
}

int train_all_in_one(const RunConfig& rc, const std::string& arm, const std::string& out) {
  ArmSetup setup = setup_arm(arm, rc);

  std::ofstream metrics_file(out + "/metrics_" + arm + ".jsonl", std::ios::binary);
  if (!metrics_file) raise(ErrorCode::kInvalidConfig, "cannot write metrics under " + out);
  MetricsWriter metrics(&metrics_file);

  PipelineOptions options;
  options.cfg = rc.encoder;
  options.stages = setup.stages;
  options.batches = rc.batches;
  options.batch_size = rc.batch_size;
  options.lr = rc.lr;
  options.task_seed = rc.task_seed;
  options.metrics = &metrics;
  options.backends.resize(static_cast<std::size_t>(setup.stages));
  for (std::int64_t s = 0; s < setup.stages; ++s) {
    options.backends[static_cast<std::size_t>(s)].lanes = &setup.lanes[static_cast<std::size_t>(s)];
    options.backends[static_cast<std::size_t>(s)].plan = setup.plans[static_cast<std::size_t>(s)];
  }

  PipelineResult result = run_pipeline(options);
  save_checkpoint(out + "/checkpoint_" + arm + ".ckpt", result.model);
  write_file(out + "/summary_" + arm + ".json", summary_json(arm, result, setup, rc).dump(2));

  std::cout << "arm " << arm << ": " << setup.stages << " stage"
            << (setup.stages == 1 ? "" : "s") << ", " << rc.batches << " batches, steady "
            << result.steady_ms << " ms/batch, loss " << result.losses.front() << " -> "
            << result.losses.back() << "\n";
  return kExitOk;
}

std::shared_ptr<Link> connect_with_retry(const std::string& host, std::uint16_t port) {
  const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(30);
  for (;;) {
    try {
      return tcp_connect(host, port, 2000);
    } catch (const Error&) {
      if (std::chrono::steady_clock::now() >= deadline) throw;
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
    }
  }
}

// Runs one stage over TCP. Stage s+1 listens at endpoints[s]; stage s
// connects to it. After training, every stage forwards its parameter slice
// upstream so stage 0 can write the full checkpoint.
int train_over_tcp(const RunConfig& rc, const std::string& arm, const std::string& out) {
  if (arm != "pipeline" && arm != "confidant") {
    raise(ErrorCode::kInvalidConfig, "multi-process runs support pipeline|confidant arms");
  }
  const std::int64_t stages = static_cast<std::int64_t>(rc.devices.size());
  const std::int64_t s = rc.role == "coordinator" ? 0 : rc.worker_stage;

  ArmSetup setup = setup_arm(arm, rc);

  std::unique_ptr<TcpListener> listener;
  if (s > 0) {
    listener = std::make_unique<TcpListener>(
        split_endpoint(rc.endpoints[static_cast<std::size_t>(s - 1)]).second);
  }
  std::shared_ptr<Link> downstream;
  if (s + 1 < stages) {
    const auto [host, port] = split_endpoint(rc.endpoints[static_cast<std::size_t>(s)]);
    downstream = connect_with_retry(host, port);
  }
  std::shared_ptr<Link> upstream;
  if (listener) upstream = listener->accept_one(30000);

  std::ofstream metrics_file(
      out + "/metrics_" + arm + "_stage" + std::to_string(s) + ".jsonl", std::ios::binary);
  if (!metrics_file) raise(ErrorCode::kInvalidConfig, "cannot write metrics under " + out);
  MetricsWriter metrics(&metrics_file);
  MemoryTracker tracker;

  StageContext ctx;
  ctx.spec = partition(rc.encoder.layers,
                       std::vector<double>(static_cast<std::size_t>(stages), 1.0))
                 [static_cast<std::size_t>(s)];
  ctx.stages = stages;
  ctx.cfg = rc.encoder;
  ctx.batches = rc.batches;
  ctx.batch_size = rc.batch_size;
  ctx.lr = rc.lr;
  ctx.task_seed = rc.task_seed;
  ctx.upstream = upstream.get();
  ctx.downstream = downstream.get();
  ctx.backend.lanes = &setup.lanes[static_cast<std::size_t>(s)];
  ctx.backend.plan = setup.plans[static_cast<std::size_t>(s)];
  ctx.metrics = &metrics;
  ctx.tracker = &tracker;

  StageReport report = run_stage(ctx);
  for (auto& p : report.params) p.value.untrack();

  // Gather: own slice first (layout order), then everything downstream.
  PipeMessage w;
  w.type = MsgType::kWeights;
  for (const auto& p : report.params) {
    w.tensors.push_back(WireTensor::from_f32(p.value.shape(), p.value.value()));
  }
  if (downstream) {
    PipeMessage got = downstream->recv();
    if (got.type != MsgType::kWeights) {
      raise(ErrorCode::kUnknownMsgType, "expected the downstream weight slice");
    }
    for (auto& t : got.tensors) w.tensors.push_back(std::move(t));
  }

  std::cout << "stage " << s << "/" << stages << ": " << report.commits
            << " commits, steady " << report.steady_ms << " ms, peak "
            << report.high_water_bytes << " bytes\n";

  if (s > 0) {
    upstream->send(w);
    return kExitOk;
  }

  Model<float> model;
  model.cfg = rc.encoder;
  std::size_t next = 0;
  detail_model::walk_params<float>(
      rc.encoder,
      [&](std::string name, std::vector<std::int64_t> shape) {
        WireTensor& t = w.tensors.at(next++);
        if (t.shape != shape) raise(ErrorCode::kShapeMismatch, "gathered slice mismatch");
        model.params.push_back({std::move(name),
                                Tensor<float>::from(shape, std::move(t.f32), true),
                                static_cast<std::uint64_t>(rc.batches)});
      },
      [&](std::string name, std::vector<std::int64_t> shape, float) {
        WireTensor& t = w.tensors.at(next++);
        if (t.shape != shape) raise(ErrorCode::kShapeMismatch, "gathered slice mismatch");
        model.params.push_back({std::move(name),
                                Tensor<float>::from(shape, std::move(t.f32), true),
                                static_cast<std::uint64_t>(rc.batches)});
      });
  if (next != w.tensors.size()) {
    raise(ErrorCode::kShapeMismatch, "gathered slices do not reassemble the model");
  }
  save_checkpoint(out + "/checkpoint_" + arm + ".ckpt", model);
  std::cout << "checkpoint -> " << out << "/checkpoint_" << arm << ".ckpt\n";
  return kExitOk;
}

int cmd_train(const std::string& config_path, const std::string& arm, std::int64_t seed,
              const std::string& out_dir) {
  std::vector<std::string> violations;
  RunConfig rc = load_run_config(config_path, violations);
  if (!violations.empty()) return reject(violations);
  if (seed >= 0) {
    rc.encoder.seed = static_cast<std::uint32_t>(seed);
    rc.task_seed = static_cast<std::uint32_t>(seed);
  }
  const std::string out = out_dir.empty() ? rc.out_dir : out_dir;
  std::filesystem::create_directories(out);

  if (rc.role == "all-in-one") return train_all_in_one(rc, arm, out);
  return train_over_tcp(rc, arm, out);
}

struct MetricsStats {
  std::string path;
  double steady_ms = 0.0;
  std::int64_t peak_bytes = 0;
};

MetricsStats read_metrics(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) raise(ErrorCode::kInvalidConfig, "cannot read '" + path + "'");

  MetricsStats stats;
  stats.path = path;
  std::int64_t min_stage = -1;
  std::map<std::int64_t, std::vector<double>> backward_t;  // stage -> completion times
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      raise(ErrorCode::kInvalidConfig, "'" + path + "' is not JSONL metrics");
    }
    const std::int64_t stage = j.value("stage", std::int64_t{0});
    if (min_stage < 0 || stage < min_stage) min_stage = stage;
    stats.peak_bytes = std::max(stats.peak_bytes, j.value("peak_bytes", std::int64_t{0}));
    if (j.value("phase", std::string{}) == "backward") {
      backward_t[stage].push_back(j.value("t_ms", 0.0));
    }
  }
  const auto& times = backward_t[min_stage];
  if (times.size() < 2) {
    raise(ErrorCode::kInvalidConfig,
          "'" + path + "' has fewer than two backward events; cannot measure latency");
  }
  std::vector<double> gaps;
  for (std::size_t i = 1; i < times.size(); ++i) gaps.push_back(times[i] - times[i - 1]);
  std::sort(gaps.begin(), gaps.end());
  stats.steady_ms = gaps.size() % 2 == 1
                        ? gaps[gaps.size() / 2]
                        : 0.5 * (gaps[gaps.size() / 2 - 1] + gaps[gaps.size() / 2]);
  return stats;
}

int cmd_report(const std::vector<std::string>& files, const std::string& out_dir) {
  std::vector<MetricsStats> stats;
  for (const auto& f : files) stats.push_back(read_metrics(f));

  std::ostringstream csv;
  csv << std::setprecision(12);
  csv << "file,steady_ms,peak_bytes,speedup,memory_ratio\n";
  const MetricsStats& base = stats.front();
  for (const auto& s : stats) {
    csv << s.path << ',' << s.steady_ms << ',' << s.peak_bytes << ','
        << base.steady_ms / s.steady_ms << ','
        << static_cast<double>(s.peak_bytes) / static_cast<double>(base.peak_bytes) << "\n";
  }
  std::cout << csv.str();
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    write_file(out_dir + "/report.csv", csv.str());
  }
  return kExitOk;
}

int run(int argc, char** argv) {
  CLI::App app{"lanepipe: pipeline training with attention-head splitting"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::string arm = "confidant";
  std::int64_t seed = -1;

  CLI::App* profile_cmd = app.add_subcommand("profile", "profile every device's lanes");
  profile_cmd->add_option("--config", config_path, "run configuration JSON")->required();
  profile_cmd->add_option("--out", out_dir, "output directory (default: config out_dir)");

  std::string table_path;
  std::int64_t heads = 0;
  double epsilon_ms = -1.0;
  double sigma_ms = -1.0;
  CLI::App* allocate_cmd =
      app.add_subcommand("allocate", "turn a profile table into a head allocation plan");
  allocate_cmd->add_option("--table", table_path, "profile table JSON")->required();
  allocate_cmd->add_option("--heads", heads, "heads to place (default: table's head count)");
  allocate_cmd->add_option("--epsilon-ms", epsilon_ms,
                           "slack in ms (default: 5% of the best single lane)");
  allocate_cmd->add_option("--sigma-ms", sigma_ms, "step in ms (default: epsilon / 10)");
  allocate_cmd->add_option("--out", out_dir, "output directory")->default_val("out");

  CLI::App* train_cmd = app.add_subcommand("train", "train the configured arm");
  train_cmd->add_option("--config", config_path, "run configuration JSON")->required();
  train_cmd->add_option("--arm", arm, "single|single-mbs|pipeline|confidant")
      ->check(CLI::IsMember({"single", "single-mbs", "pipeline", "confidant"}));
  train_cmd->add_option("--seed", seed, "override the config's weight and task seeds");
  train_cmd->add_option("--out", out_dir, "output directory (default: config out_dir)");

  std::vector<std::string> metrics_files;
  CLI::App* report_cmd =
      app.add_subcommand("report", "compare metrics streams (first file is the baseline)");
  report_cmd->add_option("files", metrics_files, "metrics JSONL files")
      ->required()
      ->expected(-1);
  report_cmd->add_option("--out", out_dir, "also write report.csv here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    if (profile_cmd->parsed()) return cmd_profile(config_path, out_dir);
    if (allocate_cmd->parsed()) {
      return cmd_allocate(table_path, heads, epsilon_ms, sigma_ms, out_dir);
    }
    if (train_cmd->parsed()) return cmd_train(config_path, arm, seed, out_dir);
    return cmd_report(metrics_files, out_dir);
  } catch (const Error& e) {
    return fail(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}

}  // namespace
}  // namespace lanepipe

int main(int argc, char** argv) { return lanepipe::run(argc, argv); }
