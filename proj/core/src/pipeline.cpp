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

#include "lanepipe/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <ostream>
#include <span>
#include <thread>
#include <utility>

#include "json.hpp"

namespace lanepipe {

namespace {

double wall_ms_now() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

double median_of(std::vector<double> v) {
  if (v.empty()) return 0.0;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

const char* pipe_phase_name(PipePhase p) {
  return p == PipePhase::kForward ? "forward" : "backward";
}

std::vector<PipeEvent> stage_schedule(std::int64_t stages, std::int64_t stage,
                                      std::int64_t batches) {
  if (stages < 1 || stage < 0 || stage >= stages) {
    raise(ErrorCode::kInvalidConfig, "stage index outside pipeline");
  }
  if (batches < 1) raise(ErrorCode::kInvalidConfig, "batch count must be positive");

  const std::int64_t warmup = std::min(stages - stage, batches);
  std::vector<PipeEvent> events;
  events.reserve(static_cast<std::size_t>(2 * batches));
  std::int64_t fwd = 0;
  std::int64_t bwd = 0;
  while (fwd < warmup) events.push_back({PipePhase::kForward, fwd++});
  while (fwd < batches) {
    events.push_back({PipePhase::kBackward, bwd++});
    events.push_back({PipePhase::kForward, fwd++});
  }
  while (bwd < batches) events.push_back({PipePhase::kBackward, bwd++});
  return events;
}

std::vector<std::vector<PipeEvent>> build_schedule(std::int64_t stages,
                                                   std::int64_t batches) {
  std::vector<std::vector<PipeEvent>> per_stage;
  per_stage.reserve(static_cast<std::size_t>(stages));
  for (std::int64_t s = 0; s < stages; ++s) {
    per_stage.push_back(stage_schedule(stages, s, batches));
  }
  return per_stage;
}

std::string trace_event_to_json(const TraceEvent& e) {
  nlohmann::ordered_json j;
  j["stage"] = e.stage;
  j["batch"] = e.batch;
  j["phase"] = pipe_phase_name(e.phase);
  j["version"] = e.version;
  j["ms"] = e.ms;
  j["peak_bytes"] = e.peak_bytes;
  j["t_ms"] = e.t_ms;
  if (e.loss >= 0.0) {
    j["loss"] = e.loss;
    j["accuracy"] = e.accuracy;
  }
  return j.dump();
}

void MetricsWriter::write(const TraceEvent& e) {
  if (!out_) return;
  const std::string line = trace_event_to_json(e);
  std::lock_guard<std::mutex> lock(mu_);
  *out_ << line << '\n';
}

WeightStash::WeightStash(std::int64_t capacity) : capacity_(capacity) {
  if (capacity_ < 1) raise(ErrorCode::kInvalidConfig, "stash capacity must be positive");
}

void WeightStash::put(BatchTicket ticket) {
  if (static_cast<std::int64_t>(tickets_.size()) >= capacity_) {
    raise(ErrorCode::kStashMiss,
          "stash over capacity " + std::to_string(capacity_) + " at batch " +
              std::to_string(ticket.batch_id));
  }
  const std::int64_t id = ticket.batch_id;
  if (!tickets_.emplace(id, std::move(ticket)).second) {
    raise(ErrorCode::kStashMiss, "batch " + std::to_string(id) + " already stashed");
  }
}

BatchTicket WeightStash::take(std::int64_t batch_id) {
  auto it = tickets_.find(batch_id);
  if (it == tickets_.end()) {
    raise(ErrorCode::kStashMiss,
          "no stashed forward state for batch " + std::to_string(batch_id));
  }
  BatchTicket t = std::move(it->second);
  tickets_.erase(it);
  return t;
}

std::pair<std::size_t, std::size_t> stage_param_range(const EncoderConfig& cfg,
                                                      const StageSpec& spec,
                                                      std::int64_t stages) {
  const std::size_t first =
      spec.stage_index == 0 ? 0 : block_param_first(cfg, spec.layer_lo);
  const std::size_t last = spec.stage_index + 1 == stages
                               ? total_param_count(cfg)
                               : block_param_first(cfg, spec.layer_hi);
  return {first, last};
}

std::int64_t stage_param_scalars(const EncoderConfig& cfg, const StageSpec& spec,
                                 std::int64_t stages) {
  const std::int64_t d = cfg.d_model;
  const std::int64_t f = cfg.d_ff;
  const std::int64_t per_block = 2 * d + 3 * d * d + 2 * d + d * f + f + f * d + d;
  std::int64_t total = (spec.layer_hi - spec.layer_lo) * per_block;
  if (spec.stage_index == 0) total += cfg.vocab * d;
  if (spec.stage_index + 1 == stages) total += 2 * d + d * cfg.classes + cfg.classes;
  return total;
}

namespace {

void validate_stage_context(const StageContext& ctx) {
  ctx.cfg.validate();
  if (ctx.stages < 1 || ctx.spec.stage_index < 0 || ctx.spec.stage_index >= ctx.stages) {
    raise(ErrorCode::kInvalidConfig, "stage index outside pipeline");
  }
  if (ctx.batches < 1 || ctx.batch_size < 1) {
    raise(ErrorCode::kInvalidConfig, "batches and batch size must be positive");
  }
  if (ctx.spec.layer_lo < 0 || ctx.spec.layer_hi > ctx.cfg.layers ||
      ctx.spec.layer_lo >= ctx.spec.layer_hi) {
    raise(ErrorCode::kInvalidConfig, "stage layer range outside model");
  }
  if (ctx.spec.stage_index > 0 && ctx.upstream == nullptr) {
    raise(ErrorCode::kInvalidConfig, "stage needs an upstream link");
  }
  if (ctx.spec.stage_index + 1 < ctx.stages && ctx.downstream == nullptr) {
    raise(ErrorCode::kInvalidConfig, "stage needs a downstream link");
  }
  if (ctx.backend.lanes != nullptr) {
    validate_execution_plan(ctx.backend.plan, ctx.cfg.heads);
  }
}

std::vector<std::int32_t> labels_from_wire(const WireTensor& t, std::int64_t batch_size) {
  if (t.shape != std::vector<std::int64_t>{batch_size}) {
    raise(ErrorCode::kShapeMismatch, "label tensor shape mismatches batch");
  }
  std::vector<std::int32_t> labels(static_cast<std::size_t>(batch_size));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<std::int32_t>(t.f32[i]);
  }
  return labels;
}

}  // namespace

StageReport run_stage(StageContext& ctx) {
  validate_stage_context(ctx);
  const std::int64_t stages = ctx.stages;
  const std::int64_t s = ctx.spec.stage_index;
  const bool is_first = s == 0;
  const bool is_last = s + 1 == stages;
  const bool on_lanes = ctx.backend.lanes != nullptr;

  TrackerScope scope(ctx.tracker);
  const auto [first, last] = stage_param_range(ctx.cfg, ctx.spec, stages);
  std::vector<Parameter<float>> params =
      build_param_slice<float>(ctx.cfg, first, last - first);
  SyntheticTask task(ctx.cfg.vocab, ctx.cfg.seq_len, ctx.cfg.classes, ctx.task_seed);
  WeightStash stash(stages - s);

  StageReport report;
  report.stage = s;
  std::int64_t committed = 0;
  double clock_ms = 0.0;
  std::vector<double> backward_done_ms;

  for (const PipeEvent& ev : stage_schedule(stages, s, ctx.batches)) {
    const double wall0 = wall_ms_now();
    TraceEvent te;
    te.stage = s;
    te.batch = ev.batch;
    te.phase = ev.phase;

    if (ev.phase == PipePhase::kForward) {
      double attn_ms = 0.0;
      AttentionExec<float> exec;
      if (on_lanes) {
        exec = [&ctx, &attn_ms](const AttentionLayer<float>& layer,
                                const Tensor<float>& x, float alpha) {
          SplitResult r =
              split_forward(layer, x, ctx.backend.plan, *ctx.backend.lanes, alpha);
          attn_ms += r.makespan_ms;
          return r.output;
        };
      } else {
        exec = inline_attention_exec<float>();
      }

      Tensor<float> x;
      Tensor<float> boundary_in;
      std::vector<std::int32_t> labels;
      if (is_first) {
        Batch batch = task.make_batch(ev.batch * ctx.batch_size, ctx.batch_size);
        labels = std::move(batch.labels);
        x = embedding(params[0].value, batch.tokens, ctx.batch_size, ctx.cfg.seq_len);
      } else {
        PipeMessage m = ctx.upstream->recv();
        if (m.type != MsgType::kActivation ||
            m.batch_id != static_cast<std::uint32_t>(ev.batch)) {
          raise(ErrorCode::kStashMiss,
                "expected activation for batch " + std::to_string(ev.batch) +
                    ", got " + msg_type_name(m.type) + " for batch " +
                    std::to_string(m.batch_id));
        }
        if (m.tensors.size() != 2) {
          raise(ErrorCode::kShapeMismatch, "activation frame needs tensor and labels");
        }
        WireTensor& act = m.tensors[0];
        const std::vector<std::int64_t> want{ctx.batch_size, ctx.cfg.seq_len,
                                             ctx.cfg.d_model};
        if (act.shape != want) {
          raise(ErrorCode::kShapeMismatch, "activation shape mismatches stage input");
        }
        labels = labels_from_wire(m.tensors[1], ctx.batch_size);
        boundary_in = Tensor<float>::from(act.shape, std::move(act.f32), true);
        x = boundary_in;
        clock_ms = std::max(clock_ms, m.ts_ms);
      }

      x = run_blocks_at(ctx.cfg, params, first, std::move(x), ctx.spec.layer_lo,
                        ctx.spec.layer_hi, exec);

      BatchTicket ticket;
      ticket.batch_id = ev.batch;
      ticket.version = committed;
      ticket.input = boundary_in;
      ticket.attention_ms = attn_ms;
      ticket.weights.reserve(params.size());
      for (const auto& p : params) ticket.weights.push_back(p.value);

      if (is_last) {
        Tensor<float> logits = classify_at(ctx.cfg, params, first, x);
        ticket.loss = cross_entropy(logits, std::span<const std::int32_t>(labels));
        te.loss = ticket.loss.item();
        te.accuracy = batch_accuracy(logits, labels);
        report.losses.push_back(te.loss);
        report.accuracies.push_back(te.accuracy);
      } else {
        ticket.output = x;
      }

      te.ms = on_lanes ? attn_ms : wall_ms_now() - wall0;
      clock_ms += te.ms;
      te.version = ticket.version;
      stash.put(std::move(ticket));

      if (!is_last) {
        PipeMessage out;
        out.type = MsgType::kActivation;
        out.batch_id = static_cast<std::uint32_t>(ev.batch);
        out.version = static_cast<std::uint32_t>(committed);
        out.tensors.push_back(WireTensor::from_f32(x.shape(), x.value()));
        std::vector<float> label_f(labels.begin(), labels.end());
        out.tensors.push_back(
            WireTensor::from_f32({ctx.batch_size}, std::move(label_f)));
        out.ts_ms = clock_ms;
        ctx.downstream->send(out);
      }
    } else {
      BatchTicket ticket;
      if (is_last) {
        ticket = stash.take(ev.batch);
        backward(ticket.loss);
      } else {
        PipeMessage g = ctx.downstream->recv();
        if (g.type != MsgType::kGradient) {
          raise(ErrorCode::kStashMiss,
                std::string("expected gradient frame, got ") + msg_type_name(g.type));
        }
        ticket = stash.take(static_cast<std::int64_t>(g.batch_id));
        if (g.batch_id != static_cast<std::uint32_t>(ev.batch)) {
          raise(ErrorCode::kStashMiss,
                "backward for batch " + std::to_string(g.batch_id) +
                    " arrived out of order (expected " + std::to_string(ev.batch) + ")");
        }
        clock_ms = std::max(clock_ms, g.ts_ms);
        if (g.tensors.size() != 1 || g.tensors[0].shape != ticket.output.shape()) {
          raise(ErrorCode::kShapeMismatch, "gradient shape mismatches activation");
        }
        backward_with_seed(ticket.output, std::span<const float>(g.tensors[0].f32));
      }

      te.ms = on_lanes ? ctx.backend.backward_scale * ticket.attention_ms
                       : wall_ms_now() - wall0;
      clock_ms += te.ms;

      if (!is_first) {
        if (!ticket.input.has_grad()) {
          raise(ErrorCode::kShapeMismatch, "no boundary gradient after backward");
        }
        PipeMessage up;
        up.type = MsgType::kGradient;
        up.batch_id = static_cast<std::uint32_t>(ev.batch);
        up.version = static_cast<std::uint32_t>(ticket.version);
        up.tensors.push_back(
            WireTensor::from_f32(ticket.input.shape(), ticket.input.grad()));
        up.ts_ms = clock_ms;
        ctx.upstream->send(up);
      }

      std::vector<std::span<const float>> grads;
      grads.reserve(ticket.weights.size());
      for (std::size_t i = 0; i < ticket.weights.size(); ++i) {
        if (!ticket.weights[i].has_grad()) {
          raise(ErrorCode::kShapeMismatch,
                "parameter " + params[i].name + " has no gradient after backward");
        }
        grads.emplace_back(ticket.weights[i].grad());
      }
      sgd_step(params, ctx.lr, grads);
      committed += 1;
      te.version = ticket.version;
      backward_done_ms.push_back(clock_ms);
    }

    te.t_ms = clock_ms;
    te.stash_size = stash.size();
    te.peak_bytes = ctx.tracker ? ctx.tracker->high_water_bytes() : 0;
    report.trace.push_back(te);
    if (ctx.metrics) ctx.metrics->write(te);
  }

  report.commits = committed;
  report.params = std::move(params);
  report.high_water_bytes = ctx.tracker ? ctx.tracker->high_water_bytes() : 0;
  std::vector<double> gaps;
  for (std::size_t i = 1; i < backward_done_ms.size(); ++i) {
    gaps.push_back(backward_done_ms[i] - backward_done_ms[i - 1]);
  }
  report.steady_ms = median_of(std::move(gaps));
  return report;
}

std::string MemoryBreakdown::to_json() const {
  nlohmann::ordered_json j;
  j["stage"] = stage;
  j["param_bytes"] = param_bytes;
  j["stash_depth"] = stash_depth;
  j["activation_bytes"] = activation_bytes;
  j["in_flight"] = in_flight;
  j["scratch_bytes"] = scratch_bytes;
  j["total_bytes"] = total_bytes;
  return j.dump();
}

MemoryBreakdown account_memory(const EncoderConfig& cfg, const StageSpec& spec,
                               std::int64_t stages, std::int64_t batch_size) {
  cfg.validate();
  if (stages < 1 || spec.stage_index < 0 || spec.stage_index >= stages) {
    raise(ErrorCode::kInvalidConfig, "stage index outside pipeline");
  }
  if (batch_size < 1) raise(ErrorCode::kInvalidConfig, "batch size must be positive");
  const bool is_first = spec.stage_index == 0;
  const bool is_last = spec.stage_index + 1 == stages;

  const auto [first, last] = stage_param_range(cfg, spec, stages);
  std::vector<Parameter<float>> params;
  {
    TrackerScope untracked(nullptr);
    params = build_param_slice<float>(cfg, first, last - first);
  }

  // Dry-run one microbatch to size the activation graph and its gradients.
  // The parameters were created outside the meter, so their gradient buffers
  // stay out of the activation numbers.
  MemoryTracker meter;
  std::int64_t value_bytes = 0;
  std::int64_t grad_bytes = 0;
  {
    TrackerScope scope(&meter);
    const AttentionExec<float> exec = inline_attention_exec<float>();
    std::vector<std::int32_t> labels(static_cast<std::size_t>(batch_size));
    Tensor<float> x;
    if (is_first) {
      SyntheticTask task(cfg.vocab, cfg.seq_len, cfg.classes, 1);
      Batch batch = task.make_batch(0, batch_size);
      labels = std::move(batch.labels);
      x = embedding(params[0].value, batch.tokens, batch_size, cfg.seq_len);
    } else {
      x = Tensor<float>::zeros({batch_size, cfg.seq_len, cfg.d_model}, true);
      for (std::size_t i = 0; i < labels.size(); ++i) {
        labels[i] = static_cast<std::int32_t>(i) %
                    static_cast<std::int32_t>(cfg.classes);
      }
    }
    Tensor<float> out =
        run_blocks_at(cfg, params, first, std::move(x), spec.layer_lo, spec.layer_hi,
                      exec);
    Tensor<float> root = out;
    if (is_last) {
      Tensor<float> logits = classify_at(cfg, params, first, out);
      root = cross_entropy(logits, std::span<const std::int32_t>(labels));
    }
    value_bytes = meter.live_bytes();
    if (is_last) {
      backward(root);
    } else {
      std::vector<float> seed(static_cast<std::size_t>(root.numel()), 0.0f);
      backward_with_seed(root, std::span<const float>(seed));
    }
    grad_bytes = meter.live_bytes() - value_bytes;
  }

  MemoryBreakdown b;
  b.stage = spec.stage_index;
  b.param_bytes =
      stage_param_scalars(cfg, spec, stages) * static_cast<std::int64_t>(sizeof(float));
  b.stash_depth = stages - spec.stage_index;
  b.activation_bytes = value_bytes;
  b.in_flight = stages - spec.stage_index;
  b.scratch_bytes = b.param_bytes + grad_bytes;
  b.total_bytes = b.param_bytes * (1 + b.stash_depth) +
                  b.activation_bytes * b.in_flight + b.scratch_bytes;
  return b;
}

std::vector<DeviceSpec> reference_fleet() {
  std::vector<DeviceSpec> fleet;
  for (int d = 0; d < 3; ++d) {
    DeviceSpec dev;
    dev.name = "device" + std::to_string(d);
    LaneSpec cpu;
    cpu.lane_id = 0;
    cpu.name = "cpu";
    cpu.kind = LaneKind::kSimulated;
    cpu.fused = {{}, 0.0, 1.0};
    cpu.per_head = {{}, 0.0, 1.2};
    LaneSpec gpu;
    gpu.lane_id = 1;
    gpu.name = "gpu";
    gpu.kind = LaneKind::kSimulated;
    gpu.fused = {{}, 3.0, 0.5};
    gpu.per_head = {{}, 0.0, 3.0};
    dev.lanes = {cpu, gpu};
    fleet.push_back(std::move(dev));
  }
  return fleet;
}

PipelineResult run_pipeline(const PipelineOptions& options) {
  options.cfg.validate();
  if (options.stages < 1) raise(ErrorCode::kInvalidConfig, "need at least one stage");
  if (!options.backends.empty() &&
      static_cast<std::int64_t>(options.backends.size()) != options.stages) {
    raise(ErrorCode::kInvalidConfig, "one backend per stage required");
  }
  if (!options.capacities.empty() &&
      static_cast<std::int64_t>(options.capacities.size()) != options.stages) {
    raise(ErrorCode::kInvalidConfig, "one capacity per stage required");
  }
  std::vector<double> caps = options.capacities;
  if (caps.empty()) caps.assign(static_cast<std::size_t>(options.stages), 1.0);

  const std::vector<StageSpec> specs = partition(options.cfg.layers, caps);
  const std::size_t n = specs.size();

  std::vector<std::pair<std::shared_ptr<Link>, std::shared_ptr<Link>>> links;
  for (std::size_t i = 0; i + 1 < n; ++i) links.push_back(make_loopback_pair());

  std::vector<std::unique_ptr<MemoryTracker>> trackers(n);
  if (options.track_memory) {
    for (auto& t : trackers) t = std::make_unique<MemoryTracker>();
  }

  // Declared after the trackers so that on unwind the reports (which may hold
  // tracked tensors) are destroyed while the trackers are still alive.
  PipelineResult result;
  result.stages = specs;

  std::vector<StageContext> contexts(n);
  for (std::size_t s = 0; s < n; ++s) {
    StageContext& ctx = contexts[s];
    ctx.spec = result.stages[s];
    ctx.stages = options.stages;
    ctx.cfg = options.cfg;
    ctx.batches = options.batches;
    ctx.batch_size = options.batch_size;
    ctx.lr = options.lr;
    ctx.task_seed = options.task_seed;
    ctx.upstream = s > 0 ? links[s - 1].second.get() : nullptr;
    ctx.downstream = s + 1 < n ? links[s].first.get() : nullptr;
    if (!options.backends.empty()) ctx.backend = options.backends[s];
    ctx.metrics = options.metrics;
    ctx.tracker = trackers[s].get();
  }

  result.reports.resize(n);
  std::vector<std::exception_ptr> errors(n);
  std::vector<char> closed_cascade(n, 0);
  std::vector<std::thread> threads;
  threads.reserve(n);
  for (std::size_t s = 0; s < n; ++s) {
    threads.emplace_back([&, s] {
      try {
        result.reports[s] = run_stage(contexts[s]);
      } catch (const Error& e) {
        closed_cascade[s] = e.code() == ErrorCode::kTransportClosed ? 1 : 0;
        errors[s] = std::current_exception();
        if (contexts[s].upstream) contexts[s].upstream->close();
        if (contexts[s].downstream) contexts[s].downstream->close();
      } catch (...) {
        errors[s] = std::current_exception();
        if (contexts[s].upstream) contexts[s].upstream->close();
        if (contexts[s].downstream) contexts[s].downstream->close();
      }
    });
  }
  for (auto& t : threads) t.join();

  // Prefer the root cause over the transport-closed cascade it triggers.
  std::exception_ptr to_throw;
  for (std::size_t s = 0; s < n; ++s) {
    if (errors[s] && !closed_cascade[s]) {
      to_throw = errors[s];
      break;
    }
  }
  if (!to_throw) {
    for (std::size_t s = 0; s < n; ++s) {
      if (errors[s]) {
        to_throw = errors[s];
        break;
      }
    }
  }
  if (to_throw) std::rethrow_exception(to_throw);

  result.model.cfg = options.cfg;
  for (auto& report : result.reports) {
    // The stage trackers die with this call; detach surviving handles first.
    for (auto& p : report.params) p.value.untrack();
    for (auto& p : report.params) result.model.params.push_back(p);
  }
  if (result.model.params.size() != total_param_count(options.cfg)) {
    raise(ErrorCode::kInvalidConfig, "stage slices do not reassemble the model");
  }
  result.losses = result.reports.back().losses;
  result.steady_ms = result.reports.front().steady_ms;
  if (options.track_memory) {
    for (std::size_t s = 0; s < n; ++s) {
      MemoryBreakdown b = account_memory(options.cfg, result.stages[s], options.stages,
                                         options.batch_size);
      result.reports[s].high_water_bytes = trackers[s]->high_water_bytes();
      result.accounting.push_back(b);
    }
  }
  return result;
}

}  // namespace lanepipe
