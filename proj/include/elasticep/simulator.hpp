/* Copyright 2026 The ElasticEP Authors. All Rights Reserved.

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

#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "elasticep/core.hpp"
#include "elasticep/dispatch.hpp"
#include "elasticep/migration.hpp"
#include "elasticep/reliability.hpp"

namespace elasticep {

enum class Strategy { lazarus, ds, ds_ft };

inline std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::lazarus: return "lazarus";
    case Strategy::ds: return "ds";
    case Strategy::ds_ft: return "ds_ft";
  }
  return "?";
}

inline Strategy strategy_from_string(const std::string& s) {
  if (s == "lazarus") return Strategy::lazarus;
  if (s == "ds") return Strategy::ds;
  if (s == "ds_ft") return Strategy::ds_ft;
  throw ValidationError("unknown strategy '" + s + "' (expected lazarus, ds or ds_ft)");
}

// ---------------------------------------------------------------------------
// Step time

struct StepTime {
  double total_s = 0.0;
  double overhead_s = 0.0;
  double compute_s = 0.0;
  double comm_s = 0.0;
  std::int64_t compute_tokens = 0;  // sum over layers of the busiest node's tokens
  std::int64_t comm_tokens = 0;     // sum over layers of the largest per-node cross-node inflow

  bool operator==(const StepTime&) const = default;
};

namespace detail {
inline void finish(StepTime& st, const CostModel& cm) {
  st.overhead_s = cm.step_overhead_s;
  st.compute_s = cm.per_token_compute_s * static_cast<double>(st.compute_tokens);
  st.comm_s = cm.per_token_comm_s * static_cast<double>(st.comm_tokens);
  st.total_s = st.overhead_s + st.compute_s + st.comm_s;
}
}  // namespace detail

/// Lazarus layout: tokens go where the dispatch schedules send them. Ranks of
/// `loads[l]` are the plan's columns.
inline StepTime lazarus_step_time(std::span<const PlacementPlan> plans, std::span<const ExpertLoads> loads,
                                  const CostModel& cm) {
  if (plans.size() != loads.size()) throw ValidationError("step time: one load matrix per layer required");
  StepTime st;
  for (std::size_t l = 0; l < plans.size(); ++l) {
    const auto schedules = compute_all_schedules(loads[l], replica_matrix_from_plan(plans[l]));
    const auto processed = processed_tokens(schedules);
    std::int64_t max_compute = 0, max_cross = 0;
    for (std::size_t j = 0; j < schedules.size(); ++j) {
      std::int64_t compute = 0, cross = 0;
      for (const auto& row : processed) compute += row[j];
      for (std::size_t i = 0; i < schedules.size(); ++i)
        if (i != j) cross += schedules[j].recv_sizes[i];
      max_compute = std::max(max_compute, compute);
      max_cross = std::max(max_cross, cross);
    }
    st.compute_tokens += max_compute;
    st.comm_tokens += max_cross;
  }
  detail::finish(st, cm);
  return st;
}

/// Traditional EP with capacity padding: consecutive groups of `ep_size`
/// ranks, each rank owning E/ep_size experts. Every rank pads each expert's
/// buffer to the largest per-(expert, rank) count in its group.
inline StepTime ep_step_time(int ep_size, std::span<const ExpertLoads> loads, const CostModel& cm) {
  if (ep_size < 1) throw ValidationError("step time: ep_size must be >= 1");
  StepTime st;
  for (const auto& t : loads) {
    const int n = t.n_ranks(), e = t.n_experts();
    if (n % ep_size != 0) throw ValidationError("step time: " + std::to_string(n) + " ranks is not a multiple of ep_size");
    if (e % ep_size != 0) throw ValidationError("step time: " + std::to_string(e) + " experts not divisible by ep_size");
    std::int64_t max_compute = 0, max_cross = 0;
    for (int g = 0; g < n / ep_size; ++g) {
      std::int64_t cap = 0;
      for (int x = 0; x < e; ++x)
        for (int i = g * ep_size; i < (g + 1) * ep_size; ++i) cap = std::max(cap, t.at(x, i));
      max_compute = std::max(max_compute, static_cast<std::int64_t>(e) * cap);
      max_cross = std::max(max_cross, static_cast<std::int64_t>(ep_size - 1) * (e / ep_size) * cap);
    }
    st.compute_tokens += max_compute;
    st.comm_tokens += max_cross;
  }
  detail::finish(st, cm);
  return st;
}

// ---------------------------------------------------------------------------
// Configuration

struct SimConfig {
  ClusterSpec spec;  // n_nodes is used only without an availability trace
  int n_layers = 1;
  Strategy strategy = Strategy::lazarus;
  int ep_size = 1;
  std::int64_t tokens_per_node = 4096;
  double samples_per_node = 8.0;
  double duration_s = 3600.0;
  double sample_interval_s = 60.0;
  int lazarus_checkpoint_interval_steps = 0;  // 0 disables checkpointing for lazarus
  std::int64_t state_bytes = 1 << 20;
  std::int64_t max_steps = 0;  // 0 = run until duration_s

  std::string load_trace_path;
  std::string availability_trace_path;
  LoadTrace load_trace;
  AvailabilityTrace availability;

  int n_experts() const { return load_trace.n_experts; }

  void validate() const {
    spec.cost.validate();
    if (spec.slots_per_node < 1) throw ValidationError("config: slots_per_node must be >= 1");
    if (spec.fault_threshold < 0) throw ValidationError("config: fault_threshold must be >= 0");
    if (n_layers < 1) throw ValidationError("config: n_layers must be >= 1");
    if (load_trace.empty()) throw ValidationError("config: load trace is empty");
    if (tokens_per_node < 0) throw ValidationError("config: tokens_per_node must be >= 0");
    if (!(samples_per_node >= 0.0)) throw ValidationError("config: samples_per_node must be >= 0");
    if (!(duration_s > 0.0)) throw ValidationError("config: duration_s must be > 0");
    if (!(sample_interval_s > 0.0)) throw ValidationError("config: sample_interval_s must be > 0");
    if (lazarus_checkpoint_interval_steps < 0) throw ValidationError("config: lazarus_checkpoint_interval_steps must be >= 0");
    if (max_steps < 0) throw ValidationError("config: max_steps must be >= 0");
    if (strategy != Strategy::lazarus) {
      if (ep_size < 1) throw ValidationError("config: ep_size must be >= 1");
      if (n_experts() % ep_size != 0)
        throw ValidationError("config: ep_size " + std::to_string(ep_size) + " does not divide " +
                              std::to_string(n_experts()) + " experts");
    }
    if (availability.events.empty() && spec.n_nodes < 1) throw ValidationError("config: n_nodes must be >= 1");
    validate_availability_trace(availability);
  }
};

inline void to_json(nlohmann::json& j, const SimConfig& c) {
  j = nlohmann::json{{"spec", c.spec},
                     {"n_layers", c.n_layers},
                     {"strategy", to_string(c.strategy)},
                     {"ep_size", c.ep_size},
                     {"tokens_per_node", c.tokens_per_node},
                     {"samples_per_node", c.samples_per_node},
                     {"duration_s", c.duration_s},
                     {"sample_interval_s", c.sample_interval_s},
                     {"lazarus_checkpoint_interval_steps", c.lazarus_checkpoint_interval_steps},
                     {"state_bytes", c.state_bytes},
                     {"max_steps", c.max_steps},
                     {"load_trace", c.load_trace_path},
                     {"availability_trace", c.availability_trace_path}};
}

/// Reads the scalar fields; traces are loaded by load_sim_config.
inline void from_json(const nlohmann::json& j, SimConfig& c) {
  try {
    c.spec = j.at("spec").get<ClusterSpec>();
    c.n_layers = j.value("n_layers", c.n_layers);
    c.strategy = strategy_from_string(j.value("strategy", std::string("lazarus")));
    c.ep_size = j.value("ep_size", c.ep_size);
    c.tokens_per_node = j.value("tokens_per_node", c.tokens_per_node);
    c.samples_per_node = j.value("samples_per_node", c.samples_per_node);
    c.duration_s = j.value("duration_s", c.duration_s);
    c.sample_interval_s = j.value("sample_interval_s", c.sample_interval_s);
    c.lazarus_checkpoint_interval_steps = j.value("lazarus_checkpoint_interval_steps", c.lazarus_checkpoint_interval_steps);
    c.state_bytes = j.value("state_bytes", c.state_bytes);
    c.max_steps = j.value("max_steps", c.max_steps);
    c.load_trace_path = j.value("load_trace", std::string());
    c.availability_trace_path = j.value("availability_trace", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("sim config: ") + e.what());
  }
}

inline std::string read_text_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Parses a JSON config file; trace paths are relative to the config's directory.
inline SimConfig load_sim_config(const std::filesystem::path& path) {
  const auto text = read_text_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(0, std::string("config: ") + e.what());
  }
  auto cfg = j.get<SimConfig>();
  const auto base = path.parent_path();
  auto resolve = [&](const std::string& p) {
    std::filesystem::path q(p);
    return q.is_absolute() ? q : base / q;
  };
  if (cfg.load_trace_path.empty()) throw SchemaError("sim config: load_trace is required");
  cfg.load_trace = parse_load_trace(read_text_file(resolve(cfg.load_trace_path)));
  if (!cfg.availability_trace_path.empty())
    cfg.availability = parse_availability_trace(read_text_file(resolve(cfg.availability_trace_path)));
  cfg.validate();
  return cfg;
}

// ---------------------------------------------------------------------------
// Report

struct TimelineRow {
  double time_s = 0.0;
  int live = 0;
  int utilized = 0;
  double throughput = 0.0;  // samples/s
  double cum_samples = 0.0;
  std::string event;

  bool operator==(const TimelineRow&) const = default;
};

struct SimEvent {
  double time_s = 0.0;
  std::string kind;  // failure, join, reconfig, rebalance, checkpoint, restart, stall, halt
  std::string detail;

  bool operator==(const SimEvent&) const = default;
};

struct SimReport {
  std::string strategy;
  std::vector<TimelineRow> timeline;
  std::vector<SimEvent> events;
  std::map<std::string, double> totals;  // seconds per category
  std::int64_t steps = 0;                // distinct steps trained (high-water mark)
  std::int64_t final_step = 0;
  double cum_samples = 0.0;
  double end_time_s = 0.0;
  bool halted = false;
  std::string halt_reason;

  std::int64_t count(const std::string& kind) const {
    return std::count_if(events.begin(), events.end(), [&](const SimEvent& e) { return e.kind == kind; });
  }

  bool operator==(const SimReport&) const = default;
};

inline void to_json(nlohmann::json& j, const TimelineRow& r) {
  j = nlohmann::json{{"time_s", r.time_s}, {"live", r.live}, {"utilized", r.utilized},
                     {"throughput", r.throughput}, {"cum_samples", r.cum_samples}, {"event", r.event}};
}
inline void from_json(const nlohmann::json& j, TimelineRow& r) {
  r.time_s = j.at("time_s").get<double>();
  r.live = j.at("live").get<int>();
  r.utilized = j.at("utilized").get<int>();
  r.throughput = j.at("throughput").get<double>();
  r.cum_samples = j.at("cum_samples").get<double>();
  r.event = j.at("event").get<std::string>();
}
inline void to_json(nlohmann::json& j, const SimEvent& e) {
  j = nlohmann::json{{"time_s", e.time_s}, {"kind", e.kind}, {"detail", e.detail}};
}
inline void from_json(const nlohmann::json& j, SimEvent& e) {
  e.time_s = j.at("time_s").get<double>();
  e.kind = j.at("kind").get<std::string>();
  e.detail = j.at("detail").get<std::string>();
}
inline void to_json(nlohmann::json& j, const SimReport& r) {
  j = nlohmann::json{{"strategy", r.strategy},   {"timeline", r.timeline},       {"events", r.events},
                     {"totals", r.totals},       {"steps", r.steps},             {"final_step", r.final_step},
                     {"cum_samples", r.cum_samples}, {"end_time_s", r.end_time_s}, {"halted", r.halted},
                     {"halt_reason", r.halt_reason}};
}
inline void from_json(const nlohmann::json& j, SimReport& r) {
  try {
    r.strategy = j.at("strategy").get<std::string>();
    r.timeline = j.at("timeline").get<std::vector<TimelineRow>>();
    r.events = j.at("events").get<std::vector<SimEvent>>();
    r.totals = j.at("totals").get<std::map<std::string, double>>();
    r.steps = j.at("steps").get<std::int64_t>();
    r.final_step = j.at("final_step").get<std::int64_t>();
    r.cum_samples = j.at("cum_samples").get<double>();
    r.end_time_s = j.at("end_time_s").get<double>();
    r.halted = j.at("halted").get<bool>();
    r.halt_reason = j.at("halt_reason").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("sim report: ") + e.what());
  }
}

namespace detail {
inline std::string num(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}
}  // namespace detail

/// "csv" (time_s,live,utilized,throughput,cum_samples,event) or "json".
inline std::string emit_report(const SimReport& r, const std::string& format) {
  if (format == "json") return nlohmann::json(r).dump(2) + "\n";
  if (format != "csv") throw ValidationError("unknown report format '" + format + "' (expected csv or json)");
  std::string out = "time_s,live,utilized,throughput,cum_samples,event\n";
  for (const auto& row : r.timeline) {
    out += detail::num(row.time_s) + ',' + std::to_string(row.live) + ',' + std::to_string(row.utilized) + ',' +
           detail::num(row.throughput) + ',' + detail::num(row.cum_samples) + ',' + row.event + '\n';
  }
  return out;
}

// ---------------------------------------------------------------------------
// Event loop

namespace detail {

inline std::string join_ids(const std::vector<NodeId>& ids) {
  std::string s;
  for (std::size_t k = 0; k < ids.size(); ++k) s += (k ? " " : "") + std::to_string(ids[k]);
  return s;
}

class Simulator {
 public:
  explicit Simulator(const SimConfig& cfg) : cfg_(cfg), cm_(cfg.spec.cost) {
    cfg_.validate();
    const auto layers = cfg_.load_trace.layers();
    for (int l = 0; l < cfg_.n_layers; ++l) {
      // config layers cycle over the layers present in the trace
      auto it = layers.begin();
      std::advance(it, l % static_cast<int>(layers.size()));
      layer_records_.push_back(cfg_.load_trace.layer_records(*it));
    }
    report_.strategy = to_string(cfg_.strategy);
  }

  SimReport run() {
    std::size_t next_ev = 0;
    const auto& evs = cfg_.availability.events;
    if (evs.empty()) {
      for (int j = 0; j < cfg_.spec.n_nodes; ++j) live_.insert(j);
    }
    while (next_ev < evs.size() && evs[next_ev].time_s <= 0.0) {
      for (auto n : evs[next_ev].nodes) {
        if (evs[next_ev].kind == AvailabilityKind::add) live_.insert(n);
        else live_.erase(n);
      }
      ++next_ev;
    }
    if (live_.empty()) {
      halt("no live nodes at start");
      return finish();
    }
    if (!form_fresh())
      throw InfeasibleError("simulation: " + std::to_string(live_.size()) + " initial nodes cannot run strategy " +
                            to_string(cfg_.strategy));
    log("start", join_ids(utilized_));

    double step_end = start_step();
    const double inf = std::numeric_limits<double>::infinity();
    while (!halted_ && t_ < cfg_.duration_s) {
      const double t_ev = next_ev < evs.size() ? std::max(evs[next_ev].time_s, t_) : inf;
      const double t_join = pending_.empty() ? inf : std::max(join_deadline_, t_);
      const double t_next = std::min({step_end, t_ev, t_join});
      if (t_next > cfg_.duration_s) {
        if (step_end != inf) totals_["aborted_s"] += cfg_.duration_s - step_start_;
        advance(cfg_.duration_s - t_, rate());
        break;
      }
      if (step_end <= t_ev && step_end <= t_join) {
        advance(step_end - t_, rate());
        complete_step();
        if (cfg_.max_steps > 0 && hw_step_ >= cfg_.max_steps) break;
        step_end = start_step();
        continue;
      }
      const bool in_flight = step_end != inf;
      const double started = step_start_;
      advance(t_next - t_, rate());
      const double t_event = t_;
      bool disrupted;
      if (t_ev <= t_join) disrupted = on_availability(evs[next_ev++]);
      else disrupted = on_joins();
      if (disrupted || utilized_.empty()) {
        if (in_flight) totals_["aborted_s"] += t_event - started;
        step_end = start_step();
      }
    }
    return finish();
  }

 private:
  // --- loads and step time

  std::size_t trace_index(int layer, std::int64_t step) const {
    const auto& recs = layer_records_[static_cast<std::size_t>(layer)];
    return static_cast<std::size_t>(step % static_cast<std::int64_t>(recs.size()));
  }

  // Allocation input: per-layer counts summed over the trailing rebalance window.
  std::vector<std::vector<std::int64_t>> window_loads() const {
    const std::int64_t w = cm_.rebalance_interval_steps;
    std::vector<std::vector<std::int64_t>> out;
    for (int l = 0; l < cfg_.n_layers; ++l) {
      std::vector<std::int64_t> sum(static_cast<std::size_t>(cfg_.n_experts()), 0);
      const std::int64_t lo = std::max<std::int64_t>(0, step_ - w + 1);
      for (std::int64_t s = lo; s <= step_; ++s) {
        const auto& c = layer_records_[static_cast<std::size_t>(l)][trace_index(l, s)]->counts;
        for (std::size_t e = 0; e < sum.size(); ++e) sum[e] += c[e];
      }
      out.push_back(std::move(sum));
    }
    return out;
  }

  std::vector<ExpertLoads> step_loads() const {
    std::vector<ExpertLoads> out;
    const std::int64_t total = cfg_.tokens_per_node * static_cast<std::int64_t>(utilized_.size());
    for (int l = 0; l < cfg_.n_layers; ++l) {
      const auto& c = layer_records_[static_cast<std::size_t>(l)][trace_index(l, step_)]->counts;
      const auto totals = apportion(total, c);
      out.push_back(ExpertLoads::from_totals(totals, static_cast<int>(utilized_.size())));
    }
    return out;
  }

  double step_time() {
    std::vector<std::size_t> key{epoch_};
    for (int l = 0; l < cfg_.n_layers; ++l) key.push_back(trace_index(l, step_));
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    const auto loads = step_loads();
    double st;
    if (cfg_.strategy == Strategy::lazarus) {
      std::vector<PlacementPlan> plans;
      for (const auto& d : deployments_) plans.push_back(d.plan);
      st = lazarus_step_time(plans, loads, cm_).total_s;
    } else {
      st = ep_step_time(cfg_.ep_size, loads, cm_).total_s;
    }
    cache_.emplace(std::move(key), st);
    return st;
  }

  double rate() {
    if (utilized_.empty() || halted_) return 0.0;
    return cfg_.samples_per_node * static_cast<double>(utilized_.size()) / step_time();
  }

  // --- bookkeeping

  void advance(double dt, double rate_now) {
    const double target = t_ + dt;
    while (next_tick_ <= target && next_tick_ <= cfg_.duration_s) {
      report_.timeline.push_back(TimelineRow{next_tick_, admitted_count(), static_cast<int>(utilized_.size()), rate_now, cum_, ""});
      next_tick_ += cfg_.sample_interval_s;
    }
    t_ = target;
  }

  void log(const std::string& kind, const std::string& detail) {
    report_.events.push_back(SimEvent{t_, kind, detail});
    report_.timeline.push_back(TimelineRow{t_, admitted_count(), static_cast<int>(utilized_.size()), rate(), cum_, kind});
  }

  void pause(const std::string& category, double seconds) {
    totals_[category] += seconds;
    advance(seconds, 0.0);
  }

  void halt(const std::string& why) {
    halted_ = true;
    report_.halted = true;
    report_.halt_reason = why;
    log("halt", why);
  }

  SimReport finish() {
    if (!halted_) log("end", "");
    report_.totals = totals_;
    report_.steps = hw_step_;
    report_.final_step = step_;
    report_.cum_samples = cum_;
    report_.end_time_s = t_;
    return std::move(report_);
  }

  int checkpoint_interval() const {
    return cfg_.strategy == Strategy::lazarus ? cfg_.lazarus_checkpoint_interval_steps : cm_.checkpoint_interval_steps;
  }

  double start_step() {
    if (utilized_.empty() || halted_) return std::numeric_limits<double>::infinity();
    step_start_ = t_;
    return t_ + step_time();
  }

  void complete_step() {
    const double st = step_time();
    totals_[step_ < hw_step_ ? "replay_s" : "compute_s"] += st;
    ++step_;
    if (step_ > hw_step_) {
      hw_step_ = step_;
      cum_ += cfg_.samples_per_node * static_cast<double>(utilized_.size());
    }
    const int ck = checkpoint_interval();
    if (ck > 0 && step_ % ck == 0) {
      last_ckpt_ = step_;
      log("checkpoint", "step " + std::to_string(step_));
      pause("checkpoint_s", cm_.checkpoint_save_s);
    }
    if (cfg_.strategy == Strategy::lazarus && step_ % cm_.rebalance_interval_steps == 0) {
      auto r = replan(deployments_, utilized_, window_loads(), cfg_.spec, cfg_.state_bytes);
      deployments_ = std::move(r.deployments);
      ++epoch_;
      log("rebalance", "step " + std::to_string(step_) + ", " + std::to_string(r.cost()) + " states moved");
    }
  }

  // --- membership

  std::vector<NodeId> ds_pick(const std::vector<NodeId>& pool) const {
    const std::size_t keep = (pool.size() / static_cast<std::size_t>(cfg_.ep_size)) * static_cast<std::size_t>(cfg_.ep_size);
    return std::vector<NodeId>(pool.begin(), pool.begin() + static_cast<std::ptrdiff_t>(keep));
  }

  bool lazarus_feasible(std::size_t nodes) const {
    return static_cast<long>(nodes) * cfg_.spec.slots_per_node >= cfg_.n_experts();
  }

  // Sets up utilized nodes (and plans) from scratch on every admitted live node.
  bool form_fresh() {
    const std::vector<NodeId> pool(live_.begin(), live_.end());
    if (cfg_.strategy == Strategy::lazarus) {
      if (!lazarus_feasible(pool.size())) {
        utilized_.clear();
        deployments_.clear();
        ++epoch_;
        return false;
      }
      deployments_ = replan({}, pool, window_loads(), cfg_.spec, cfg_.state_bytes).deployments;
      utilized_ = pool;
    } else {
      utilized_ = ds_pick(pool);
    }
    ++epoch_;
    return !utilized_.empty();
  }

  // Rewind to the last checkpoint and rebuild on all live nodes.
  void restart(const std::string& why) {
    if (cfg_.strategy == Strategy::lazarus && cfg_.lazarus_checkpoint_interval_steps == 0) {
      utilized_.clear();
      halt("unrecoverable failure (" + why + ") and checkpointing is disabled");
      return;
    }
    admit_pending();
    const bool ok = form_fresh();
    if (!ok) {
      log("stall", why + "; waiting for nodes");
      step_ = last_ckpt_;
      return;
    }
    step_ = last_ckpt_;
    log("restart", why + "; resume from step " + std::to_string(last_ckpt_));
    pause("restart_s", cm_.restart_s);
  }

  void admit_pending() { pending_.clear(); }

  // Live nodes minus joiners still waiting out the accumulation window.
  int admitted_count() const { return static_cast<int>(live_.size() - pending_.size()); }

  bool on_availability(const AvailabilityEvent& ev) {
    std::vector<NodeId> ids = ev.nodes;
    std::sort(ids.begin(), ids.end());
    if (ev.kind == AvailabilityKind::add) {
      if (pending_.empty()) join_deadline_ = t_ + cm_.join_accumulation_s;
      for (auto n : ids) {
        live_.insert(n);
        pending_.insert(n);
      }
      // report admitted membership; joiners count once they are absorbed
      report_.events.push_back(SimEvent{t_, "join", join_ids(ids) + " (buffered)"});
      return false;
    }

    for (auto n : ids) {
      live_.erase(n);
      pending_.erase(n);
    }
    std::vector<NodeId> lost, survivors;
    for (auto n : utilized_) {
      if (std::binary_search(ids.begin(), ids.end(), n)) lost.push_back(n);
      else survivors.push_back(n);
    }
    const std::string what = "lost " + join_ids(ids);
    if (live_.empty()) {
      utilized_.clear();
      report_.events.push_back(SimEvent{t_, "failure", what});
      halt("no live nodes");
      return true;
    }
    if (lost.empty()) {
      log_failure(what);
      return false;
    }

    switch (cfg_.strategy) {
      case Strategy::lazarus: {
        std::vector<NodeId> alive_cols;
        bool recoverable = !survivors.empty();
        for (const auto& d : deployments_) {
          if (!recoverable) break;
          alive_cols.clear();
          for (std::size_t j = 0; j < d.column_nodes.size(); ++j)
            if (!std::binary_search(ids.begin(), ids.end(), d.column_nodes[j])) alive_cols.push_back(static_cast<int>(j));
          recoverable = is_recoverable(d.plan, alive_cols);
        }
        if (recoverable && lazarus_feasible(survivors.size())) {
          auto r = replan(deployments_, survivors, window_loads(), cfg_.spec, cfg_.state_bytes);
          deployments_ = std::move(r.deployments);
          utilized_ = survivors;
          ++epoch_;
          log_failure(what);
          log("reconfig", std::to_string(r.transfers.transfers.size()) + " state transfers");
          pause("reconfig_s", cm_.reconfig_s);
          return true;
        }
        log_failure(what);
        restart("no complete replica set survives");
        return true;
      }
      case Strategy::ds: {
        log_failure(what);
        restart("ep group broken");
        return true;
      }
      case Strategy::ds_ft: {
        // partition p lives on position p of every group
        std::vector<bool> held(static_cast<std::size_t>(cfg_.ep_size), false);
        for (std::size_t k = 0; k < utilized_.size(); ++k)
          if (!std::binary_search(ids.begin(), ids.end(), utilized_[k])) held[k % static_cast<std::size_t>(cfg_.ep_size)] = true;
        const bool full = std::all_of(held.begin(), held.end(), [](bool b) { return b; });
        if (full) {
          utilized_ = ds_pick(survivors);
          ++epoch_;
          log_failure(what);
          log("reconfig", "ep groups reassigned");
          pause("reconfig_s", cm_.reconfig_s);
          return true;
        }
        log_failure(what);
        restart("no complete expert set survives");
        return true;
      }
    }
    return true;
  }

  void log_failure(const std::string& what) {
    report_.events.push_back(SimEvent{t_, "failure", what});
  }

  bool on_joins() {
    const std::vector<NodeId> joined(pending_.begin(), pending_.end());
    pending_.clear();
    const std::string what = join_ids(joined);
    if (utilized_.empty()) {
      // stalled: try to start again
      const std::int64_t from = step_;
      if (!form_fresh()) {
        log("stall", "still too few nodes after join of " + what);
        return false;
      }
      step_ = std::min(from, last_ckpt_);
      log("restart", "nodes joined (" + what + "); resume from step " + std::to_string(step_));
      pause("restart_s", cm_.restart_s);
      return true;
    }
    if (cfg_.strategy == Strategy::lazarus) {
      std::vector<NodeId> next(live_.begin(), live_.end());
      auto r = replan(deployments_, next, window_loads(), cfg_.spec, cfg_.state_bytes);
      deployments_ = std::move(r.deployments);
      utilized_ = next;
      ++epoch_;
      log("reconfig", "absorbed " + what + ", " + std::to_string(r.transfers.transfers.size()) + " state transfers");
      pause("reconfig_s", cm_.reconfig_s);
      return true;
    }
    const auto next = ds_pick(std::vector<NodeId>(live_.begin(), live_.end()));
    if (next.size() <= utilized_.size()) {
      log("join", "absorbed " + what + " as idle nodes");
      return false;
    }
    // scale out: save, then restart on the larger group count
    utilized_ = next;
    ++epoch_;
    last_ckpt_ = step_;
    log("checkpoint", "step " + std::to_string(step_) + " before scale-out");
    pause("checkpoint_s", cm_.checkpoint_save_s);
    log("restart", "scale out with " + what);
    pause("restart_s", cm_.restart_s);
    return true;
  }

  SimConfig cfg_;
  CostModel cm_;
  std::vector<std::vector<const LoadRecord*>> layer_records_;
  SimReport report_;
  std::map<std::string, double> totals_;
  std::map<std::vector<std::size_t>, double> cache_;

  double t_ = 0.0;
  double next_tick_ = 0.0;
  double step_start_ = 0.0;
  double join_deadline_ = 0.0;
  std::set<NodeId> live_;
  std::set<NodeId> pending_;
  std::vector<NodeId> utilized_;
  std::vector<LayerDeployment> deployments_;
  std::size_t epoch_ = 0;
  std::int64_t step_ = 0;
  std::int64_t hw_step_ = 0;
  std::int64_t last_ckpt_ = 0;
  double cum_ = 0.0;
  bool halted_ = false;
};

}  // namespace detail

inline SimReport run_simulation(const SimConfig& config) { return detail::Simulator(config).run(); }

}  // namespace elasticep
