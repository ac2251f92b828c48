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

#include <atomic>
#include <charconv>
#include <csignal>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "elasticep/allocation.hpp"
#include "elasticep/control_plane.hpp"
#include "elasticep/core.hpp"
#include "elasticep/dispatch.hpp"
#include "elasticep/migration.hpp"
#include "elasticep/placement.hpp"
#include "elasticep/reliability.hpp"
#include "elasticep/simulator.hpp"
#include "elasticep/trace_gen.hpp"

namespace elasticep::cli {

using nlohmann::json;

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitInput = 2;

namespace detail {

inline std::atomic<bool>& stop_requested() {
  static std::atomic<bool> flag{false};
  return flag;
}

extern "C" inline void on_stop_signal(int) { stop_requested() = true; }

inline void install_stop_handlers() {
  stop_requested() = false;
  std::signal(SIGINT, on_stop_signal);
  std::signal(SIGTERM, on_stop_signal);
}

inline std::string real(double v) {
  char buf[64];
  auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

template <typename T>
std::string tuple_str(const std::vector<T>& v) {
  std::string s = "(";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s + ")";
}

inline std::string read_input(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline json read_json(const std::string& path) {
  try {
    return json::parse(read_input(path));
  } catch (const json::parse_error& e) {
    throw ParseError(0, path + ": " + e.what());
  }
}

/// Writes to `path`, or to `out` when the path is empty.
inline void emit(const std::string& text, const std::string& path, std::ostream& out) {
  if (path.empty()) {
    out << text;
    if (!text.empty() && text.back() != '\n') out << '\n';
    return;
  }
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write " + path);
  f << text;
  if (!text.empty() && text.back() != '\n') f << '\n';
  if (!f) throw Error("write to " + path + " failed");
}

/// Per-expert totals for `layer` from a loads file: either a JSON array of
/// counts, or a JSONL load trace whose records for that layer are summed.
inline std::vector<std::int64_t> layer_counts(const std::string& path, int layer) {
  const auto text = read_input(path);
  const auto first = text.find_first_not_of(" \t\r\n");
  if (first != std::string::npos && text[first] == '[') {
    try {
      return json::parse(text).get<std::vector<std::int64_t>>();
    } catch (const json::exception& e) {
      throw ParseError(0, path + ": " + e.what());
    }
  }
  const auto trace = parse_load_trace(text);
  const auto recs = trace.layer_records(layer);
  if (recs.empty()) throw ValidationError(path + ": no records for layer " + std::to_string(layer));
  std::vector<std::int64_t> sum(static_cast<std::size_t>(trace.n_experts), 0);
  for (const auto* r : recs)
    for (std::size_t e = 0; e < sum.size(); ++e) sum[e] += r->counts[e];
  return sum;
}

inline std::vector<std::vector<std::int64_t>> all_layer_counts(const std::string& path, int n_layers) {
  std::vector<std::vector<std::int64_t>> out;
  for (int l = 0; l < n_layers; ++l) out.push_back(layer_counts(path, l));
  return out;
}

inline void check_counts(const std::vector<std::int64_t>& counts) {
  if (counts.empty()) throw ValidationError("no expert loads given");
  for (auto c : counts)
    if (c < 0) throw ValidationError("expert loads must be non-negative");
}

/// A placement from a file holding a plan, a `plan` command document, or a
/// list of either; `layer` picks from a list.
inline std::vector<PlacementPlan> read_plans(const std::string& path) {
  auto j = read_json(path);
  if (j.is_object() && j.contains("placement")) j = j.at("placement");
  if (j.is_object() && j.contains("deployments")) j = j.at("deployments");
  std::vector<PlacementPlan> out;
  auto one = [&](const json& x) {
    try {
      out.push_back((x.contains("plan") ? x.at("plan") : x).get<PlacementPlan>());
    } catch (const json::exception& e) {
      throw SchemaError(path + ": " + e.what());
    }
  };
  if (j.is_array()) {
    for (const auto& x : j) one(x);
  } else {
    one(j);
  }
  if (out.empty()) throw SchemaError(path + ": no placement plans");
  return out;
}

inline std::vector<LayerDeployment> read_deployments(const std::string& path) {
  auto j = read_json(path);
  if (j.is_object() && j.contains("deployments")) j = j.at("deployments");
  std::vector<LayerDeployment> out;
  try {
    if (j.is_array()) {
      out = j.get<std::vector<LayerDeployment>>();
    } else {
      out.push_back(j.get<LayerDeployment>());
    }
  } catch (const json::exception& e) {
    throw SchemaError(path + ": " + e.what());
  }
  if (out.empty()) throw SchemaError(path + ": no deployments");
  for (const auto& d : out) d.validate();
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// plan

struct PlanArgs {
  std::string loads_path;
  std::vector<std::int64_t> counts;
  int nodes = 0;
  int slots = 0;
  int fault_threshold = 1;
  int layer = 0;
  std::string out;
  std::string format = "text";
};

inline int cmd_plan(const PlanArgs& a, std::ostream& out) {
  auto counts = a.counts.empty() ? detail::layer_counts(a.loads_path, a.layer) : a.counts;
  detail::check_counts(counts);
  ClusterSpec spec{a.nodes, a.slots, a.fault_threshold, {}};
  validate_cluster_spec(spec, static_cast<int>(counts.size()));
  const auto alloc = allocate_replicas(counts, spec);
  const auto plan = build_mro_plan(alloc, spec, a.layer);
  const auto groups = mro_groups(alloc, spec.n_nodes, spec.slots_per_node);

  json gj = json::array();
  for (std::size_t g = 0; g < groups.experts.size(); ++g)
    gj.push_back({{"experts", groups.experts[g]}, {"nodes", groups.node_counts[g]}});
  const json doc{{"layer", a.layer},   {"cluster", spec},  {"loads", counts},
                 {"allocation", alloc}, {"placement", plan}, {"groups", gj},
                 {"allocation_skew", allocation_skew(alloc, counts)}};
  if (!a.out.empty()) detail::emit(doc.dump(2), a.out, out);

  if (a.format == "json") {
    if (a.out.empty()) out << doc.dump(2) << '\n';
  } else if (a.format == "csv") {
    out << "expert,load,replicas,group,span\n";
    std::vector<int> group_of(counts.size(), -1);
    for (std::size_t g = 0; g < groups.experts.size(); ++g)
      for (auto e : groups.experts[g]) group_of[static_cast<std::size_t>(e)] = static_cast<int>(g);
    for (std::size_t e = 0; e < counts.size(); ++e)
      out << e << ',' << counts[e] << ',' << alloc.replicas[e] << ',' << group_of[e] << ','
          << distinct_node_span(plan, static_cast<ExpertId>(e)) << '\n';
  } else {
    std::vector<int> sizes;
    for (const auto& g : groups.experts) sizes.push_back(static_cast<int>(g.size()));
    out << "r = " << detail::tuple_str(alloc.replicas) << '\n';
    out << "f_used = " << alloc.f_used << '\n';
    out << "group sizes (experts) = " << detail::tuple_str(sizes) << '\n';
    out << "group sizes (nodes) = " << detail::tuple_str(groups.node_counts) << '\n';
    out << "allocation skew = " << detail::real(allocation_skew(alloc, counts)) << '\n';
    for (int j = 0; j < plan.n_nodes(); ++j) {
      out << "node " << j << ':';
      for (auto e : plan.column(j)) out << ' ' << e;
      out << '\n';
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// recover-prob

struct RecoverArgs {
  std::string plan_path;
  std::string loads_path;
  std::vector<std::int64_t> counts;
  std::vector<int> replicas;
  int nodes = 0;
  int slots = 0;
  int fault_threshold = 1;
  int layer = 0;
  std::vector<std::string> strategies;
  int k_min = 0;
  int k_max = -1;
  long mc_samples = 0;
  std::uint64_t seed = 0;
  long cap = kDefaultEnumerationCap;
  std::string out;
  std::string format = "csv";
};

inline int cmd_recover_prob(const RecoverArgs& a, std::ostream& out) {
  AllocationPlan alloc;
  ClusterSpec spec;
  std::optional<PlacementPlan> given;
  if (!a.plan_path.empty()) {
    auto plans = detail::read_plans(a.plan_path);
    given = plans.size() == 1 ? plans.front() : plans.at(static_cast<std::size_t>(a.layer));
    spec = ClusterSpec{given->n_nodes(), given->slots_per_node(), 0, {}};
    alloc = AllocationPlan::from_replicas(given->replica_counts());
  } else if (!a.replicas.empty()) {
    if (a.nodes < 1) throw ValidationError("--nodes is required with --replicas");
    alloc = AllocationPlan::from_replicas(a.replicas);
    int c = a.slots;
    if (c == 0) {
      if (alloc.total() % a.nodes != 0)
        throw ValidationError("sum(r) = " + std::to_string(alloc.total()) + " is not a multiple of N; pass --slots");
      c = static_cast<int>(alloc.total() / a.nodes);
    }
    spec = ClusterSpec{a.nodes, c, alloc.f_used, {}};
    if (alloc.total() != spec.total_slots()) throw ValidationError("replicas must fill N*c slots");
  } else {
    auto counts = a.counts.empty() ? detail::layer_counts(a.loads_path, a.layer) : a.counts;
    detail::check_counts(counts);
    if (a.nodes < 1 || a.slots < 1) throw ValidationError("--nodes and --slots are required with loads");
    spec = ClusterSpec{a.nodes, a.slots, a.fault_threshold, {}};
    validate_cluster_spec(spec, static_cast<int>(counts.size()));
    alloc = allocate_replicas(counts, spec);
  }
  spec.validate();

  std::vector<std::string> strategies = a.strategies;
  if (strategies.empty()) strategies = given ? std::vector<std::string>{"plan"} : std::vector<std::string>{"mro", "spread", "compact"};
  const int n = spec.n_nodes;
  const int k_lo = a.k_min, k_hi = a.k_max < 0 ? n : a.k_max;
  if (k_lo < 0 || k_hi > n || k_lo > k_hi)
    throw ValidationError("k range [" + std::to_string(k_lo) + ", " + std::to_string(k_hi) + "] not within [0, " +
                          std::to_string(n) + "]");

  std::map<std::string, PlacementPlan> plans;
  std::vector<Probability> optimal;
  for (const auto& s : strategies) {
    if (s == "plan") {
      if (!given) throw ValidationError("strategy 'plan' needs --plan");
      plans[s] = *given;
    } else if (s == "mro") {
      plans[s] = build_mro_plan(alloc, spec, a.layer);
    } else if (s == "spread") {
      plans[s] = baseline_placement(BaselineStrategy::spread, alloc, spec, a.layer);
    } else if (s == "compact") {
      plans[s] = baseline_placement(BaselineStrategy::compact, alloc, spec, a.layer);
    } else if (s == "optimal") {
      optimal = brute_force_optimal_profile(alloc, spec);
    } else {
      throw ValidationError("unknown strategy '" + s + "' (plan, mro, spread, compact, optimal)");
    }
  }

  struct Row {
    int k;
    std::string strategy;
    std::string num, den;
    double real;
  };
  std::vector<Row> rows;
  for (int k = k_lo; k <= k_hi; ++k) {
    for (const auto& s : strategies) {
      if (s == "optimal") {
        const auto& p = optimal[static_cast<std::size_t>(n - k)];
        rows.push_back({k, s, p.numerator().str(), p.denominator().str(), p.real()});
      } else if (a.mc_samples > 0) {
        const auto est = recovery_probability_mc(plans.at(s), k, a.mc_samples, a.seed);
        rows.push_back({k, s, std::to_string(est.hits), std::to_string(est.samples), est.estimate});
      } else {
        Probability p;
        try {
          p = recovery_probability_exact(plans.at(s), k, a.cap);
        } catch (const EnumerationCapError& e) {
          throw EnumerationCapError(std::string(e.what()) + " (rerun with --mc SAMPLES)");
        }
        rows.push_back({k, s, p.numerator().str(), p.denominator().str(), p.real()});
      }
    }
  }

  std::string text;
  if (a.format == "json") {
    json arr = json::array();
    for (const auto& r : rows)
      arr.push_back({{"k_failed", r.k}, {"strategy", r.strategy}, {"probability_num", r.num},
                     {"probability_den", r.den}, {"probability_real", r.real}});
    json doc{{"n_nodes", n}, {"slots_per_node", spec.slots_per_node}, {"replicas", alloc.replicas},
             {"method", a.mc_samples > 0 ? "monte_carlo" : "exact"}, {"rows", arr}};
    if (a.mc_samples > 0) doc["seed"] = a.seed;
    text = doc.dump(2);
  } else {
    text = "k_failed,strategy,probability_num,probability_den,probability_real\n";
    for (const auto& r : rows)
      text += std::to_string(r.k) + ',' + r.strategy + ',' + r.num + ',' + r.den + ',' + detail::real(r.real) + '\n';
  }
  detail::emit(text, a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// dispatch

struct DispatchArgs {
  std::string tokens_path;
  std::string replicas_path;
  std::string plan_path;
  int layer = 0;
  int rank = -1;
  bool check = false;
  std::string out;
  std::string format = "json";
};

inline int cmd_dispatch(const DispatchArgs& a, std::ostream& out, std::ostream& err) {
  std::vector<std::vector<std::int64_t>> reports;
  try {
    reports = detail::read_json(a.tokens_path).get<std::vector<std::vector<std::int64_t>>>();
  } catch (const json::exception& e) {
    throw SchemaError(a.tokens_path + ": expected a [rank][expert] matrix: " + e.what());
  }
  const auto t = gather_load_matrix(reports);
  ReplicaMatrix r;
  if (!a.plan_path.empty()) {
    auto plans = detail::read_plans(a.plan_path);
    r = replica_matrix_from_plan(plans.size() == 1 ? plans.front() : plans.at(static_cast<std::size_t>(a.layer)));
  } else {
    try {
      r = detail::read_json(a.replicas_path).get<ReplicaMatrix>();
    } catch (const json::exception& e) {
      throw SchemaError(a.replicas_path + ": expected an [expert][rank] matrix: " + e.what());
    }
  }
  auto schedules = compute_all_schedules(t, r);
  if (a.rank >= static_cast<int>(schedules.size()))
    throw ValidationError("--rank " + std::to_string(a.rank) + " out of range");

  if (a.check) {
    std::vector<std::vector<ExpertId>> routings;
    for (int i = 0; i < t.n_ranks(); ++i) {
      routings.push_back(routing_from_counts(t, i));
      schedules[static_cast<std::size_t>(i)].shuffle_index = build_shuffle_index(schedules[static_cast<std::size_t>(i)], routings.back());
    }
    const auto res = simulate_all_to_all(schedules, routings);
    const auto back = combine_all_to_all(res, schedules);
    for (std::size_t i = 0; i < back.size(); ++i)
      for (std::size_t k = 0; k < back[i].size(); ++k)
        if (back[i][k].origin != static_cast<int>(i) || back[i][k].index != k)
          throw ConsistencyViolation("combine did not restore rank " + std::to_string(i) + "'s token order");
    err << "check: all-to-all consistent, " << schedules.size() << " ranks\n";
  }

  std::string text;
  if (a.format == "csv") {
    text = "rank,expert,destination,tokens\n";
    for (const auto& s : schedules) {
      if (a.rank >= 0 && s.rank != a.rank) continue;
      for (std::size_t e = 0; e < s.send.size(); ++e)
        for (std::size_t j = 0; j < s.send[e].size(); ++j)
          if (s.send[e][j] != 0)
            text += std::to_string(s.rank) + ',' + std::to_string(e) + ',' + std::to_string(j) + ',' +
                    std::to_string(s.send[e][j]) + '\n';
    }
  } else if (a.rank >= 0) {
    text = json(schedules[static_cast<std::size_t>(a.rank)]).dump(2);
  } else {
    text = json{{"schedules", schedules}, {"processed", processed_tokens(schedules)}}.dump(2);
  }
  detail::emit(text, a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// migrate

struct MigrateArgs {
  std::string old_path;
  std::string new_path;
  std::string loads_path;
  std::vector<std::int64_t> counts;
  std::vector<NodeId> live;
  int slots = 0;
  int fault_threshold = 1;
  std::string mapping = "greedy";
  std::int64_t state_bytes = 1 << 20;
  std::string out;
  std::string format = "json";
};

inline int cmd_migrate(const MigrateArgs& a, std::ostream& out) {
  const auto old = detail::read_deployments(a.old_path);
  std::vector<NodeId> live = a.live;
  if (live.empty()) live = old.front().column_nodes;

  std::vector<LayerDeployment> deployments;
  std::vector<NodeMapping> mappings;
  TransferSchedule transfers;
  if (!a.new_path.empty()) {
    const auto next = detail::read_plans(a.new_path);
    if (next.size() != old.size())
      throw ValidationError(std::to_string(old.size()) + " old layers but " + std::to_string(next.size()) + " new plans");
    for (std::size_t l = 0; l < old.size(); ++l) {
      NodeMapping m;
      if (a.mapping == "greedy") m = greedy_node_mapping(old[l], next[l], live);
      else if (a.mapping == "identity") m = identity_node_mapping(old[l], next[l], live);
      else m = optimal_node_mapping(old[l], next[l], live);
      deployments.push_back(apply_mapping(m, next[l]));
      mappings.push_back(std::move(m));
    }
    transfers = plan_state_transfers(old, mappings, live, a.state_bytes);
  } else {
    if (a.mapping != "greedy") throw ValidationError("--mapping applies only with --new");
    std::vector<std::vector<std::int64_t>> loads;
    for (std::size_t l = 0; l < old.size(); ++l) {
      loads.push_back(a.counts.empty() ? detail::layer_counts(a.loads_path, static_cast<int>(l)) : a.counts);
      detail::check_counts(loads.back());
    }
    const int slots = a.slots > 0 ? a.slots : old.front().plan.slots_per_node();
    ClusterSpec spec{static_cast<int>(live.size()), slots, a.fault_threshold, {}};
    validate_cluster_spec(spec, static_cast<int>(loads.front().size()));
    auto r = replan(old, live, loads, spec, a.state_bytes);
    deployments = std::move(r.deployments);
    mappings = std::move(r.mappings);
    transfers = std::move(r.transfers);
  }

  std::string text;
  if (a.format == "csv") {
    text = "layer,expert,src,dst,bytes\n";
    for (const auto& t : transfers.transfers)
      text += std::to_string(t.layer) + ',' + std::to_string(t.expert) + ',' + std::to_string(t.source) + ',' +
              std::to_string(t.destination) + ',' + std::to_string(t.size_bytes) + '\n';
  } else {
    text = json{{"deployments", deployments},
                {"mappings", mappings},
                {"transfers", transfers},
                {"cost", transfer_cost(std::span<const NodeMapping>(mappings))}}
               .dump(2);
  }
  detail::emit(text, a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// simulate

struct SimulateArgs {
  std::string config_path;
  std::string strategy;
  std::string out;
  std::string format = "csv";
};

inline int cmd_simulate(const SimulateArgs& a, std::ostream& out) {
  if (!std::filesystem::exists(a.config_path)) throw ValidationError("cannot read " + a.config_path);
  auto cfg = load_sim_config(a.config_path);
  if (!a.strategy.empty()) {
    cfg.strategy = strategy_from_string(a.strategy);
    cfg.validate();
  }
  detail::emit(emit_report(run_simulation(cfg), a.format), a.out, out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gen-trace

struct SkewArgs {
  int experts = 8;
  int layers = 1;
  int steps = 1;
  double rho = 1.0;
  std::int64_t total = 8000;
  std::uint64_t seed = 0;
  std::string out;
};

struct SpotArgs {
  SpotParams params;
  std::uint64_t seed = 0;
  std::string out;
};

struct StepDownArgs {
  int initial = 8;
  int final_nodes = 4;
  double first_s = 600;
  double interval_s = 600;
  std::string out;
};

inline int cmd_gen_skew(const SkewArgs& a, std::ostream& out) {
  detail::emit(serialize_load_trace(skew_sweep_trace(a.experts, a.layers, a.steps, a.rho, a.total, a.seed)), a.out,
               out);
  return kExitOk;
}

inline int cmd_gen_spot(const SpotArgs& a, std::ostream& out) {
  detail::emit(serialize_availability_trace(synthetic_spot_trace(a.params, a.seed)), a.out, out);
  return kExitOk;
}

inline int cmd_gen_step_down(const StepDownArgs& a, std::ostream& out) {
  detail::emit(serialize_availability_trace(step_down_trace(a.initial, a.final_nodes, a.first_s, a.interval_s)), a.out,
               out);
  return kExitOk;
}

// ---------------------------------------------------------------------------
// serve-controller / run-agent

struct ControllerArgs {
  std::string listen = "127.0.0.1:7070";
  double heartbeat = 1.0;
  double timeout_mult = 2.5;
  int checkpoint_interval = 250;
  int expected_nodes = 1;
  int experts = 8;
  int layers = 1;
  int slots = 2;
  int fault_threshold = 1;
  std::int64_t blob_size = 4096;
  double join_wait = 1.0;
  double rebalance = 0.0;
  std::string loads_path;
  double duration = 0.0;
  std::string port_file;
};

inline int cmd_serve_controller(const ControllerArgs& a, std::ostream& out) {
  cp::ControllerConfig cfg;
  cfg.listen = net::Endpoint::parse(a.listen);
  cfg.heartbeat_period_s = a.heartbeat;
  cfg.timeout_multiplier = a.timeout_mult;
  cfg.checkpoint_interval_steps = a.checkpoint_interval;
  cfg.expected_nodes = a.expected_nodes;
  cfg.n_experts = a.experts;
  cfg.n_layers = a.layers;
  cfg.spec.slots_per_node = a.slots;
  cfg.spec.fault_threshold = a.fault_threshold;
  cfg.blob_bytes = a.blob_size;
  cfg.join_accumulation_s = a.join_wait;
  cfg.rebalance_interval_s = a.rebalance;
  if (!a.loads_path.empty()) {
    cfg.initial_loads = detail::all_layer_counts(a.loads_path, a.layers);
    cfg.n_experts = static_cast<int>(cfg.initial_loads.front().size());
  }
  cp::Controller ctrl(cfg);
  std::mutex out_mu;
  ctrl.on_event([&](const cp::ControllerEvent& e) {
    std::lock_guard lk(out_mu);
    out << cp::event_to_json(e).dump() << std::endl;
  });
  detail::install_stop_handlers();
  ctrl.start();
  {
    std::lock_guard lk(out_mu);
    out << json{{"time_s", 0.0}, {"kind", "listening"}, {"detail", {{"endpoint", ctrl.endpoint().str()}}}}.dump()
        << std::endl;
  }
  if (!a.port_file.empty()) detail::emit(std::to_string(ctrl.port()), a.port_file, out);
  while (!detail::stop_requested() && (a.duration <= 0 || ctrl.now() < a.duration))
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
  ctrl.stop();
  return kExitOk;
}

struct AgentArgs {
  std::string controller;
  NodeId node = -1;
  std::size_t blob_size = 4096;
  double heartbeat = 1.0;
  std::string listen_host = "127.0.0.1";
  double connect_timeout = 10.0;
  std::vector<std::int64_t> load;
  bool corrupt = false;
};

inline int cmd_run_agent(const AgentArgs& a, std::ostream& err) {
  cp::AgentConfig cfg;
  cfg.controller = net::Endpoint::parse(a.controller);
  cfg.node = a.node;
  cfg.blob_size = a.blob_size;
  cfg.heartbeat_period_s = a.heartbeat;
  cfg.listen_host = a.listen_host;
  cfg.connect_timeout_s = a.connect_timeout;
  cfg.synthetic_load = a.load;
  cfg.corrupt_serving = a.corrupt;
  cp::Agent agent(cfg);
  detail::install_stop_handlers();
  agent.start();
  while (agent.running() && !detail::stop_requested()) std::this_thread::sleep_for(std::chrono::milliseconds(50));
  if (detail::stop_requested()) {
    agent.stop();
    return kExitOk;
  }
  const auto why = agent.wait();
  agent.crash();
  err << "agent " << a.node << ": " << why << '\n';
  return why == "controller requested shutdown" ? kExitOk : kExitRuntime;
}

// ---------------------------------------------------------------------------
// entry point

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  CLI::App app{"Elastic expert-parallel planning, analysis, simulation and control plane"};
  app.name("elasticep");
  app.require_subcommand(1);
  const auto formats = [](std::initializer_list<std::string> fs) { return CLI::IsMember(std::vector<std::string>(fs)); };

  PlanArgs pa;
  auto* plan = app.add_subcommand("plan", "Allocate replicas and build the MRO placement for one layer");
  auto* pl_loads = plan->add_option("--loads", pa.loads_path, "Load trace (JSONL) or JSON array of counts")
                       ->check(CLI::ExistingFile);
  auto* pl_counts = plan->add_option("--counts", pa.counts, "Comma-separated expert loads")->delimiter(',');
  pl_loads->excludes(pl_counts);
  plan->add_option("-N,--nodes", pa.nodes, "Number of nodes")->required()->check(CLI::PositiveNumber);
  plan->add_option("-c,--slots", pa.slots, "Expert slots per node")->required()->check(CLI::PositiveNumber);
  plan->add_option("-f,--fault-threshold", pa.fault_threshold, "Minimum replicas per expert")
      ->check(CLI::NonNegativeNumber)
      ->capture_default_str();
  plan->add_option("--layer", pa.layer, "Layer to plan")->check(CLI::NonNegativeNumber)->capture_default_str();
  plan->add_option("--out", pa.out, "Write the plan JSON here");
  plan->add_option("--format", pa.format, "text, json or csv")->check(formats({"text", "json", "csv"}))->capture_default_str();

  RecoverArgs ra;
  auto* rec = app.add_subcommand("recover-prob", "Recovery probability per number of failed nodes");
  auto* rc_plan = rec->add_option("--plan", ra.plan_path, "Placement plan JSON")->check(CLI::ExistingFile);
  auto* rc_loads = rec->add_option("--loads", ra.loads_path, "Load trace or counts array (MRO from loads)")
                       ->check(CLI::ExistingFile);
  auto* rc_counts = rec->add_option("--counts", ra.counts, "Comma-separated expert loads")->delimiter(',');
  auto* rc_reps = rec->add_option("--replicas", ra.replicas, "Comma-separated replica counts")->delimiter(',');
  rc_plan->excludes(rc_loads)->excludes(rc_counts)->excludes(rc_reps);
  rc_loads->excludes(rc_counts)->excludes(rc_reps);
  rc_counts->excludes(rc_reps);
  rec->add_option("-N,--nodes", ra.nodes, "Number of nodes")->check(CLI::PositiveNumber);
  rec->add_option("-c,--slots", ra.slots, "Expert slots per node")->check(CLI::PositiveNumber);
  rec->add_option("-f,--fault-threshold", ra.fault_threshold, "Minimum replicas per expert")
      ->check(CLI::NonNegativeNumber);
  rec->add_option("--layer", ra.layer, "Layer (for traces and multi-layer plan files)")->check(CLI::NonNegativeNumber);
  rec->add_option("--strategies", ra.strategies, "plan, mro, spread, compact, optimal")->delimiter(',');
  rec->add_option("--k-min", ra.k_min, "Fewest failed nodes")->check(CLI::NonNegativeNumber);
  rec->add_option("--k-max", ra.k_max, "Most failed nodes (default N)")->check(CLI::NonNegativeNumber);
  rec->add_option("--mc", ra.mc_samples, "Monte Carlo samples instead of exact enumeration")
      ->check(CLI::PositiveNumber);
  rec->add_option("--seed", ra.seed, "Monte Carlo seed")->capture_default_str();
  rec->add_option("--cap", ra.cap, "Largest number of failure sets to enumerate")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  rec->add_option("--out", ra.out, "Output file");
  rec->add_option("--format", ra.format, "csv or json")->check(formats({"csv", "json"}))->capture_default_str();

  DispatchArgs da;
  auto* dis = app.add_subcommand("dispatch", "Per-rank token dispatch schedules");
  dis->add_option("--tokens", da.tokens_path, "JSON [rank][expert] token counts")
      ->required()
      ->check(CLI::ExistingFile);
  auto* ds_reps = dis->add_option("--replicas", da.replicas_path, "JSON [expert][rank] replica counts")
                      ->check(CLI::ExistingFile);
  auto* ds_plan = dis->add_option("--plan", da.plan_path, "Placement plan JSON (rank j = node j)")
                      ->check(CLI::ExistingFile);
  ds_reps->excludes(ds_plan);
  dis->add_option("--layer", da.layer, "Layer of a multi-layer plan file")->check(CLI::NonNegativeNumber);
  dis->add_option("--rank", da.rank, "Only this rank's schedule")->check(CLI::NonNegativeNumber);
  dis->add_flag("--check", da.check, "Simulate the all-to-all and verify it");
  dis->add_option("--out", da.out, "Output file");
  dis->add_option("--format", da.format, "json or csv")->check(formats({"json", "csv"}))->capture_default_str();

  MigrateArgs ma;
  auto* mig = app.add_subcommand("migrate", "Node mapping and state transfers for a new plan");
  mig->add_option("--old", ma.old_path, "Current deployments JSON")->required()->check(CLI::ExistingFile);
  auto* mg_new = mig->add_option("--new", ma.new_path, "New placement plan(s) JSON")->check(CLI::ExistingFile);
  auto* mg_loads = mig->add_option("--loads", ma.loads_path, "Loads to replan from")->check(CLI::ExistingFile);
  auto* mg_counts = mig->add_option("--counts", ma.counts, "Comma-separated expert loads")->delimiter(',');
  mg_new->excludes(mg_loads)->excludes(mg_counts);
  mg_loads->excludes(mg_counts);
  mig->add_option("--live", ma.live, "Comma-separated live node ids")->delimiter(',');
  mig->add_option("-c,--slots", ma.slots, "Slots per node when replanning")->check(CLI::PositiveNumber);
  mig->add_option("-f,--fault-threshold", ma.fault_threshold, "Minimum replicas when replanning")
      ->check(CLI::NonNegativeNumber);
  mig->add_option("--mapping", ma.mapping, "greedy, identity or optimal")
      ->check(formats({"greedy", "identity", "optimal"}))
      ->capture_default_str();
  mig->add_option("--state-bytes", ma.state_bytes, "Bytes per expert state")->check(CLI::PositiveNumber);
  mig->add_option("--out", ma.out, "Output file");
  mig->add_option("--format", ma.format, "json or csv")->check(formats({"json", "csv"}))->capture_default_str();

  SimulateArgs sa;
  auto* sim = app.add_subcommand("simulate", "Replay availability and load traces under a strategy");
  sim->add_option("--config", sa.config_path, "Simulation config JSON")->required();
  sim->add_option("--strategy", sa.strategy, "Override: lazarus, ds or ds_ft")
      ->check(formats({"lazarus", "ds", "ds_ft"}));
  sim->add_option("--out", sa.out, "Output file");
  sim->add_option("--format", sa.format, "csv or json")->check(formats({"csv", "json"}))->capture_default_str();

  auto* gen = app.add_subcommand("gen-trace", "Generate synthetic traces");
  gen->require_subcommand(1);
  SkewArgs ka;
  auto* skew = gen->add_subcommand("skew-sweep", "Load trace with one hot expert per layer");
  skew->add_option("--experts", ka.experts, "Experts")->check(CLI::PositiveNumber)->capture_default_str();
  skew->add_option("--layers", ka.layers, "Layers")->check(CLI::PositiveNumber)->capture_default_str();
  skew->add_option("--steps", ka.steps, "Steps")->check(CLI::PositiveNumber)->capture_default_str();
  skew->add_option("--rho", ka.rho, "Hot expert's multiple of the uniform share")->required();
  skew->add_option("--total", ka.total, "Tokens per layer and step")->check(CLI::NonNegativeNumber)->capture_default_str();
  skew->add_option("--seed", ka.seed, "Seed choosing the hot experts")->capture_default_str();
  skew->add_option("--out", ka.out, "Output file");
  SpotArgs sp;
  auto* spot = gen->add_subcommand("synthetic-spot", "Availability trace with random preemptions and arrivals");
  spot->add_option("--initial", sp.params.initial_nodes, "Nodes at t=0")->capture_default_str();
  spot->add_option("--min", sp.params.min_nodes, "Fewest live nodes")->capture_default_str();
  spot->add_option("--max", sp.params.max_nodes, "Most live nodes")->capture_default_str();
  spot->add_option("--duration", sp.params.duration_s, "Seconds")->capture_default_str();
  spot->add_option("--mean-interval", sp.params.mean_interval_s, "Mean seconds between events")->capture_default_str();
  spot->add_option("--seed", sp.seed, "Seed")->capture_default_str();
  spot->add_option("--out", sp.out, "Output file");
  StepDownArgs sd;
  auto* step = gen->add_subcommand("step-down", "Availability trace losing one node per interval");
  step->add_option("--initial", sd.initial, "Nodes at t=0")->capture_default_str();
  step->add_option("--final", sd.final_nodes, "Nodes left at the end")->capture_default_str();
  step->add_option("--first", sd.first_s, "Time of the first removal")->capture_default_str();
  step->add_option("--interval", sd.interval_s, "Seconds between removals")->capture_default_str();
  step->add_option("--out", sd.out, "Output file");

  ControllerArgs ca;
  auto* srv = app.add_subcommand("serve-controller", "Run the controller; events go to stdout as JSON lines");
  srv->add_option("--listen", ca.listen, "host:port (port 0 picks one)")->capture_default_str();
  srv->add_option("--heartbeat", ca.heartbeat, "Heartbeat period in seconds")->check(CLI::PositiveNumber)->capture_default_str();
  srv->add_option("--timeout-mult", ca.timeout_mult, "Failure timeout in heartbeat periods")->capture_default_str();
  srv->add_option("--checkpoint-interval", ca.checkpoint_interval, "Steps between checkpoints")->capture_default_str();
  srv->add_option("--expected-nodes", ca.expected_nodes, "Registrations before the first plan")->capture_default_str();
  srv->add_option("--experts", ca.experts, "Experts per layer")->capture_default_str();
  srv->add_option("--layers", ca.layers, "MoE layers")->capture_default_str();
  srv->add_option("-c,--slots", ca.slots, "Expert slots per node")->capture_default_str();
  srv->add_option("-f,--fault-threshold", ca.fault_threshold, "Minimum replicas per expert")->capture_default_str();
  srv->add_option("--blob-size", ca.blob_size, "Bytes per expert state")->capture_default_str();
  srv->add_option("--join-wait", ca.join_wait, "Seconds to accumulate joins")->capture_default_str();
  srv->add_option("--rebalance", ca.rebalance, "Seconds between rebalances (0 = never)")->capture_default_str();
  srv->add_option("--loads", ca.loads_path, "Initial loads (trace or counts array)")->check(CLI::ExistingFile);
  srv->add_option("--duration", ca.duration, "Exit after this many seconds (0 = until signalled)");
  srv->add_option("--port-file", ca.port_file, "Write the bound port here");

  AgentArgs aa;
  auto* agt = app.add_subcommand("run-agent", "Run one node agent");
  agt->add_option("--controller", aa.controller, "Controller host:port")->required();
  agt->add_option("--node", aa.node, "Node id")->required()->check(CLI::NonNegativeNumber);
  agt->add_option("--blob-size", aa.blob_size, "Bytes per synthetic expert state")->capture_default_str();
  agt->add_option("--heartbeat", aa.heartbeat, "Heartbeat period in seconds")->capture_default_str();
  agt->add_option("--listen-host", aa.listen_host, "Address for the fetch server")->capture_default_str();
  agt->add_option("--connect-timeout", aa.connect_timeout, "Seconds to keep trying the controller")
      ->capture_default_str();
  agt->add_option("--load", aa.load, "Comma-separated per-expert tokens to report")->delimiter(',');
  agt->add_flag("--corrupt", aa.corrupt, "Fault injection: serve corrupted blobs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, out, err);
    return kExitInput;
  }

  try {
    if (*plan) {
      if (pa.loads_path.empty() && pa.counts.empty()) throw ValidationError("plan needs --loads or --counts");
      return cmd_plan(pa, out);
    }
    if (*rec) {
      if (ra.plan_path.empty() && ra.loads_path.empty() && ra.counts.empty() && ra.replicas.empty())
        throw ValidationError("recover-prob needs --plan, --replicas, --loads or --counts");
      return cmd_recover_prob(ra, out);
    }
    if (*dis) {
      if (da.replicas_path.empty() && da.plan_path.empty()) throw ValidationError("dispatch needs --replicas or --plan");
      return cmd_dispatch(da, out, err);
    }
    if (*mig) {
      if (ma.new_path.empty() && ma.loads_path.empty() && ma.counts.empty())
        throw ValidationError("migrate needs --new, --loads or --counts");
      return cmd_migrate(ma, out);
    }
    if (*sim) return cmd_simulate(sa, out);
    if (*skew) return cmd_gen_skew(ka, out);
    if (*spot) return cmd_gen_spot(sp, out);
    if (*step) return cmd_gen_step_down(sd, out);
    if (*srv) return cmd_serve_controller(ca, out);
    if (*agt) return cmd_run_agent(aa, err);
  } catch (const InfeasibleError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const SchemaError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const EnumerationCapError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const UnroutableTokensError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitInput;
}

}  // namespace elasticep::cli
