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

// Shared domain types for the elastic expert-parallel toolkit: cluster shape,
// cost model, expert load matrices, and the two trace formats (routing loads
// and node availability), both stored as one JSON object per line.

#pragma once

#include <algorithm>
#include <cctype>
#include <cstdint>
#include <limits>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace elasticep {

using NodeId = int;
using ExpertId = int;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed input text. `line()` is 1-based, 0 when not line-oriented.
class ParseError : public Error {
 public:
  ParseError(std::size_t line, const std::string& what)
      : Error(line ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class SchemaError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

/// The cluster cannot host the requested model at all.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

struct CostModel {
  double per_token_compute_s = 5e-5;
  double per_token_comm_s = 5e-6;
  double step_overhead_s = 0.05;
  double reconfig_s = 30.0;
  double checkpoint_save_s = 15.0;
  double restart_s = 90.0;
  int checkpoint_interval_steps = 250;
  int rebalance_interval_steps = 200;
  double join_accumulation_s = 120.0;

  void validate() const {
    for (double v : {per_token_compute_s, per_token_comm_s, step_overhead_s,
                     reconfig_s, checkpoint_save_s, restart_s,
                     join_accumulation_s}) {
      if (!(v >= 0.0)) throw ValidationError("cost model values must be non-negative");
    }
    if (checkpoint_interval_steps < 1 || rebalance_interval_steps < 1)
      throw ValidationError("cost model intervals must be >= 1");
  }
};

struct ClusterSpec {
  int n_nodes = 1;
  int slots_per_node = 1;
  int fault_threshold = 0;
  CostModel cost;

  long total_slots() const { return static_cast<long>(n_nodes) * slots_per_node; }

  void validate() const {
    if (n_nodes < 1) throw ValidationError("n_nodes must be >= 1");
    if (slots_per_node < 1) throw ValidationError("slots_per_node must be >= 1");
    if (fault_threshold < 0) throw ValidationError("fault_threshold must be >= 0");
    if (fault_threshold > n_nodes)
      throw ValidationError("fault_threshold must not exceed n_nodes");
    cost.validate();
  }
};

/// Effective fault threshold: f clipped to what N*c slots can give every
/// expert, and never below one replica per expert.
inline int validate_cluster_spec(const ClusterSpec& spec, int n_experts) {
  spec.validate();
  if (n_experts < 1) throw ValidationError("n_experts must be >= 1");
  if (spec.total_slots() < n_experts)
    throw InfeasibleError("cluster cannot hold one replica per expert (" +
                          std::to_string(spec.total_slots()) + " slots < " +
                          std::to_string(n_experts) + " experts)");
  const long cap = spec.total_slots() / n_experts;
  return static_cast<int>(std::max<long>(1, std::min<long>(spec.fault_threshold, cap)));
}

/// Splits `total` into parts proportional to `weights` using the largest
/// remainder method. Ties on the remainder go to the lower index. All-zero
/// weights split evenly.
inline std::vector<std::int64_t> apportion(std::int64_t total,
                                           std::span<const std::int64_t> weights) {
  const std::size_t n = weights.size();
  std::vector<std::int64_t> out(n, 0);
  if (n == 0 || total <= 0) return out;
  __int128 wsum = 0;
  for (auto w : weights) {
    if (w < 0) throw ValidationError("apportion: negative weight");
    wsum += w;
  }
  std::vector<std::int64_t> uniform;
  if (wsum == 0) {
    uniform.assign(n, 1);
    weights = uniform;
    wsum = static_cast<__int128>(n);
  }
  std::vector<std::pair<__int128, std::size_t>> rem(n);
  std::int64_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const __int128 num = static_cast<__int128>(total) * weights[i];
    out[i] = static_cast<std::int64_t>(num / wsum);
    rem[i] = {num % wsum, i};
    assigned += out[i];
  }
  std::stable_sort(rem.begin(), rem.end(), [](const auto& a, const auto& b) {
    return a.first > b.first;
  });
  for (std::int64_t k = 0; k < total - assigned; ++k) out[rem[static_cast<std::size_t>(k)].second] += 1;
  return out;
}

/// Routed-token counts for one layer, indexed [expert][rank].
class ExpertLoads {
 public:
  ExpertLoads() = default;

  explicit ExpertLoads(std::vector<std::vector<std::int64_t>> per_rank)
      : per_rank_(std::move(per_rank)) {
    if (per_rank_.empty()) throw ValidationError("ExpertLoads: need >= 1 expert");
    const std::size_t ranks = per_rank_.front().size();
    totals_.reserve(per_rank_.size());
    for (const auto& row : per_rank_) {
      if (row.size() != ranks) throw ValidationError("ExpertLoads: ragged rank counts");
      std::int64_t s = 0;
      for (auto v : row) {
        if (v < 0) throw ValidationError("ExpertLoads: negative token count");
        s += v;
      }
      totals_.push_back(s);
    }
  }

  /// Per-expert totals spread over `n_ranks` ranks as evenly as integers allow.
  static ExpertLoads from_totals(std::span<const std::int64_t> totals, int n_ranks) {
    if (n_ranks < 1) throw ValidationError("ExpertLoads: n_ranks must be >= 1");
    std::vector<std::int64_t> even(static_cast<std::size_t>(n_ranks), 1);
    std::vector<std::vector<std::int64_t>> m;
    m.reserve(totals.size());
    for (auto t : totals) {
      if (t < 0) throw ValidationError("ExpertLoads: negative token count");
      m.push_back(apportion(t, even));
    }
    return ExpertLoads(std::move(m));
  }

  int n_experts() const { return static_cast<int>(per_rank_.size()); }
  int n_ranks() const { return per_rank_.empty() ? 0 : static_cast<int>(per_rank_.front().size()); }
  const std::vector<std::vector<std::int64_t>>& per_rank() const { return per_rank_; }
  const std::vector<std::int64_t>& totals() const { return totals_; }
  std::int64_t at(int expert, int rank) const {
    return per_rank_.at(static_cast<std::size_t>(expert)).at(static_cast<std::size_t>(rank));
  }

 private:
  std::vector<std::vector<std::int64_t>> per_rank_;
  std::vector<std::int64_t> totals_;
};

struct LoadRecord {
  std::int64_t step = 0;
  int layer = 0;
  std::vector<std::int64_t> counts;
  // Optional explicit [expert][rank] split; empty means "totals only".
  std::vector<std::vector<std::int64_t>> per_rank;

  bool operator==(const LoadRecord&) const = default;
};

struct LoadTrace {
  std::vector<LoadRecord> records;
  int n_experts = 0;  // 0 while the trace is empty

  bool empty() const { return records.empty(); }
  bool operator==(const LoadTrace&) const = default;

  std::set<int> layers() const {
    std::set<int> out;
    for (const auto& r : records) out.insert(r.layer);
    return out;
  }

  /// Records of one layer in file order (which is step order).
  std::vector<const LoadRecord*> layer_records(int layer) const {
    std::vector<const LoadRecord*> out;
    for (const auto& r : records)
      if (r.layer == layer) out.push_back(&r);
    return out;
  }
};

namespace detail {

inline std::vector<std::string_view> split_lines(std::string_view text) {
  std::vector<std::string_view> lines;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    auto line = text.substr(pos, nl - pos);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    lines.push_back(line);
    pos = nl + 1;
  }
  return lines;
}

inline bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](char c) { return std::isspace(static_cast<unsigned char>(c)); });
}

inline nlohmann::json parse_line(std::string_view line, std::size_t lineno) {
  try {
    auto j = nlohmann::json::parse(line);
    if (!j.is_object()) throw ParseError(lineno, "expected a JSON object");
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(lineno, std::string("invalid JSON: ") + e.what());
  }
}

template <typename T>
T require(const nlohmann::json& j, const char* key, std::size_t lineno) {
  auto it = j.find(key);
  if (it == j.end()) throw ParseError(lineno, std::string("missing field '") + key + "'");
  try {
    return it->get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ParseError(lineno, std::string("field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

inline LoadTrace parse_load_trace(std::string_view text) {
  LoadTrace trace;
  std::map<int, std::int64_t> last_step;
  const auto lines = detail::split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    if (detail::blank(lines[i])) continue;
    const auto j = detail::parse_line(lines[i], lineno);
    LoadRecord rec;
    rec.step = detail::require<std::int64_t>(j, "step", lineno);
    rec.layer = detail::require<int>(j, "layer", lineno);
    rec.counts = detail::require<std::vector<std::int64_t>>(j, "counts", lineno);
    if (j.contains("per_rank"))
      rec.per_rank = detail::require<std::vector<std::vector<std::int64_t>>>(j, "per_rank", lineno);

    if (rec.step < 0 || rec.layer < 0) throw ParseError(lineno, "step and layer must be non-negative");
    for (auto c : rec.counts)
      if (c < 0) throw ParseError(lineno, "token counts must be non-negative");
    if (rec.counts.empty()) throw SchemaError("line " + std::to_string(lineno) + ": empty counts");
    if (trace.n_experts == 0) trace.n_experts = static_cast<int>(rec.counts.size());
    if (static_cast<int>(rec.counts.size()) != trace.n_experts)
      throw SchemaError("line " + std::to_string(lineno) + ": expected " +
                        std::to_string(trace.n_experts) + " expert counts, got " +
                        std::to_string(rec.counts.size()));
    if (!rec.per_rank.empty()) {
      if (rec.per_rank.size() != rec.counts.size())
        throw SchemaError("line " + std::to_string(lineno) + ": per_rank must have one row per expert");
      for (std::size_t e = 0; e < rec.counts.size(); ++e) {
        const auto& row = rec.per_rank[e];
        if (row.size() != rec.per_rank.front().size())
          throw SchemaError("line " + std::to_string(lineno) + ": ragged per_rank rows");
        std::int64_t s = 0;
        for (auto v : row) {
          if (v < 0) throw ParseError(lineno, "token counts must be non-negative");
          s += v;
        }
        if (s != rec.counts[e])
          throw SchemaError("line " + std::to_string(lineno) + ": per_rank row " +
                            std::to_string(e) + " does not sum to counts");
      }
    }
    auto [it, fresh] = last_step.try_emplace(rec.layer, rec.step);
    if (!fresh) {
      if (rec.step < it->second)
        throw SchemaError("line " + std::to_string(lineno) + ": steps must be non-decreasing per layer");
      it->second = rec.step;
    }
    trace.records.push_back(std::move(rec));
  }
  return trace;
}

inline std::string serialize_load_trace(const LoadTrace& trace) {
  std::string out;
  for (const auto& r : trace.records) {
    nlohmann::json j = {{"step", r.step}, {"layer", r.layer}, {"counts", r.counts}};
    if (!r.per_rank.empty()) j["per_rank"] = r.per_rank;
    out += j.dump();
    out += '\n';
  }
  return out;
}

/// Loads of one record as an ExpertLoads over `n_ranks` ranks. An explicit
/// per-rank split is used when present and sized to match.
inline ExpertLoads loads_from_record(const LoadRecord& rec, int n_ranks) {
  if (!rec.per_rank.empty() && static_cast<int>(rec.per_rank.front().size()) == n_ranks)
    return ExpertLoads(rec.per_rank);
  return ExpertLoads::from_totals(rec.counts, n_ranks);
}

enum class AvailabilityKind { add, remove };

struct AvailabilityEvent {
  double time_s = 0.0;
  AvailabilityKind kind = AvailabilityKind::add;
  std::vector<NodeId> nodes;

  bool operator==(const AvailabilityEvent&) const = default;
};

struct AvailabilityTrace {
  std::vector<AvailabilityEvent> events;

  bool operator==(const AvailabilityTrace&) const = default;

  /// Live node set after replaying every event.
  std::set<NodeId> final_live_set() const { return live_set_at(std::numeric_limits<double>::infinity()); }

  /// Live set after applying all events with time <= t.
  std::set<NodeId> live_set_at(double t) const {
    std::set<NodeId> live;
    for (const auto& ev : events) {
      if (ev.time_s > t) break;
      for (auto n : ev.nodes) {
        if (ev.kind == AvailabilityKind::add) live.insert(n);
        else live.erase(n);
      }
    }
    return live;
  }
};

inline void validate_availability_trace(const AvailabilityTrace& trace) {
  std::set<NodeId> live;
  double prev = 0.0;
  for (std::size_t i = 0; i < trace.events.size(); ++i) {
    const auto& ev = trace.events[i];
    if (ev.time_s < 0.0) throw ValidationError("event " + std::to_string(i) + ": negative time");
    if (i > 0 && ev.time_s < prev)
      throw ValidationError("event " + std::to_string(i) + ": times must be non-decreasing");
    prev = ev.time_s;
    for (auto n : ev.nodes) {
      if (ev.kind == AvailabilityKind::add) {
        if (!live.insert(n).second)
          throw ValidationError("event " + std::to_string(i) + ": node " + std::to_string(n) + " added twice");
      } else if (live.erase(n) == 0) {
        throw ValidationError("event " + std::to_string(i) + ": removal of node " +
                              std::to_string(n) + " which is not live");
      }
    }
  }
}

inline AvailabilityTrace parse_availability_trace(std::string_view text) {
  AvailabilityTrace trace;
  const auto lines = detail::split_lines(text);
  for (std::size_t i = 0; i < lines.size(); ++i) {
    const std::size_t lineno = i + 1;
    if (detail::blank(lines[i])) continue;
    const auto j = detail::parse_line(lines[i], lineno);
    AvailabilityEvent ev;
    ev.time_s = detail::require<double>(j, "t", lineno);
    if (ev.time_s < 0.0) throw ParseError(lineno, "negative time");
    const auto kind = detail::require<std::string>(j, "kind", lineno);
    if (kind == "add") ev.kind = AvailabilityKind::add;
    else if (kind == "remove") ev.kind = AvailabilityKind::remove;
    else throw ParseError(lineno, "kind must be 'add' or 'remove'");
    ev.nodes = detail::require<std::vector<NodeId>>(j, "nodes", lineno);
    trace.events.push_back(std::move(ev));
  }
  validate_availability_trace(trace);
  return trace;
}

inline std::string serialize_availability_trace(const AvailabilityTrace& trace) {
  std::string out;
  for (const auto& ev : trace.events) {
    nlohmann::json j = {{"t", ev.time_s},
                        {"kind", ev.kind == AvailabilityKind::add ? "add" : "remove"},
                        {"nodes", ev.nodes}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

inline void to_json(nlohmann::json& j, const CostModel& m) {
  j = {{"per_token_compute_s", m.per_token_compute_s},
       {"per_token_comm_s", m.per_token_comm_s},
       {"step_overhead_s", m.step_overhead_s},
       {"reconfig_s", m.reconfig_s},
       {"checkpoint_save_s", m.checkpoint_save_s},
       {"restart_s", m.restart_s},
       {"checkpoint_interval_steps", m.checkpoint_interval_steps},
       {"rebalance_interval_steps", m.rebalance_interval_steps},
       {"join_accumulation_s", m.join_accumulation_s}};
}

inline void from_json(const nlohmann::json& j, CostModel& m) {
  m.per_token_compute_s = j.value("per_token_compute_s", m.per_token_compute_s);
  m.per_token_comm_s = j.value("per_token_comm_s", m.per_token_comm_s);
  m.step_overhead_s = j.value("step_overhead_s", m.step_overhead_s);
  m.reconfig_s = j.value("reconfig_s", m.reconfig_s);
  m.checkpoint_save_s = j.value("checkpoint_save_s", m.checkpoint_save_s);
  m.restart_s = j.value("restart_s", m.restart_s);
  m.checkpoint_interval_steps = j.value("checkpoint_interval_steps", m.checkpoint_interval_steps);
  m.rebalance_interval_steps = j.value("rebalance_interval_steps", m.rebalance_interval_steps);
  m.join_accumulation_s = j.value("join_accumulation_s", m.join_accumulation_s);
}

inline void to_json(nlohmann::json& j, const ClusterSpec& s) {
  j = {{"n_nodes", s.n_nodes}, {"slots_per_node", s.slots_per_node}, {"fault_threshold", s.fault_threshold}, {"cost", s.cost}};
}

inline void from_json(const nlohmann::json& j, ClusterSpec& s) {
  try {
    s.n_nodes = j.at("n_nodes").get<int>();
    s.slots_per_node = j.at("slots_per_node").get<int>();
    s.fault_threshold = j.value("fault_threshold", 0);
    s.cost = j.value("cost", CostModel{});
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("cluster spec: ") + e.what());
  }
}

}  // namespace elasticep
