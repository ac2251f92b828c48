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
#include <cstdint>
#include <map>
#include <numeric>
#include <set>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "elasticep/allocation.hpp"
#include "elasticep/core.hpp"
#include "elasticep/expert_set.hpp"
#include "elasticep/placement.hpp"

namespace elasticep {

/// Some expert state has no surviving owner; the caller must fall back to a checkpoint.
class UnrecoverableError : public Error {
 public:
  UnrecoverableError(const std::string& what, std::vector<std::pair<int, ExpertId>> orphans)
      : Error(what), orphans_(std::move(orphans)) {}
  /// (layer, expert) pairs with no live owner.
  const std::vector<std::pair<int, ExpertId>>& orphans() const { return orphans_; }

 private:
  std::vector<std::pair<int, ExpertId>> orphans_;
};

/// A placement plan bound to physical nodes: column j runs on column_nodes[j].
struct LayerDeployment {
  PlacementPlan plan;
  std::vector<NodeId> column_nodes;

  int layer() const { return plan.layer(); }

  void validate() const {
    if (static_cast<int>(column_nodes.size()) != plan.n_nodes())
      throw ValidationError("deployment: " + std::to_string(column_nodes.size()) + " nodes for " +
                            std::to_string(plan.n_nodes()) + " columns");
    std::set<NodeId> seen(column_nodes.begin(), column_nodes.end());
    if (seen.size() != column_nodes.size()) throw ValidationError("deployment: node bound to two columns");
  }

  /// Experts held by `node`; empty if the node is not part of this deployment.
  ExpertSet experts_on(NodeId node) const {
    for (std::size_t j = 0; j < column_nodes.size(); ++j)
      if (column_nodes[j] == node) return plan.col_set(static_cast<int>(j));
    return ExpertSet(plan.n_experts());
  }

  std::vector<NodeId> owners(ExpertId e) const {
    std::vector<NodeId> out;
    for (std::size_t j = 0; j < column_nodes.size(); ++j)
      if (plan.col_set(static_cast<int>(j)).contains(e)) out.push_back(column_nodes[j]);
    std::sort(out.begin(), out.end());
    return out;
  }

  bool operator==(const LayerDeployment&) const = default;
};

struct NodeMapping {
  std::map<NodeId, int> assignment;                     // node -> column of the new plan
  std::map<NodeId, std::vector<ExpertId>> fetch_sets;   // experts each node must fetch

  std::vector<NodeId> column_nodes() const {
    std::vector<NodeId> out(assignment.size(), -1);
    for (const auto& [node, col] : assignment) out.at(static_cast<std::size_t>(col)) = node;
    return out;
  }

  bool operator==(const NodeMapping&) const = default;
};

inline std::int64_t transfer_cost(const NodeMapping& m) {
  std::int64_t s = 0;
  for (const auto& [node, f] : m.fetch_sets) s += static_cast<std::int64_t>(f.size());
  return s;
}

inline std::int64_t transfer_cost(std::span<const NodeMapping> ms) {
  std::int64_t s = 0;
  for (const auto& m : ms) s += transfer_cost(m);
  return s;
}

namespace detail {

inline std::vector<NodeId> checked_live(const PlacementPlan& next, std::span<const NodeId> live) {
  std::vector<NodeId> nodes(live.begin(), live.end());
  std::sort(nodes.begin(), nodes.end());
  if (std::adjacent_find(nodes.begin(), nodes.end()) != nodes.end())
    throw ValidationError("migration: duplicate live node id");
  if (static_cast<int>(nodes.size()) != next.n_nodes())
    throw ValidationError("migration: " + std::to_string(nodes.size()) + " live nodes but the new plan has " +
                          std::to_string(next.n_nodes()) + " columns");
  return nodes;
}

// cost[a][j] = |column j experts \ experts node a already holds|
inline std::vector<std::vector<int>> fetch_cost_matrix(const LayerDeployment* old, const PlacementPlan& next,
                                                       const std::vector<NodeId>& nodes) {
  const auto cols = next.col_sets();
  std::vector<std::vector<int>> cost(nodes.size(), std::vector<int>(cols.size(), 0));
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    const ExpertSet have = old ? old->experts_on(nodes[a]) : ExpertSet(next.n_experts());
    for (std::size_t j = 0; j < cols.size(); ++j) cost[a][j] = cols[j].count_missing_from(have);
  }
  return cost;
}

inline NodeMapping mapping_from_assignment(const LayerDeployment* old, const PlacementPlan& next,
                                           const std::vector<NodeId>& nodes, const std::vector<int>& col_of) {
  NodeMapping m;
  for (std::size_t a = 0; a < nodes.size(); ++a) {
    const int j = col_of[a];
    m.assignment[nodes[a]] = j;
    const ExpertSet have = old ? old->experts_on(nodes[a]) : ExpertSet(next.n_experts());
    std::vector<ExpertId> fetch;
    for (auto e : next.col_set(j).elements())
      if (!have.contains(e)) fetch.push_back(e);
    m.fetch_sets[nodes[a]] = std::move(fetch);
  }
  return m;
}

inline void check_old(const LayerDeployment* old, const PlacementPlan& next) {
  if (!old) return;
  old->validate();
  if (old->plan.n_experts() != next.n_experts())
    throw ValidationError("migration: old plan has " + std::to_string(old->plan.n_experts()) + " experts, new plan " +
                          std::to_string(next.n_experts()));
}

}  // namespace detail

/// Pair-at-a-time greedy: repeatedly bind the cheapest free (node, column)
/// pair, ties on lower node id then lower column. `old` may be null (fresh start).
inline NodeMapping greedy_node_mapping(const LayerDeployment* old, const PlacementPlan& next, std::span<const NodeId> live) {
  detail::check_old(old, next);
  const auto nodes = detail::checked_live(next, live);
  const auto cost = detail::fetch_cost_matrix(old, next, nodes);
  const std::size_t n = nodes.size();
  std::vector<std::tuple<int, std::size_t, std::size_t>> pairs;
  pairs.reserve(n * n);
  for (std::size_t a = 0; a < n; ++a)
    for (std::size_t j = 0; j < n; ++j) pairs.emplace_back(cost[a][j], a, j);
  std::sort(pairs.begin(), pairs.end());
  std::vector<int> col_of(n, -1);
  std::vector<bool> col_used(n, false);
  std::size_t bound = 0;
  for (const auto& [c, a, j] : pairs) {
    if (col_of[a] >= 0 || col_used[j]) continue;
    col_of[a] = static_cast<int>(j);
    col_used[j] = true;
    if (++bound == n) break;
  }
  return detail::mapping_from_assignment(old, next, nodes, col_of);
}

inline NodeMapping greedy_node_mapping(const LayerDeployment& old, const PlacementPlan& next, std::span<const NodeId> live) {
  return greedy_node_mapping(&old, next, live);
}

/// k-th smallest live node takes column k.
inline NodeMapping identity_node_mapping(const LayerDeployment& old, const PlacementPlan& next, std::span<const NodeId> live) {
  detail::check_old(&old, next);
  const auto nodes = detail::checked_live(next, live);
  std::vector<int> col_of(nodes.size());
  std::iota(col_of.begin(), col_of.end(), 0);
  return detail::mapping_from_assignment(&old, next, nodes, col_of);
}

inline constexpr int kMaxBruteForceNodes = 9;

/// Minimum-cost bijection by trying every permutation (first minimum in
/// lexicographic order wins).
inline NodeMapping optimal_node_mapping(const LayerDeployment& old, const PlacementPlan& next, std::span<const NodeId> live) {
  detail::check_old(&old, next);
  const auto nodes = detail::checked_live(next, live);
  if (static_cast<int>(nodes.size()) > kMaxBruteForceNodes)
    throw ValidationError("optimal_node_mapping: " + std::to_string(nodes.size()) + " nodes exceeds brute-force cap of " +
                          std::to_string(kMaxBruteForceNodes));
  const auto cost = detail::fetch_cost_matrix(&old, next, nodes);
  std::vector<int> perm(nodes.size());
  std::iota(perm.begin(), perm.end(), 0);
  std::vector<int> best = perm;
  long best_cost = -1;
  do {
    long c = 0;
    for (std::size_t a = 0; a < perm.size(); ++a) c += cost[a][static_cast<std::size_t>(perm[a])];
    if (best_cost < 0 || c < best_cost) {
      best_cost = c;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return detail::mapping_from_assignment(&old, next, nodes, best);
}

inline LayerDeployment apply_mapping(const NodeMapping& m, const PlacementPlan& next) {
  LayerDeployment d{next, m.column_nodes()};
  d.validate();
  return d;
}

struct Transfer {
  int layer = 0;
  ExpertId expert = 0;
  NodeId source = 0;
  NodeId destination = 0;
  std::int64_t size_bytes = 0;

  bool operator==(const Transfer&) const = default;
};

struct TransferSchedule {
  std::vector<Transfer> transfers;
  std::map<NodeId, int> sends;  // per-source transfer count

  bool empty() const { return transfers.empty(); }
  std::int64_t total_bytes() const {
    std::int64_t s = 0;
    for (const auto& t : transfers) s += t.size_bytes;
    return s;
  }
  bool operator==(const TransferSchedule&) const = default;
};

/// Assigns a surviving owner to every fetch of every layer. Source choice:
/// fewest sends of that (layer, expert) so far, then fewest sends overall,
/// then lower node id. `old[l]` and `mappings[l]` describe layer l.
inline TransferSchedule plan_state_transfers(std::span<const LayerDeployment> old, std::span<const NodeMapping> mappings,
                                             std::span<const NodeId> live, std::int64_t state_bytes) {
  if (old.size() != mappings.size())
    throw ValidationError("plan_state_transfers: " + std::to_string(old.size()) + " layers but " +
                          std::to_string(mappings.size()) + " mappings");
  const std::set<NodeId> alive(live.begin(), live.end());
  TransferSchedule s;
  std::vector<std::pair<int, ExpertId>> orphans;
  for (std::size_t l = 0; l < old.size(); ++l) {
    const auto& dep = old[l];
    dep.validate();
    std::map<ExpertId, std::vector<NodeId>> owners;
    std::map<ExpertId, std::map<NodeId, int>> per_expert;
    for (const auto& [dst, fetch] : mappings[l].fetch_sets) {
      for (auto e : fetch) {
        auto it = owners.find(e);
        if (it == owners.end()) {
          std::vector<NodeId> o;
          for (auto node : dep.owners(e))
            if (alive.count(node)) o.push_back(node);
          it = owners.emplace(e, std::move(o)).first;
        }
        if (it->second.empty()) {
          const std::pair<int, ExpertId> key{dep.layer(), e};
          if (std::find(orphans.begin(), orphans.end(), key) == orphans.end()) orphans.push_back(key);
          continue;
        }
        auto& counts = per_expert[e];
        NodeId best = it->second.front();
        auto rank = [&](NodeId n) { return std::make_tuple(counts[n], s.sends[n], n); };
        for (auto n : it->second)
          if (rank(n) < rank(best)) best = n;
        ++counts[best];
        ++s.sends[best];
        s.transfers.push_back(Transfer{dep.layer(), e, best, dst, state_bytes});
      }
    }
  }
  if (!orphans.empty()) {
    std::sort(orphans.begin(), orphans.end());
    std::string msg = "no surviving owner for";
    for (const auto& [l, e] : orphans) msg += " (layer " + std::to_string(l) + ", expert " + std::to_string(e) + ")";
    throw UnrecoverableError(msg, orphans);
  }
  for (auto it = s.sends.begin(); it != s.sends.end();) it = it->second == 0 ? s.sends.erase(it) : std::next(it);
  return s;
}

inline TransferSchedule plan_state_transfers(const LayerDeployment& old, const NodeMapping& mapping,
                                             std::span<const NodeId> live, std::int64_t state_bytes) {
  return plan_state_transfers(std::span<const LayerDeployment>(&old, 1), std::span<const NodeMapping>(&mapping, 1), live,
                              state_bytes);
}

/// Outcome of a full reconfiguration over all layers.
struct Reconfiguration {
  std::vector<AllocationPlan> allocations;
  std::vector<LayerDeployment> deployments;
  std::vector<NodeMapping> mappings;
  TransferSchedule transfers;

  std::int64_t cost() const { return transfer_cost(std::span<const NodeMapping>(mappings)); }
};

/// Allocation, MRO placement and greedy mapping for every layer on the given
/// live nodes, followed by source selection. `layer_loads[l]` are the expert
/// totals for layer l; `current` is empty on a fresh start. Throws
/// UnrecoverableError when some needed state has no surviving owner.
inline Reconfiguration replan(std::span<const LayerDeployment> current, std::span<const NodeId> live,
                              const std::vector<std::vector<std::int64_t>>& layer_loads, const ClusterSpec& base,
                              std::int64_t state_bytes) {
  if (live.empty()) throw ValidationError("replan: no live nodes");
  if (!current.empty() && current.size() != layer_loads.size())
    throw ValidationError("replan: " + std::to_string(current.size()) + " current layers but " +
                          std::to_string(layer_loads.size()) + " load vectors");
  ClusterSpec spec = base;
  spec.n_nodes = static_cast<int>(live.size());
  spec.fault_threshold = std::min(spec.fault_threshold, spec.n_nodes);
  Reconfiguration out;
  for (std::size_t l = 0; l < layer_loads.size(); ++l) {
    auto alloc = allocate_replicas(layer_loads[l], spec);
    auto plan = build_mro_plan(alloc, spec, static_cast<int>(l));
    const LayerDeployment* old = current.empty() ? nullptr : &current[l];
    auto mapping = greedy_node_mapping(old, plan, live);
    out.deployments.push_back(apply_mapping(mapping, plan));
    out.allocations.push_back(std::move(alloc));
    out.mappings.push_back(std::move(mapping));
  }
  if (!current.empty()) out.transfers = plan_state_transfers(current, out.mappings, live, state_bytes);
  return out;
}

inline void to_json(nlohmann::json& j, const LayerDeployment& d) {
  j = nlohmann::json{{"plan", d.plan}, {"column_nodes", d.column_nodes}};
}
inline void from_json(const nlohmann::json& j, LayerDeployment& d) {
  try {
    d.plan = j.at("plan").get<PlacementPlan>();
    d.column_nodes = j.at("column_nodes").get<std::vector<NodeId>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("deployment: ") + e.what());
  }
  d.validate();
}

inline void to_json(nlohmann::json& j, const NodeMapping& m) {
  j = nlohmann::json::object();
  auto a = nlohmann::json::array();
  for (const auto& [node, col] : m.assignment) {
    const auto& f = m.fetch_sets.at(node);
    a.push_back({{"node", node}, {"column", col}, {"fetch", f}});
  }
  j["assignment"] = a;
  j["cost"] = transfer_cost(m);
}
inline void from_json(const nlohmann::json& j, NodeMapping& m) {
  m = NodeMapping{};
  try {
    for (const auto& x : j.at("assignment")) {
      const auto node = x.at("node").get<NodeId>();
      m.assignment[node] = x.at("column").get<int>();
      m.fetch_sets[node] = x.at("fetch").get<std::vector<ExpertId>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("node mapping: ") + e.what());
  }
}

inline void to_json(nlohmann::json& j, const Transfer& t) {
  j = nlohmann::json{{"layer", t.layer}, {"expert", t.expert}, {"src", t.source}, {"dst", t.destination}, {"bytes", t.size_bytes}};
}
inline void from_json(const nlohmann::json& j, Transfer& t) {
  try {
    t.layer = j.at("layer").get<int>();
    t.expert = j.at("expert").get<ExpertId>();
    t.source = j.at("src").get<NodeId>();
    t.destination = j.at("dst").get<NodeId>();
    t.size_bytes = j.at("bytes").get<std::int64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("transfer: ") + e.what());
  }
}

inline void to_json(nlohmann::json& j, const TransferSchedule& s) {
  auto sends = nlohmann::json::object();
  for (const auto& [n, c] : s.sends) sends[std::to_string(n)] = c;
  j = nlohmann::json{{"transfers", s.transfers}, {"sends", sends}};
}
inline void from_json(const nlohmann::json& j, TransferSchedule& s) {
  s = TransferSchedule{};
  try {
    s.transfers = j.at("transfers").get<std::vector<Transfer>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("transfer schedule: ") + e.what());
  }
  for (const auto& t : s.transfers) ++s.sends[t.source];
}

}  // namespace elasticep
