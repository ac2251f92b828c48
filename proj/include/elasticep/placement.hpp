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

// Maximum rank overlap (MRO) placement.
//
// Experts, taken in ascending replica order, are cut into consecutive groups of
// c. Group i gets its own block of nodes, sized by the replica count of the
// group's first (least replicated) expert, and every node of the block holds
// one replica of every expert of the group. The cluster then survives a
// failure pattern exactly when each block keeps at least one live node, which
// is the best any placement can do for a fixed replica vector.

#pragma once

#include <algorithm>
#include <functional>
#include <string>
#include <vector>

#include "elasticep/allocation.hpp"
#include "elasticep/core.hpp"
#include "elasticep/expert_set.hpp"

namespace elasticep {

class PlacementPlan {
 public:
  PlacementPlan() = default;

  /// `columns[j]` lists the experts in node j's slots.
  PlacementPlan(int n_experts, int slots_per_node, std::vector<std::vector<ExpertId>> columns, int layer = 0)
      : layer_(layer), n_experts_(n_experts), slots_per_node_(slots_per_node), columns_(std::move(columns)) {
    if (n_experts_ < 1) throw ValidationError("placement: need >= 1 expert");
    if (slots_per_node_ < 1) throw ValidationError("placement: need >= 1 slot per node");
    for (const auto& col : columns_) {
      if (static_cast<int>(col.size()) > slots_per_node_)
        throw ValidationError("placement: column exceeds slots_per_node");
      for (auto e : col)
        if (e < 0 || e >= n_experts_) throw ValidationError("placement: expert id out of range");
    }
  }

  int layer() const { return layer_; }
  void set_layer(int layer) { layer_ = layer; }
  int n_nodes() const { return static_cast<int>(columns_.size()); }
  int n_experts() const { return n_experts_; }
  int slots_per_node() const { return slots_per_node_; }

  const std::vector<std::vector<ExpertId>>& columns() const { return columns_; }
  const std::vector<ExpertId>& column(int node) const { return columns_.at(static_cast<std::size_t>(node)); }

  /// T_{slot,node}; -1 for a vacant slot.
  ExpertId at(int slot, int node) const {
    const auto& col = column(node);
    return slot < static_cast<int>(col.size()) ? col[static_cast<std::size_t>(slot)] : -1;
  }

  ExpertSet col_set(int node) const {
    ExpertSet s(n_experts_);
    for (auto e : column(node)) s.insert(e);
    return s;
  }

  std::vector<ExpertSet> col_sets() const {
    std::vector<ExpertSet> out;
    out.reserve(columns_.size());
    for (int j = 0; j < n_nodes(); ++j) out.push_back(col_set(j));
    return out;
  }

  std::vector<int> replica_counts() const {
    std::vector<int> r(static_cast<std::size_t>(n_experts_), 0);
    for (const auto& col : columns_)
      for (auto e : col) ++r[static_cast<std::size_t>(e)];
    return r;
  }

  /// c x N matrix, row = slot index, -1 marks vacancies.
  std::vector<std::vector<int>> slot_matrix() const {
    std::vector<std::vector<int>> m(static_cast<std::size_t>(slots_per_node_),
                                    std::vector<int>(columns_.size(), -1));
    for (int j = 0; j < n_nodes(); ++j)
      for (int i = 0; i < slots_per_node_; ++i) m[static_cast<std::size_t>(i)][static_cast<std::size_t>(j)] = at(i, j);
    return m;
  }

  bool operator==(const PlacementPlan&) const = default;

 private:
  int layer_ = 0;
  int n_experts_ = 0;
  int slots_per_node_ = 0;
  std::vector<std::vector<ExpertId>> columns_;
};

/// Consecutive expert groups (in sorted order) and the node block size of each.
struct MroGroups {
  std::vector<std::vector<ExpertId>> experts;
  std::vector<int> node_counts;
  std::vector<int> representative_replicas;

  // Last block smaller than its representative's replica count: leftovers then
  // double up on nodes that already hold the expert.
  bool last_block_clamped() const {
    return !node_counts.empty() && node_counts.back() < representative_replicas.back();
  }
};

inline MroGroups mro_groups(const AllocationPlan& alloc, int n_nodes, int slots_per_node) {
  const int n_experts = alloc.n_experts();
  if (static_cast<int>(alloc.sorted_order.size()) != n_experts)
    throw ValidationError("placement: sorted_order does not match replicas");
  const auto r = alloc.sorted_replicas();
  for (std::size_t k = 1; k < r.size(); ++k)
    if (r[k] < r[k - 1]) throw ValidationError("placement: replicas must be non-decreasing in sorted_order");

  MroGroups g;
  const int n_groups = (n_experts + slots_per_node - 1) / slots_per_node;
  int used = 0;
  for (int i = 0; i < n_groups; ++i) {
    const int first = i * slots_per_node;
    const int last = std::min(first + slots_per_node, n_experts);
    g.experts.emplace_back(alloc.sorted_order.begin() + first, alloc.sorted_order.begin() + last);
    const int rep = r[static_cast<std::size_t>(first)];
    const int size = (i + 1 < n_groups) ? rep : std::min(n_nodes - used, rep);
    g.node_counts.push_back(size);
    g.representative_replicas.push_back(rep);
    used += size;
  }
  return g;
}

inline PlacementPlan build_mro_plan(const AllocationPlan& alloc, const ClusterSpec& spec, int layer = 0) {
  spec.validate();
  const int n = spec.n_nodes;
  const int c = spec.slots_per_node;
  const int n_experts = alloc.n_experts();
  if (n_experts < 1) throw ValidationError("placement: empty allocation");
  if (alloc.total() != spec.total_slots())
    throw ValidationError("placement: replicas sum to " + std::to_string(alloc.total()) +
                          " but the cluster has " + std::to_string(spec.total_slots()) + " slots");
  for (int v : alloc.replicas)
    if (v < 1) throw ValidationError("placement: every expert needs >= 1 replica");

  const auto groups = mro_groups(alloc, n, c);
  std::vector<std::vector<ExpertId>> columns(static_cast<std::size_t>(n));
  std::vector<int> left = alloc.replicas;

  std::size_t node = 0;
  for (std::size_t i = 0; i < groups.experts.size(); ++i) {
    for (int k = 0; k < groups.node_counts[i]; ++k, ++node) {
      for (auto e : groups.experts[i]) {
        columns[node].push_back(e);
        --left[static_cast<std::size_t>(e)];
      }
    }
  }

  // Vacant slots, node by node: the expert with the most unplaced replicas,
  // lower id on ties.
  for (auto& col : columns) {
    while (static_cast<int>(col.size()) < c) {
      const auto it = std::max_element(left.begin(), left.end());
      col.push_back(static_cast<ExpertId>(it - left.begin()));
      --*it;
    }
  }
  return PlacementPlan(n_experts, c, std::move(columns), layer);
}

/// True when replica counts match `alloc` and the nodes can be partitioned
/// into MRO blocks, block i holding every expert of group i on each node.
inline bool verify_mro(const PlacementPlan& plan, const AllocationPlan& alloc) {
  if (plan.n_experts() != alloc.n_experts()) return false;
  if (plan.replica_counts() != alloc.replicas) return false;
  MroGroups groups;
  try {
    groups = mro_groups(alloc, plan.n_nodes(), plan.slots_per_node());
  } catch (const Error&) {
    return false;
  }

  const auto cols = plan.col_sets();
  std::vector<ExpertSet> needs;
  for (const auto& g : groups.experts) {
    ExpertSet s(plan.n_experts());
    for (auto e : g) s.insert(e);
    needs.push_back(std::move(s));
  }

  // Bipartite matching of block seats to nodes (Kuhn's augmenting paths).
  std::vector<int> seat_group;
  for (std::size_t i = 0; i < groups.node_counts.size(); ++i)
    for (int k = 0; k < groups.node_counts[i]; ++k) seat_group.push_back(static_cast<int>(i));
  if (static_cast<int>(seat_group.size()) > plan.n_nodes()) return false;

  std::vector<int> node_seat(static_cast<std::size_t>(plan.n_nodes()), -1);
  std::vector<char> seen;
  std::function<bool(int)> augment = [&](int seat) {
    const auto& need = needs[static_cast<std::size_t>(seat_group[static_cast<std::size_t>(seat)])];
    for (int j = 0; j < plan.n_nodes(); ++j) {
      if (seen[static_cast<std::size_t>(j)] || !cols[static_cast<std::size_t>(j)].includes(need)) continue;
      seen[static_cast<std::size_t>(j)] = 1;
      if (node_seat[static_cast<std::size_t>(j)] < 0 || augment(node_seat[static_cast<std::size_t>(j)])) {
        node_seat[static_cast<std::size_t>(j)] = seat;
        return true;
      }
    }
    return false;
  };
  for (int seat = 0; seat < static_cast<int>(seat_group.size()); ++seat) {
    seen.assign(static_cast<std::size_t>(plan.n_nodes()), 0);
    if (!augment(seat)) return false;
  }
  return true;
}

/// Number of distinct nodes holding expert `e`.
inline int distinct_node_span(const PlacementPlan& plan, ExpertId e) {
  if (e < 0 || e >= plan.n_experts()) throw ValidationError("unknown expert id " + std::to_string(e));
  int span = 0;
  for (const auto& col : plan.columns())
    if (std::find(col.begin(), col.end(), e) != col.end()) ++span;
  return span;
}

inline void to_json(nlohmann::json& j, const PlacementPlan& p) {
  j = {{"layer", p.layer()},
       {"n_experts", p.n_experts()},
       {"slots", p.slot_matrix()},
       {"replicas", p.replica_counts()}};
}

inline void from_json(const nlohmann::json& j, PlacementPlan& p) {
  const auto slots = j.at("slots").get<std::vector<std::vector<int>>>();
  if (slots.empty()) throw SchemaError("plan: empty slot matrix");
  const std::size_t n = slots.front().size();
  std::vector<std::vector<ExpertId>> columns(n);
  int max_id = -1;
  for (const auto& row : slots) {
    if (row.size() != n) throw SchemaError("plan: ragged slot matrix");
    for (std::size_t node = 0; node < n; ++node) {
      if (row[node] >= 0) columns[node].push_back(row[node]);
      max_id = std::max(max_id, row[node]);
    }
  }
  int n_experts = j.value("n_experts", 0);
  if (n_experts == 0 && j.contains("replicas")) n_experts = static_cast<int>(j.at("replicas").size());
  if (n_experts == 0) n_experts = max_id + 1;
  p = PlacementPlan(n_experts, static_cast<int>(slots.size()), std::move(columns), j.value("layer", 0));
  if (j.contains("replicas") && j.at("replicas").get<std::vector<int>>() != p.replica_counts())
    throw SchemaError("plan: replicas do not match slot contents");
}

}  // namespace elasticep
