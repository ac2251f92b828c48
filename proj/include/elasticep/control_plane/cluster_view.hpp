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

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"

#include "elasticep/control_plane/net.hpp"
#include "elasticep/core.hpp"

namespace elasticep::cp {

enum class NodeStatus { live, suspect, dead };

inline const char* to_string(NodeStatus s) {
  switch (s) {
    case NodeStatus::live: return "live";
    case NodeStatus::suspect: return "suspect";
    case NodeStatus::dead: return "dead";
  }
  return "?";
}

/// Silent for more than half the timeout is suspect; past the timeout, dead.
inline NodeStatus classify(double last_heartbeat, double now, double timeout_s) {
  const double age = now - last_heartbeat;
  if (age > timeout_s) return NodeStatus::dead;
  if (age > timeout_s / 2) return NodeStatus::suspect;
  return NodeStatus::live;
}

struct NodeRecord {
  double last_heartbeat = 0.0;
  NodeStatus status = NodeStatus::live;
  bool deregistered = false;
  net::Endpoint fetch_endpoint;
  // what the agent last told us about itself
  std::uint64_t applied_version = 0;
  std::map<int, std::vector<ExpertId>> inventory;
  bool checksums_ok = true;
  std::vector<std::string> fetch_failures;
};

struct ClusterView {
  std::map<NodeId, NodeRecord> nodes;
  std::vector<std::uint64_t> plan_versions;  // per layer
  std::map<NodeId, double> pending_joins;    // node -> arrival time

  bool alive(NodeId n) const {
    auto it = nodes.find(n);
    return it != nodes.end() && it->second.status != NodeStatus::dead;
  }

  /// Nodes not dead, pending joiners included.
  std::vector<NodeId> live_nodes() const {
    std::vector<NodeId> out;
    for (const auto& [id, r] : nodes)
      if (r.status != NodeStatus::dead) out.push_back(id);
    return out;
  }

  /// Returns true if this is a new (or returning) member.
  bool register_node(NodeId n, double now, const net::Endpoint& fetch) {
    auto it = nodes.find(n);
    const bool fresh = it == nodes.end() || it->second.status == NodeStatus::dead;
    auto& r = nodes[n];
    r = NodeRecord{};
    r.last_heartbeat = now;
    r.fetch_endpoint = fetch;
    return fresh;
  }

  void heartbeat(NodeId n, double now) {
    auto it = nodes.find(n);
    if (it == nodes.end() || it->second.status == NodeStatus::dead) return;
    it->second.last_heartbeat = std::max(it->second.last_heartbeat, now);
    it->second.status = NodeStatus::live;
  }

  void deregister(NodeId n) {
    auto it = nodes.find(n);
    if (it == nodes.end()) return;
    it->second.deregistered = true;
    it->second.status = NodeStatus::dead;
    pending_joins.erase(n);
  }
};

/// Reclassifies every node from its heartbeat age and returns those that
/// became dead in this call. Dead is sticky until the node registers again.
inline std::set<NodeId> detect_failures(ClusterView& view, double now, double timeout_s) {
  if (!(timeout_s > 0)) throw ValidationError("detect_failures: timeout must be positive");
  std::set<NodeId> failed;
  for (auto& [id, r] : view.nodes) {
    if (r.status == NodeStatus::dead) continue;
    r.status = classify(r.last_heartbeat, now, timeout_s);
    if (r.status == NodeStatus::dead) {
      failed.insert(id);
      view.pending_joins.erase(id);
    }
  }
  return failed;
}

inline nlohmann::json view_to_json(const ClusterView& v) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& [id, r] : v.nodes) {
    nlohmann::json inv = nlohmann::json::object();
    for (const auto& [l, es] : r.inventory) inv[std::to_string(l)] = es;
    nodes.push_back({{"node", id}, {"status", to_string(r.status)}, {"last_heartbeat", r.last_heartbeat},
                     {"fetch", r.fetch_endpoint.str()}, {"applied_version", r.applied_version},
                     {"inventory", inv}, {"checksums_ok", r.checksums_ok}});
  }
  nlohmann::json pending = nlohmann::json::array();
  for (const auto& [id, t] : v.pending_joins) pending.push_back({{"node", id}, {"arrival", t}});
  return {{"nodes", nodes}, {"plan_versions", v.plan_versions}, {"pending_joins", pending}};
}

}  // namespace elasticep::cp
