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
#include <cmath>
#include <cstdint>
#include <random>
#include <set>
#include <vector>

#include "elasticep/core.hpp"

namespace elasticep {

/// One expert gets rho times the uniform share total/E; the rest is split
/// evenly (largest remainder, lower id first).
inline std::vector<std::int64_t> skewed_counts(int n_experts, double rho, std::int64_t total, int top = 0) {
  if (n_experts < 1) throw ValidationError("skew: need >= 1 expert");
  if (!(rho >= 1.0)) throw ValidationError("skew: rho must be >= 1");
  if (rho > n_experts) throw ValidationError("skew: rho cannot exceed the expert count");
  if (total < 0) throw ValidationError("skew: negative token total");
  if (top < 0 || top >= n_experts) throw ValidationError("skew: top expert out of range");
  std::vector<std::int64_t> out(static_cast<std::size_t>(n_experts), 0);
  if (n_experts == 1) {
    out[0] = total;
    return out;
  }
  const auto hot = static_cast<std::int64_t>(std::llround(rho * static_cast<double>(total) / n_experts));
  out[static_cast<std::size_t>(top)] = hot;
  std::vector<std::int64_t> w(static_cast<std::size_t>(n_experts - 1), 1);
  const auto rest = apportion(total - hot, w);
  for (int e = 0, k = 0; e < n_experts; ++e)
    if (e != top) out[static_cast<std::size_t>(e)] = rest[static_cast<std::size_t>(k++)];
  return out;
}

/// Constant skewed load per layer; the hot expert of each layer is drawn from `seed`.
inline LoadTrace skew_sweep_trace(int n_experts, int n_layers, int steps, double rho, std::int64_t total,
                                  std::uint64_t seed) {
  if (n_layers < 1 || steps < 1) throw ValidationError("skew trace: layers and steps must be >= 1");
  std::mt19937_64 rng(seed);
  LoadTrace trace;
  trace.n_experts = n_experts;
  std::vector<std::vector<std::int64_t>> per_layer;
  for (int l = 0; l < n_layers; ++l) {
    const int top = std::uniform_int_distribution<int>(0, n_experts - 1)(rng);
    per_layer.push_back(skewed_counts(n_experts, rho, total, top));
  }
  for (int s = 0; s < steps; ++s)
    for (int l = 0; l < n_layers; ++l) trace.records.push_back(LoadRecord{s, l, per_layer[static_cast<std::size_t>(l)], {}});
  return trace;
}

/// Starts with nodes 0..n-1, then removes the highest live id every
/// `interval_s` seconds until `n_final` remain.
inline AvailabilityTrace step_down_trace(int n_initial, int n_final, double first_s, double interval_s) {
  if (n_initial < 1 || n_final < 0 || n_final > n_initial) throw ValidationError("step-down trace: bad node counts");
  AvailabilityTrace tr;
  AvailabilityEvent start{0.0, AvailabilityKind::add, {}};
  for (int j = 0; j < n_initial; ++j) start.nodes.push_back(j);
  tr.events.push_back(start);
  for (int j = n_initial - 1, k = 0; j >= n_final; --j, ++k)
    tr.events.push_back(AvailabilityEvent{first_s + k * interval_s, AvailabilityKind::remove, {j}});
  return tr;
}

struct SpotParams {
  int initial_nodes = 8;
  int min_nodes = 2;
  int max_nodes = 12;
  double duration_s = 4800.0;
  double mean_interval_s = 300.0;
};

/// Preemptions and arrivals with exponential gaps. Removals pick a random
/// live node; arrivals get fresh ids.
inline AvailabilityTrace synthetic_spot_trace(const SpotParams& p, std::uint64_t seed) {
  if (p.initial_nodes < 1 || p.min_nodes < 0 || p.min_nodes > p.initial_nodes || p.max_nodes < p.initial_nodes)
    throw ValidationError("spot trace: need 0 <= min_nodes <= initial_nodes <= max_nodes and initial_nodes >= 1");
  if (!(p.duration_s > 0.0) || !(p.mean_interval_s > 0.0)) throw ValidationError("spot trace: durations must be positive");
  std::mt19937_64 rng(seed);
  std::exponential_distribution<double> gap(1.0 / p.mean_interval_s);
  std::uniform_int_distribution<int> coin(0, 1);
  AvailabilityTrace tr;
  std::set<NodeId> live;
  AvailabilityEvent start{0.0, AvailabilityKind::add, {}};
  for (int j = 0; j < p.initial_nodes; ++j) {
    start.nodes.push_back(j);
    live.insert(j);
  }
  tr.events.push_back(start);
  NodeId next_id = p.initial_nodes;
  double t = 0.0;
  for (;;) {
    t += gap(rng);
    const double when = std::round(t * 1000.0) / 1000.0;
    if (when >= p.duration_s) break;
    const bool remove = coin(rng) == 1;
    if (remove && static_cast<int>(live.size()) > p.min_nodes) {
      auto it = live.begin();
      std::advance(it, std::uniform_int_distribution<int>(0, static_cast<int>(live.size()) - 1)(rng));
      tr.events.push_back(AvailabilityEvent{when, AvailabilityKind::remove, {*it}});
      live.erase(it);
    } else if (!remove && static_cast<int>(live.size()) < p.max_nodes) {
      tr.events.push_back(AvailabilityEvent{when, AvailabilityKind::add, {next_id}});
      live.insert(next_id++);
    }
  }
  validate_availability_trace(tr);
  return tr;
}

}  // namespace elasticep
