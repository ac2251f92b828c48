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

// Load-proportional replica allocation with a per-expert fault floor.
//
// Experts are visited in ascending load order. Each one takes its share of the
// slots still unassigned, proportional to its share of the load still
// unassigned, rounded down and clamped from below by the fault floor. The most
// loaded expert ends up with whatever is left.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <vector>

#include "elasticep/core.hpp"

namespace elasticep {

struct AllocationPlan {
  /// r_e indexed by original expert id.
  std::vector<int> replicas;
  /// sorted_order[k] is the expert with the k-th smallest load.
  std::vector<ExpertId> sorted_order;
  int f_used = 1;

  int n_experts() const { return static_cast<int>(replicas.size()); }
  long total() const { return std::accumulate(replicas.begin(), replicas.end(), 0L); }

  /// Replica counts listed in sorted_order.
  std::vector<int> sorted_replicas() const {
    std::vector<int> out;
    out.reserve(sorted_order.size());
    for (auto e : sorted_order) out.push_back(replicas[static_cast<std::size_t>(e)]);
    return out;
  }

  /// Wraps an explicit replica vector. Experts are ordered by (r, id), and
  /// f_used is the smallest count.
  static AllocationPlan from_replicas(std::vector<int> r) {
    if (r.empty()) throw ValidationError("allocation: need >= 1 expert");
    for (int v : r)
      if (v < 1) throw ValidationError("allocation: every expert needs >= 1 replica");
    AllocationPlan p;
    p.sorted_order.resize(r.size());
    std::iota(p.sorted_order.begin(), p.sorted_order.end(), 0);
    std::stable_sort(p.sorted_order.begin(), p.sorted_order.end(),
                     [&](int a, int b) { return r[static_cast<std::size_t>(a)] < r[static_cast<std::size_t>(b)]; });
    p.f_used = *std::min_element(r.begin(), r.end());
    p.replicas = std::move(r);
    return p;
  }

  bool operator==(const AllocationPlan&) const = default;
};

inline AllocationPlan allocate_replicas(std::span<const std::int64_t> loads, const ClusterSpec& spec) {
  const int n_experts = static_cast<int>(loads.size());
  const int f = validate_cluster_spec(spec, n_experts);

  std::vector<std::int64_t> t(loads.begin(), loads.end());
  for (auto v : t)
    if (v < 0) throw ValidationError("allocation: negative load");
  if (std::all_of(t.begin(), t.end(), [](auto v) { return v == 0; })) std::fill(t.begin(), t.end(), 1);

  AllocationPlan plan;
  plan.f_used = f;
  plan.replicas.assign(t.size(), 0);
  plan.sorted_order.resize(t.size());
  std::iota(plan.sorted_order.begin(), plan.sorted_order.end(), 0);
  std::stable_sort(plan.sorted_order.begin(), plan.sorted_order.end(),
                   [&](int a, int b) { return t[static_cast<std::size_t>(a)] < t[static_cast<std::size_t>(b)]; });

  __int128 load_left = 0;
  for (auto v : t) load_left += v;
  long slots_left = spec.total_slots();
  for (std::size_t k = 0; k < plan.sorted_order.size(); ++k) {
    const auto e = static_cast<std::size_t>(plan.sorted_order[k]);
    long r;
    if (k + 1 == plan.sorted_order.size()) {
      r = slots_left;
    } else {
      // load_left > 0 here: it contains the last (largest, non-zero) load.
      const __int128 share = static_cast<__int128>(t[e]) * slots_left / load_left;
      r = std::max<long>(static_cast<long>(share), f);
    }
    plan.replicas[e] = static_cast<int>(r);
    slots_left -= r;
    load_left -= t[e];
  }
  return plan;
}

/// max_e | r_e / sum(r) - t_e / sum(t) |; zero when there is no load.
inline double allocation_skew(const AllocationPlan& plan, std::span<const std::int64_t> loads) {
  if (loads.size() != plan.replicas.size()) throw ValidationError("allocation_skew: size mismatch");
  const double rsum = static_cast<double>(plan.total());
  double tsum = 0.0;
  for (auto v : loads) tsum += static_cast<double>(v);
  if (tsum == 0.0 || rsum == 0.0) return 0.0;
  double gap = 0.0;
  for (std::size_t e = 0; e < loads.size(); ++e)
    gap = std::max(gap, std::abs(plan.replicas[e] / rsum - static_cast<double>(loads[e]) / tsum));
  return gap;
}

inline void to_json(nlohmann::json& j, const AllocationPlan& p) {
  j = {{"replicas", p.replicas}, {"sorted_order", p.sorted_order}, {"f_used", p.f_used}};
}

inline void from_json(const nlohmann::json& j, AllocationPlan& p) {
  j.at("replicas").get_to(p.replicas);
  if (j.contains("sorted_order")) {
    j.at("sorted_order").get_to(p.sorted_order);
    p.f_used = j.value("f_used", 1);
  } else {
    p = AllocationPlan::from_replicas(p.replicas);
  }
}

}  // namespace elasticep
