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

// Recovery probability of a placement under uniformly random node failures:
// exact enumeration, the closed form for MRO plans, Monte Carlo, and a
// brute-force search over all placements for small clusters. Also the spread
// and compact baseline placements used for comparison.

#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <functional>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "elasticep/allocation.hpp"
#include "elasticep/combinatorics.hpp"
#include "elasticep/core.hpp"
#include "elasticep/placement.hpp"

namespace elasticep {

/// Raised when exact enumeration would exceed the configured cap.
class EnumerationCapError : public Error {
 public:
  using Error::Error;
};

inline constexpr long kDefaultEnumerationCap = 1'000'000;

/// True iff the union of the alive nodes' expert sets covers every expert.
inline bool is_recoverable(const PlacementPlan& plan, std::span<const NodeId> alive) {
  ExpertSet covered(plan.n_experts());
  for (auto j : alive) {
    if (j < 0 || j >= plan.n_nodes()) throw ValidationError("alive node " + std::to_string(j) + " out of range");
    for (auto e : plan.column(j)) covered.insert(e);
  }
  return covered.full();
}

/// Fraction of the C(N, N-k) alive sets that recover, by full enumeration.
inline Probability recovery_probability_exact(const PlacementPlan& plan, int k_failed,
                                              long enumeration_cap = kDefaultEnumerationCap) {
  const int n = plan.n_nodes();
  if (k_failed < 0 || k_failed > n) throw ValidationError("k_failed must be in [0, N]");
  const BigInt total = binomial(n, n - k_failed);
  if (total > enumeration_cap)
    throw EnumerationCapError("C(" + std::to_string(n) + ", " + std::to_string(k_failed) + ") = " +
                              total.str() + " exceeds the enumeration cap; use Monte Carlo");
  const auto cols = plan.col_sets();
  long hits = 0;
  for_each_combination(n, n - k_failed, [&](const std::vector<int>& alive) {
    ExpertSet covered(plan.n_experts());
    for (auto j : alive) covered |= cols[static_cast<std::size_t>(j)];
    if (covered.full()) ++hits;
    return true;
  });
  return Probability(BigInt(hits), total);
}

/// Lengths of the covering segments for an MRO plan: one per expert group.
inline std::vector<int> mro_segment_lengths(const AllocationPlan& alloc, int n_nodes, int slots_per_node) {
  return mro_groups(alloc, n_nodes, slots_per_node).node_counts;
}

/// Probability that R uniformly chosen live nodes hit every MRO segment, by
/// inclusion-exclusion over the segments. Terms sharing the same missed
/// length are folded together, so the cost is O(groups * N).
inline Probability recovery_probability_closed_form(const AllocationPlan& alloc, const ClusterSpec& spec,
                                                    int alive) {
  const int n = spec.n_nodes;
  if (alive < 0 || alive > n) throw ValidationError("alive count must be in [0, N]");
  const auto lengths = mro_segment_lengths(alloc, n, spec.slots_per_node);

  // coef[s] = sum over segment subsets S with total length s of (-1)^|S|
  std::vector<BigInt> coef(static_cast<std::size_t>(n) + 1, 0);
  coef[0] = 1;
  int reach = 0;
  for (int len : lengths) {
    for (int s = std::min(reach, n - len); s >= 0; --s)
      coef[static_cast<std::size_t>(s + len)] -= coef[static_cast<std::size_t>(s)];
    reach = std::min(n, reach + len);
  }
  BigInt num = 0;
  for (int s = 0; s <= n; ++s)
    if (coef[static_cast<std::size_t>(s)] != 0) num += coef[static_cast<std::size_t>(s)] * binomial(n - s, alive);
  return Probability(num, binomial(n, alive));
}

struct MonteCarloEstimate {
  double estimate = 0.0;
  double std_error = 0.0;
  long hits = 0;
  long samples = 0;
  std::uint64_t seed = 0;
  std::string prng = "mt19937_64";

  Probability as_probability() const { return Probability(BigInt(hits), BigInt(samples)); }
};

/// Samples k failed nodes uniformly (partial Fisher-Yates per sample).
inline MonteCarloEstimate recovery_probability_mc(const PlacementPlan& plan, int k_failed, long n_samples,
                                                  std::uint64_t seed) {
  const int n = plan.n_nodes();
  if (k_failed < 0 || k_failed > n) throw ValidationError("k_failed must be in [0, N]");
  if (n_samples < 1) throw ValidationError("n_samples must be >= 1");
  const auto cols = plan.col_sets();
  std::mt19937_64 rng(seed);
  std::vector<int> perm(static_cast<std::size_t>(n));
  MonteCarloEstimate out;
  out.seed = seed;
  out.samples = n_samples;
  for (long s = 0; s < n_samples; ++s) {
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = 0; i < k_failed; ++i) {
      std::uniform_int_distribution<int> pick(i, n - 1);
      std::swap(perm[static_cast<std::size_t>(i)], perm[static_cast<std::size_t>(pick(rng))]);
    }
    ExpertSet covered(plan.n_experts());
    for (int i = k_failed; i < n; ++i) covered |= cols[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
    if (covered.full()) ++out.hits;
  }
  const double p = static_cast<double>(out.hits) / static_cast<double>(n_samples);
  out.estimate = p;
  out.std_error = std::sqrt(p * (1.0 - p) / static_cast<double>(n_samples));
  return out;
}

struct BruteForceCaps {
  int max_nodes = 5;
  int max_slots = 2;
  int max_experts = 4;
};

namespace detail {

// Every placement consistent with `r`, up to column permutation. Columns are
// multisets of experts encoded as bitmasks of the distinct experts they hold.
template <typename Fn>
void for_each_placement(std::span<const int> r, int n_nodes, int slots, Fn&& fn) {
  const int n_experts = static_cast<int>(r.size());
  struct Column {
    std::vector<int> counts;
    std::uint32_t mask;
  };
  std::vector<Column> kinds;
  std::vector<int> counts(static_cast<std::size_t>(n_experts), 0);
  std::function<void(int, int)> gen = [&](int from, int left) {
    if (left == 0) {
      std::uint32_t mask = 0;
      for (int e = 0; e < n_experts; ++e)
        if (counts[static_cast<std::size_t>(e)] > 0) mask |= 1u << e;
      kinds.push_back({counts, mask});
      return;
    }
    for (int e = from; e < n_experts; ++e) {
      ++counts[static_cast<std::size_t>(e)];
      gen(e, left - 1);
      --counts[static_cast<std::size_t>(e)];
    }
  };
  gen(0, slots);

  std::vector<int> left(r.begin(), r.end());
  std::vector<std::uint32_t> chosen;
  std::function<void(std::size_t)> pick = [&](std::size_t from) {
    if (static_cast<int>(chosen.size()) == n_nodes) {
      if (std::all_of(left.begin(), left.end(), [](int v) { return v == 0; })) fn(chosen);
      return;
    }
    for (std::size_t k = from; k < kinds.size(); ++k) {
      const auto& kind = kinds[k];
      bool fits = true;
      for (int e = 0; e < n_experts; ++e)
        if (kind.counts[static_cast<std::size_t>(e)] > left[static_cast<std::size_t>(e)]) fits = false;
      if (!fits) continue;
      for (int e = 0; e < n_experts; ++e) left[static_cast<std::size_t>(e)] -= kind.counts[static_cast<std::size_t>(e)];
      chosen.push_back(kind.mask);
      pick(k);
      chosen.pop_back();
      for (int e = 0; e < n_experts; ++e) left[static_cast<std::size_t>(e)] += kind.counts[static_cast<std::size_t>(e)];
    }
  };
  pick(0);
}

inline long count_covering_subsets(std::span<const std::uint32_t> cols, int alive, std::uint32_t full) {
  const int n = static_cast<int>(cols.size());
  long hits = 0;
  for (std::uint32_t s = 0; s < (1u << n); ++s) {
    if (std::popcount(s) != alive) continue;
    std::uint32_t u = 0;
    for (int j = 0; j < n; ++j)
      if (s & (1u << j)) u |= cols[static_cast<std::size_t>(j)];
    if (u == full) ++hits;
  }
  return hits;
}

}  // namespace detail

/// Best recovery probability over every placement consistent with the replica
/// vector, for each alive count R = 0..N (index = R).
inline std::vector<Probability> brute_force_optimal_profile(const AllocationPlan& alloc, const ClusterSpec& spec,
                                                            BruteForceCaps caps = {}) {
  const int n = spec.n_nodes, c = spec.slots_per_node, n_experts = alloc.n_experts();
  if (n > caps.max_nodes || c > caps.max_slots || n_experts > caps.max_experts)
    throw EnumerationCapError("brute-force placement search is limited to N <= " + std::to_string(caps.max_nodes) +
                              ", c <= " + std::to_string(caps.max_slots) + ", E <= " +
                              std::to_string(caps.max_experts));
  if (n > 20 || n_experts > 31) throw EnumerationCapError("brute-force caps exceed the bitmask encoding");
  if (alloc.total() != spec.total_slots()) throw ValidationError("replicas must fill every slot");

  const std::uint32_t full = (n_experts == 32) ? ~0u : ((1u << n_experts) - 1u);
  std::vector<long> best(static_cast<std::size_t>(n) + 1, 0);
  bool any = false;
  detail::for_each_placement(alloc.replicas, n, c, [&](const std::vector<std::uint32_t>& cols) {
    any = true;
    for (int alive = 0; alive <= n; ++alive)
      best[static_cast<std::size_t>(alive)] =
          std::max(best[static_cast<std::size_t>(alive)], detail::count_covering_subsets(cols, alive, full));
  });
  if (!any) throw ValidationError("no placement is consistent with the replica vector");
  std::vector<Probability> out;
  for (int alive = 0; alive <= n; ++alive) out.emplace_back(BigInt(best[static_cast<std::size_t>(alive)]), binomial(n, alive));
  return out;
}

inline Probability brute_force_optimal_probability(const AllocationPlan& alloc, const ClusterSpec& spec, int alive,
                                                   BruteForceCaps caps = {}) {
  if (alive < 0 || alive > spec.n_nodes) throw ValidationError("alive count must be in [0, N]");
  return brute_force_optimal_profile(alloc, spec, caps)[static_cast<std::size_t>(alive)];
}

enum class BaselineStrategy { spread, compact };

inline PlacementPlan baseline_placement(BaselineStrategy strategy, const AllocationPlan& alloc,
                                        const ClusterSpec& spec, int layer = 0) {
  spec.validate();
  const int n = spec.n_nodes, c = spec.slots_per_node, n_experts = alloc.n_experts();
  if (alloc.total() != spec.total_slots()) throw ValidationError("baseline placement needs sum(r) = N*c");
  std::vector<std::vector<ExpertId>> columns(static_cast<std::size_t>(n));
  auto vacant = [&](int j) { return c - static_cast<int>(columns[static_cast<std::size_t>(j)].size()); };

  if (strategy == BaselineStrategy::spread) {
    // Most replicated first, one replica per node, a single round-robin cursor.
    std::vector<int> order(static_cast<std::size_t>(n_experts));
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return alloc.replicas[static_cast<std::size_t>(a)] > alloc.replicas[static_cast<std::size_t>(b)];
    });
    int cursor = 0;
    for (auto e : order) {
      for (int k = 0; k < alloc.replicas[static_cast<std::size_t>(e)]; ++k) {
        while (vacant(cursor) == 0) cursor = (cursor + 1) % n;
        columns[static_cast<std::size_t>(cursor)].push_back(e);
        cursor = (cursor + 1) % n;
      }
    }
  } else {
    // Expert id order; each chunk goes to the emptiest node (lower id on ties).
    for (int e = 0; e < n_experts; ++e) {
      int left = alloc.replicas[static_cast<std::size_t>(e)];
      while (left > 0) {
        int best = 0;
        for (int j = 1; j < n; ++j)
          if (vacant(j) > vacant(best)) best = j;
        const int take = std::min(left, vacant(best));
        columns[static_cast<std::size_t>(best)].insert(columns[static_cast<std::size_t>(best)].end(),
                                                       static_cast<std::size_t>(take), e);
        left -= take;
      }
    }
  }
  return PlacementPlan(n_experts, c, std::move(columns), layer);
}

inline std::string to_string(BaselineStrategy s) { return s == BaselineStrategy::spread ? "spread" : "compact"; }

}  // namespace elasticep
