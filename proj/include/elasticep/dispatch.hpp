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
#include <span>
#include <string>
#include <vector>

#include "elasticep/core.hpp"
#include "elasticep/placement.hpp"

namespace elasticep {

class UnroutableTokensError : public Error {
 public:
  using Error::Error;
};

class ConsistencyViolation : public Error {
 public:
  using Error::Error;
};

/// R_{e,j}: replicas of expert e hosted on rank j.
struct ReplicaMatrix {
  std::vector<std::vector<int>> counts;  // [expert][rank]

  int n_experts() const { return static_cast<int>(counts.size()); }
  int n_ranks() const { return counts.empty() ? 0 : static_cast<int>(counts.front().size()); }
  int at(int e, int j) const { return counts[static_cast<std::size_t>(e)][static_cast<std::size_t>(j)]; }

  int replicas(int e) const {
    int s = 0;
    for (int v : counts.at(static_cast<std::size_t>(e))) s += v;
    return s;
  }

  void validate() const {
    for (const auto& row : counts) {
      if (static_cast<int>(row.size()) != n_ranks()) throw ValidationError("ReplicaMatrix: ragged rows");
      for (int v : row)
        if (v < 0) throw ValidationError("ReplicaMatrix: negative replica count");
    }
  }

  bool operator==(const ReplicaMatrix&) const = default;
};

inline ReplicaMatrix replica_matrix_from_plan(const PlacementPlan& plan) {
  ReplicaMatrix r;
  r.counts.assign(static_cast<std::size_t>(plan.n_experts()),
                  std::vector<int>(static_cast<std::size_t>(plan.n_nodes()), 0));
  for (int j = 0; j < plan.n_nodes(); ++j)
    for (auto e : plan.column(j)) ++r.counts[static_cast<std::size_t>(e)][static_cast<std::size_t>(j)];
  return r;
}

/// All-gather of per-rank expert counts into T[e][j].
inline ExpertLoads gather_load_matrix(const std::vector<std::vector<std::int64_t>>& reports) {
  if (reports.empty()) throw ValidationError("gather_load_matrix: no ranks");
  const std::size_t e_count = reports.front().size();
  if (e_count == 0) throw ValidationError("gather_load_matrix: empty report");
  std::vector<std::vector<std::int64_t>> t(e_count, std::vector<std::int64_t>(reports.size(), 0));
  for (std::size_t j = 0; j < reports.size(); ++j) {
    if (reports[j].size() != e_count)
      throw ValidationError("gather_load_matrix: rank " + std::to_string(j) + " reported " +
                            std::to_string(reports[j].size()) + " experts, expected " + std::to_string(e_count));
    for (std::size_t e = 0; e < e_count; ++e) t[e][j] = reports[j][e];
  }
  return ExpertLoads(std::move(t));
}

struct DispatchSchedule {
  int rank = 0;
  std::vector<std::vector<std::int64_t>> send;  // D[e][j], D[e][rank] is the locally kept part
  std::vector<std::int64_t> send_sizes;         // s_j
  std::vector<std::int64_t> recv_sizes;         // tokens arriving from each rank
  std::vector<std::int64_t> quota;              // q_e
  std::vector<std::size_t> shuffle_index;       // token k -> position in send buffer; empty until built

  int n_experts() const { return static_cast<int>(send.size()); }
  int n_ranks() const { return static_cast<int>(send_sizes.size()); }

  std::int64_t local_tokens() const {
    std::int64_t s = 0;
    for (auto v : send_sizes) s += v;
    return s;
  }

  bool operator==(const DispatchSchedule&) const = default;
};

namespace detail {

inline void check_dispatch_inputs(const ExpertLoads& t, const ReplicaMatrix& r) {
  r.validate();
  if (t.n_experts() != r.n_experts() || t.n_ranks() != r.n_ranks())
    throw ValidationError("dispatch: load matrix is " + std::to_string(t.n_experts()) + "x" +
                          std::to_string(t.n_ranks()) + " but replica matrix is " +
                          std::to_string(r.n_experts()) + "x" + std::to_string(r.n_ranks()));
}

inline std::vector<std::int64_t> quotas(const ExpertLoads& t, const ReplicaMatrix& r) {
  std::vector<std::int64_t> q(static_cast<std::size_t>(t.n_experts()), 0);
  for (int e = 0; e < t.n_experts(); ++e) {
    const std::int64_t total = t.totals()[static_cast<std::size_t>(e)];
    const int reps = r.replicas(e);
    if (total > 0 && reps == 0)
      throw UnroutableTokensError("dispatch: expert " + std::to_string(e) + " has " + std::to_string(total) +
                                  " tokens but no replica");
    q[static_cast<std::size_t>(e)] = reps == 0 ? 0 : (total + reps - 1) / reps;
  }
  return q;
}

// D[e][j] for sender i.
inline std::vector<std::vector<std::int64_t>> send_matrix(int i, const ExpertLoads& t, const ReplicaMatrix& r,
                                                          const std::vector<std::int64_t>& q) {
  const int n = t.n_ranks();
  std::vector<std::vector<std::int64_t>> d(static_cast<std::size_t>(t.n_experts()),
                                           std::vector<std::int64_t>(static_cast<std::size_t>(n), 0));
  std::vector<std::int64_t> residual(static_cast<std::size_t>(n));
  for (int e = 0; e < t.n_experts(); ++e) {
    const auto qe = q[static_cast<std::size_t>(e)];
    auto& row = d[static_cast<std::size_t>(e)];
    const std::int64_t mine = t.at(e, i);
    const std::int64_t kept = std::min(mine, qe * r.at(e, i));
    row[static_cast<std::size_t>(i)] = kept;
    const std::int64_t overflow = mine - kept;
    if (overflow == 0) continue;

    std::int64_t avail = 0;
    for (int j = 0; j < n; ++j) {
      const std::int64_t cap = qe * r.at(e, j);
      residual[static_cast<std::size_t>(j)] = j == i ? 0 : cap - std::min(cap, t.at(e, j));
      avail += residual[static_cast<std::size_t>(j)];
    }
    if (avail < overflow)
      throw ConsistencyViolation("dispatch: residual capacity " + std::to_string(avail) + " < overflow " +
                                 std::to_string(overflow) + " for expert " + std::to_string(e));
    const auto share = apportion(overflow, residual);
    for (int j = 0; j < n; ++j)
      if (j != i) row[static_cast<std::size_t>(j)] = share[static_cast<std::size_t>(j)];
  }
  return d;
}

inline std::vector<std::int64_t> column_sums(const std::vector<std::vector<std::int64_t>>& d, int n) {
  std::vector<std::int64_t> s(static_cast<std::size_t>(n), 0);
  for (const auto& row : d)
    for (int j = 0; j < n; ++j) s[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)];
  return s;
}

}  // namespace detail

/// Dispatch schedules of every rank; send matrices are computed once.
inline std::vector<DispatchSchedule> compute_all_schedules(const ExpertLoads& t, const ReplicaMatrix& r) {
  detail::check_dispatch_inputs(t, r);
  const int n = t.n_ranks();
  const auto q = detail::quotas(t, r);
  std::vector<DispatchSchedule> out(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    auto& s = out[static_cast<std::size_t>(i)];
    s.rank = i;
    s.quota = q;
    s.send = detail::send_matrix(i, t, r, q);
    s.send_sizes = detail::column_sums(s.send, n);
  }
  for (int i = 0; i < n; ++i) {
    auto& recv = out[static_cast<std::size_t>(i)].recv_sizes;
    recv.assign(static_cast<std::size_t>(n), 0);
    for (int j = 0; j < n; ++j) recv[static_cast<std::size_t>(j)] = out[static_cast<std::size_t>(j)].send_sizes[static_cast<std::size_t>(i)];
  }
  return out;
}

inline DispatchSchedule compute_dispatch_schedule(int rank, const ExpertLoads& t, const ReplicaMatrix& r) {
  detail::check_dispatch_inputs(t, r);
  const int n = t.n_ranks();
  if (rank < 0 || rank >= n) throw ValidationError("dispatch: rank " + std::to_string(rank) + " out of range");
  const auto q = detail::quotas(t, r);
  DispatchSchedule s;
  s.rank = rank;
  s.quota = q;
  s.send = detail::send_matrix(rank, t, r, q);
  s.send_sizes = detail::column_sums(s.send, n);
  s.recv_sizes.assign(static_cast<std::size_t>(n), 0);
  for (int j = 0; j < n; ++j) {
    if (j == rank) {
      s.recv_sizes[static_cast<std::size_t>(j)] = s.send_sizes[static_cast<std::size_t>(j)];
      continue;
    }
    for (const auto& row : detail::send_matrix(j, t, r, q)) s.recv_sizes[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(rank)];
  }
  return s;
}

/// Tokens of each expert processed on each rank, [e][j], summed over senders.
inline std::vector<std::vector<std::int64_t>> processed_tokens(const std::vector<DispatchSchedule>& schedules) {
  if (schedules.empty()) return {};
  const std::size_t e_count = schedules.front().send.size();
  const std::size_t n = schedules.size();
  std::vector<std::vector<std::int64_t>> p(e_count, std::vector<std::int64_t>(n, 0));
  for (const auto& s : schedules)
    for (std::size_t e = 0; e < e_count; ++e)
      for (std::size_t j = 0; j < n; ++j) p[e][j] += s.send[e][j];
  return p;
}

/// Position of every local token in the send buffer. Blocks are ordered by
/// destination rank, then expert; original order is kept inside a block.
inline std::vector<std::size_t> build_shuffle_index(const DispatchSchedule& s, std::span<const ExpertId> routing) {
  const std::size_t e_count = s.send.size();
  const std::size_t n = s.send_sizes.size();
  if (static_cast<std::int64_t>(routing.size()) != s.local_tokens())
    throw ValidationError("build_shuffle_index: " + std::to_string(routing.size()) + " routed tokens but schedule covers " +
                          std::to_string(s.local_tokens()));

  // Start offset of block (j, e).
  std::vector<std::vector<std::size_t>> offset(n, std::vector<std::size_t>(e_count, 0));
  std::size_t pos = 0;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t e = 0; e < e_count; ++e) {
      offset[j][e] = pos;
      pos += static_cast<std::size_t>(s.send[e][j]);
    }

  // Tokens of expert e fill destinations in rank order.
  std::vector<std::size_t> dest(e_count, 0);
  std::vector<std::int64_t> used(e_count, 0);
  std::vector<std::size_t> index(routing.size());
  for (std::size_t k = 0; k < routing.size(); ++k) {
    const auto e = routing[k];
    if (e < 0 || static_cast<std::size_t>(e) >= e_count)
      throw ValidationError("build_shuffle_index: token " + std::to_string(k) + " routed to unknown expert " + std::to_string(e));
    const auto ue = static_cast<std::size_t>(e);
    while (dest[ue] < n && used[ue] == s.send[ue][dest[ue]]) {
      ++dest[ue];
      used[ue] = 0;
    }
    if (dest[ue] == n)
      throw ValidationError("build_shuffle_index: more tokens for expert " + std::to_string(e) + " than scheduled");
    index[k] = offset[dest[ue]][ue] + static_cast<std::size_t>(used[ue]);
    ++used[ue];
  }
  return index;
}

template <typename T>
std::vector<T> apply_shuffle(std::span<const std::size_t> index, std::span<const T> tokens) {
  if (index.size() != tokens.size()) throw ValidationError("apply_shuffle: size mismatch");
  std::vector<T> out(tokens.size());
  for (std::size_t k = 0; k < tokens.size(); ++k) out[index[k]] = tokens[k];
  return out;
}

template <typename T>
std::vector<T> invert_shuffle(std::span<const std::size_t> index, std::span<const T> shuffled) {
  if (index.size() != shuffled.size()) throw ValidationError("invert_shuffle: size mismatch");
  std::vector<T> out(shuffled.size());
  for (std::size_t k = 0; k < shuffled.size(); ++k) out[k] = shuffled[index[k]];
  return out;
}

/// Deterministic routing list for rank i consistent with T: experts are
/// interleaved round-robin so the shuffle is not the identity.
inline std::vector<ExpertId> routing_from_counts(const ExpertLoads& t, int i) {
  std::vector<std::int64_t> left(static_cast<std::size_t>(t.n_experts()));
  std::int64_t total = 0;
  for (int e = 0; e < t.n_experts(); ++e) total += left[static_cast<std::size_t>(e)] = t.at(e, i);
  std::vector<ExpertId> out;
  out.reserve(static_cast<std::size_t>(total));
  while (static_cast<std::int64_t>(out.size()) < total)
    for (int e = 0; e < t.n_experts(); ++e)
      if (left[static_cast<std::size_t>(e)] > 0) {
        out.push_back(e);
        --left[static_cast<std::size_t>(e)];
      }
  return out;
}

struct TokenRef {
  int origin = 0;           // sending rank
  std::size_t index = 0;    // position in the sender's original order
  ExpertId expert = 0;

  bool operator==(const TokenRef&) const = default;
};

struct AllToAllResult {
  // received[j][i]: tokens rank j got from rank i, in send-buffer order
  std::vector<std::vector<std::vector<TokenRef>>> received;
  // expert_counts[j][e]: tokens of e processed on rank j
  std::vector<std::vector<std::int64_t>> expert_counts;
};

/// Moves token references through the schedules and checks that every rank
/// receives exactly what it expects. Schedules must carry shuffle indices.
inline AllToAllResult simulate_all_to_all(const std::vector<DispatchSchedule>& schedules,
                                          const std::vector<std::vector<ExpertId>>& routings) {
  const std::size_t n = schedules.size();
  if (routings.size() != n) throw ValidationError("simulate_all_to_all: need one routing list per rank");
  AllToAllResult res;
  res.received.assign(n, std::vector<std::vector<TokenRef>>(n));
  const std::size_t e_count = n == 0 ? 0 : schedules.front().send.size();
  res.expert_counts.assign(n, std::vector<std::int64_t>(e_count, 0));

  for (std::size_t i = 0; i < n; ++i) {
    const auto& s = schedules[i];
    if (s.rank != static_cast<int>(i)) throw ConsistencyViolation("simulate_all_to_all: schedules out of rank order");
    if (s.send_sizes.size() != n || s.send.size() != e_count)
      throw ConsistencyViolation("simulate_all_to_all: schedule shape mismatch on rank " + std::to_string(i));
    const auto& routing = routings[i];
    if (s.shuffle_index.size() != routing.size())
      throw ConsistencyViolation("simulate_all_to_all: rank " + std::to_string(i) + " has no matching shuffle index");
    std::vector<TokenRef> buffer(routing.size());
    for (std::size_t k = 0; k < routing.size(); ++k) buffer[s.shuffle_index[k]] = TokenRef{static_cast<int>(i), k, routing[k]};
    std::size_t pos = 0;
    for (std::size_t j = 0; j < n; ++j) {
      const auto len = static_cast<std::size_t>(s.send_sizes[j]);
      auto& bucket = res.received[j][i];
      bucket.assign(buffer.begin() + static_cast<std::ptrdiff_t>(pos), buffer.begin() + static_cast<std::ptrdiff_t>(pos + len));
      for (std::size_t e = 0; e < e_count; ++e) {
        const auto want = s.send[e][j];
        const auto got = std::count_if(bucket.begin(), bucket.end(), [&](const TokenRef& t) { return t.expert == static_cast<ExpertId>(e); });
        if (got != want)
          throw ConsistencyViolation("simulate_all_to_all: rank " + std::to_string(i) + " -> " + std::to_string(j) + " expert " +
                                     std::to_string(e) + ": scheduled " + std::to_string(want) + ", buffered " + std::to_string(got));
        res.expert_counts[j][e] += got;
      }
      pos += len;
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < n; ++i)
      if (static_cast<std::int64_t>(res.received[j][i].size()) != schedules[j].recv_sizes[i])
        throw ConsistencyViolation("simulate_all_to_all: rank " + std::to_string(j) + " expected " +
                                   std::to_string(schedules[j].recv_sizes[i]) + " tokens from rank " + std::to_string(i) +
                                   ", got " + std::to_string(res.received[j][i].size()));
  return res;
}

/// Reverse pass: ranks return processed tokens to their origin; each origin
/// un-shuffles its buffer. Returns per-rank tokens in original order.
inline std::vector<std::vector<TokenRef>> combine_all_to_all(const AllToAllResult& res,
                                                             const std::vector<DispatchSchedule>& schedules) {
  const std::size_t n = schedules.size();
  std::vector<std::vector<TokenRef>> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<TokenRef> buffer;
    for (std::size_t j = 0; j < n; ++j) buffer.insert(buffer.end(), res.received[j][i].begin(), res.received[j][i].end());
    out[i] = invert_shuffle<TokenRef>(schedules[i].shuffle_index, buffer);
  }
  return out;
}

inline void to_json(nlohmann::json& j, const DispatchSchedule& s) {
  j = nlohmann::json{{"rank", s.rank}, {"D", s.send}, {"s", s.send_sizes}, {"recv", s.recv_sizes}, {"q", s.quota}};
  if (!s.shuffle_index.empty()) j["shuffle_index"] = s.shuffle_index;
}

inline void from_json(const nlohmann::json& j, DispatchSchedule& s) {
  try {
    s.rank = j.at("rank").get<int>();
    s.send = j.at("D").get<std::vector<std::vector<std::int64_t>>>();
    s.send_sizes = j.at("s").get<std::vector<std::int64_t>>();
    s.recv_sizes = j.at("recv").get<std::vector<std::int64_t>>();
    s.quota = j.value("q", std::vector<std::int64_t>{});
    s.shuffle_index = j.value("shuffle_index", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("dispatch schedule: ") + e.what());
  }
}

inline void to_json(nlohmann::json& j, const ReplicaMatrix& r) { j = r.counts; }
inline void from_json(const nlohmann::json& j, ReplicaMatrix& r) {
  try {
    r.counts = j.get<std::vector<std::vector<int>>>();
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("replica matrix: ") + e.what());
  }
  r.validate();
}

}  // namespace elasticep
