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

#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "elasticep/combinatorics.hpp"
#include "elasticep/dispatch.hpp"

namespace elasticep {
namespace {

using Mat = std::vector<std::vector<std::int64_t>>;

ReplicaMatrix rm(std::vector<std::vector<int>> c) { return ReplicaMatrix{std::move(c)}; }

// Independent restatement of the split: exact rational shares, then hand out
// the leftover units by descending fractional part, lower rank first.
Mat oracle_send(int i, const Mat& t, const std::vector<std::vector<int>>& r) {
  const std::size_t e_count = t.size(), n = t[0].size();
  Mat d(e_count, std::vector<std::int64_t>(n, 0));
  for (std::size_t e = 0; e < e_count; ++e) {
    const std::int64_t total = std::accumulate(t[e].begin(), t[e].end(), std::int64_t{0});
    const int reps = std::accumulate(r[e].begin(), r[e].end(), 0);
    const std::int64_t q = reps ? (total + reps - 1) / reps : 0;
    const std::int64_t mine = t[e][static_cast<std::size_t>(i)];
    const std::int64_t keep = std::min(mine, q * r[e][static_cast<std::size_t>(i)]);
    d[e][static_cast<std::size_t>(i)] = keep;
    const std::int64_t over = mine - keep;
    if (!over) continue;
    std::vector<std::int64_t> p(n, 0);
    std::int64_t ps = 0;
    for (std::size_t j = 0; j < n; ++j)
      if (j != static_cast<std::size_t>(i)) {
        p[j] = std::max<std::int64_t>(0, q * r[e][j] - t[e][j]);
        ps += p[j];
      }
    std::vector<Rational> frac_part(n);
    std::int64_t given = 0;
    for (std::size_t j = 0; j < n; ++j) {
      Rational exact(over * p[j], ps);
      BigInt fl = boost::multiprecision::numerator(exact) / boost::multiprecision::denominator(exact);
      d[e][j] += fl.convert_to<std::int64_t>();
      given += fl.convert_to<std::int64_t>();
      frac_part[j] = exact - Rational(fl);
    }
    if (static_cast<std::size_t>(i) < n) d[e][static_cast<std::size_t>(i)] = keep;
    for (std::int64_t u = 0; u < over - given; ++u) {
      std::size_t best = n;
      for (std::size_t j = 0; j < n; ++j)
        if (j != static_cast<std::size_t>(i) && frac_part[j] > 0 && (best == n || frac_part[j] > frac_part[best])) best = j;
      d[e][best] += 1;
      frac_part[best] = 0;
    }
  }
  return d;
}

TEST(GatherLoadMatrixTest, Examples) {
  auto t = gather_load_matrix({{3, 1}, {0, 4}});
  EXPECT_EQ(t.per_rank(), (Mat{{3, 0}, {1, 4}}));
  EXPECT_EQ(gather_load_matrix({{2, 5, 7}}).per_rank(), (Mat{{2}, {5}, {7}}));
  EXPECT_THROW(gather_load_matrix({{1, 2}, {3}}), ValidationError);
  EXPECT_THROW(gather_load_matrix({}), ValidationError);
}

TEST(DispatchScheduleTest, SingleOwner) {
  ExpertLoads t(Mat{{5, 5}});
  auto r = rm({{1, 0}});
  auto s1 = compute_dispatch_schedule(1, t, r);
  EXPECT_EQ(s1.quota, (std::vector<std::int64_t>{10}));
  EXPECT_EQ(s1.send, (Mat{{5, 0}}));
  EXPECT_EQ(s1.send_sizes, (std::vector<std::int64_t>{5, 0}));
  auto s0 = compute_dispatch_schedule(0, t, r);
  EXPECT_EQ(s0.send, (Mat{{5, 0}}));
  EXPECT_EQ(s0.recv_sizes, (std::vector<std::int64_t>{5, 5}));
}

TEST(DispatchScheduleTest, BalancedIsLocal) {
  ExpertLoads t(Mat{{4, 4}, {6, 6}});
  auto r = rm({{1, 1}, {1, 1}});
  for (int i = 0; i < 2; ++i) {
    auto s = compute_dispatch_schedule(i, t, r);
    for (int e = 0; e < 2; ++e) EXPECT_EQ(s.send[static_cast<std::size_t>(e)][static_cast<std::size_t>(1 - i)], 0);
  }
}

TEST(DispatchScheduleTest, TieGoesToLowerRank) {
  ExpertLoads t(Mat{{0, 0, 9}});
  auto s = compute_dispatch_schedule(2, t, rm({{1, 1, 0}}));
  EXPECT_EQ(s.quota[0], 5);
  EXPECT_EQ(s.send, (Mat{{5, 4, 0}}));
}

TEST(DispatchScheduleTest, Errors) {
  ExpertLoads t(Mat{{3, 0}, {1, 1}});
  EXPECT_THROW(compute_dispatch_schedule(0, t, rm({{1, 1}, {0, 0}})), UnroutableTokensError);
  EXPECT_THROW(compute_dispatch_schedule(0, t, rm({{1, 1}})), ValidationError);
  EXPECT_THROW(compute_dispatch_schedule(2, t, rm({{1, 1}, {1, 0}})), ValidationError);
  // no tokens, no replica: fine
  EXPECT_NO_THROW(compute_dispatch_schedule(0, ExpertLoads(Mat{{0, 0}, {1, 1}}), rm({{0, 0}, {1, 1}})));
}

TEST(DispatchScheduleTest, ReplicaMatrixFromPlan) {
  PlacementPlan plan(2, 2, {{0, 1}, {0, 1}, {1, 1}});
  EXPECT_EQ(replica_matrix_from_plan(plan).counts, (std::vector<std::vector<int>>{{1, 1, 0}, {1, 1, 2}}));
}

TEST(ShuffleIndexTest, AllLocalGroupsByExpert) {
  ExpertLoads t(Mat{{2, 2}, {2, 2}});
  auto s = compute_dispatch_schedule(0, t, rm({{1, 1}, {1, 1}}));
  std::vector<ExpertId> routing{1, 0, 1, 0};
  EXPECT_EQ(build_shuffle_index(s, routing), (std::vector<std::size_t>{2, 0, 3, 1}));
}

TEST(ShuffleIndexTest, ForcedSendBlock) {
  ExpertLoads t(Mat{{5, 5}});
  auto s = compute_dispatch_schedule(1, t, rm({{1, 0}}));
  std::vector<ExpertId> routing(5, 0);
  EXPECT_EQ(build_shuffle_index(s, routing), (std::vector<std::size_t>{0, 1, 2, 3, 4}));
  EXPECT_THROW(build_shuffle_index(s, std::vector<ExpertId>(4, 0)), ValidationError);
  EXPECT_THROW(build_shuffle_index(s, std::vector<ExpertId>{0, 0, 0, 0, 3}), ValidationError);
}

TEST(AllToAllTest, SingleOwnerReceivesFive) {
  ExpertLoads t(Mat{{5, 5}});
  auto r = rm({{1, 0}});
  auto all = compute_all_schedules(t, r);
  std::vector<std::vector<ExpertId>> routing{routing_from_counts(t, 0), routing_from_counts(t, 1)};
  for (int i = 0; i < 2; ++i) all[static_cast<std::size_t>(i)].shuffle_index = build_shuffle_index(all[static_cast<std::size_t>(i)], routing[static_cast<std::size_t>(i)]);
  auto res = simulate_all_to_all(all, routing);
  EXPECT_EQ(res.received[0][1].size(), 5u);
  EXPECT_EQ(res.expert_counts[0][0], 10);
  EXPECT_EQ(res.expert_counts[1][0], 0);
}

TEST(AllToAllTest, DetectsTamperedSchedule) {
  ExpertLoads t(Mat{{3, 1}, {1, 3}});
  auto r = rm({{1, 1}, {1, 1}});
  auto all = compute_all_schedules(t, r);
  std::vector<std::vector<ExpertId>> routing{routing_from_counts(t, 0), routing_from_counts(t, 1)};
  for (std::size_t i = 0; i < 2; ++i) all[i].shuffle_index = build_shuffle_index(all[i], routing[i]);
  auto bad = all;
  bad[0].recv_sizes[1] += 1;
  EXPECT_THROW(simulate_all_to_all(bad, routing), ConsistencyViolation);
  bad = all;
  bad[1].shuffle_index.clear();
  EXPECT_THROW(simulate_all_to_all(bad, routing), ConsistencyViolation);
}

TEST(DispatchScheduleTest, JsonRoundTrip) {
  ExpertLoads t(Mat{{0, 0, 9}, {3, 2, 1}});
  auto s = compute_dispatch_schedule(2, t, rm({{1, 1, 0}, {1, 1, 1}}));
  s.shuffle_index = build_shuffle_index(s, routing_from_counts(t, 2));
  nlohmann::json j = s;
  EXPECT_TRUE(j.contains("D"));
  EXPECT_TRUE(j.contains("s"));
  EXPECT_TRUE(j.contains("recv"));
  EXPECT_EQ(j.get<DispatchSchedule>(), s);
  EXPECT_THROW(nlohmann::json({{"rank", 0}}).get<DispatchSchedule>(), SchemaError);
}

// Random replica matrix with every expert owning at least one replica.
ReplicaMatrix random_replicas(std::mt19937_64& rng, int e, int n) {
  ReplicaMatrix r;
  r.counts.assign(static_cast<std::size_t>(e), std::vector<int>(static_cast<std::size_t>(n), 0));
  for (auto& row : r.counts) {
    for (auto& v : row) v = std::uniform_int_distribution<int>(0, 3)(rng) == 0 ? std::uniform_int_distribution<int>(1, 3)(rng) : 0;
    row[std::uniform_int_distribution<std::size_t>(0, static_cast<std::size_t>(n) - 1)(rng)] += 1;
  }
  return r;
}

TEST(DispatchPropertyTest, FuzzAgainstOracleAndInvariants) {
  std::mt19937_64 rng(77);
  for (int iter = 0; iter < 1500; ++iter) {
    const int n = std::uniform_int_distribution<int>(1, 7)(rng);
    const int e = std::uniform_int_distribution<int>(1, 6)(rng);
    Mat tm(static_cast<std::size_t>(e), std::vector<std::int64_t>(static_cast<std::size_t>(n)));
    for (auto& row : tm)
      for (auto& v : row) v = std::uniform_int_distribution<std::int64_t>(0, 40)(rng);
    ExpertLoads t(tm);
    auto r = random_replicas(rng, e, n);
    auto all = compute_all_schedules(t, r);
    std::vector<std::vector<ExpertId>> routing;
    for (int i = 0; i < n; ++i) {
      auto& s = all[static_cast<std::size_t>(i)];
      ASSERT_EQ(s, compute_dispatch_schedule(i, t, r));
      ASSERT_EQ(s.send, oracle_send(i, tm, r.counts));
      ASSERT_EQ(s.local_tokens(), std::accumulate(tm.begin(), tm.end(), std::int64_t{0},
                                                  [&](std::int64_t a, const auto& row) { return a + row[static_cast<std::size_t>(i)]; }));
      for (int x = 0; x < e; ++x) {
        const auto& row = s.send[static_cast<std::size_t>(x)];
        ASSERT_EQ(std::accumulate(row.begin(), row.end(), std::int64_t{0}), tm[static_cast<std::size_t>(x)][static_cast<std::size_t>(i)]);
        for (int j = 0; j < n; ++j) {
          if (r.at(x, j) == 0) {
            ASSERT_EQ(row[static_cast<std::size_t>(j)], 0);
          }
        }
        ASSERT_EQ(row[static_cast<std::size_t>(i)], std::min(tm[static_cast<std::size_t>(x)][static_cast<std::size_t>(i)], s.quota[static_cast<std::size_t>(x)] * r.at(x, i)));
      }
      routing.push_back(routing_from_counts(t, i));
      s.shuffle_index = build_shuffle_index(s, routing.back());
      auto sorted = s.shuffle_index;
      std::sort(sorted.begin(), sorted.end());
      for (std::size_t k = 0; k < sorted.size(); ++k) ASSERT_EQ(sorted[k], k);
    }
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        ASSERT_EQ(all[static_cast<std::size_t>(i)].send_sizes[static_cast<std::size_t>(j)], all[static_cast<std::size_t>(j)].recv_sizes[static_cast<std::size_t>(i)]);

    auto processed = processed_tokens(all);
    for (int x = 0; x < e; ++x) {
      const auto q = all[0].quota[static_cast<std::size_t>(x)];
      for (int j = 0; j < n; ++j) {
        const auto got = processed[static_cast<std::size_t>(x)][static_cast<std::size_t>(j)];
        ASSERT_LE(got, q * r.at(x, j) + (n - 1));
        if (r.at(x, j) > 0) {
          ASSERT_LE((got + r.at(x, j) - 1) / r.at(x, j), q + (n - 1));
        }
      }
    }

    auto res = simulate_all_to_all(all, routing);
    for (int j = 0; j < n; ++j)
      for (int x = 0; x < e; ++x) ASSERT_EQ(res.expert_counts[static_cast<std::size_t>(j)][static_cast<std::size_t>(x)], processed[static_cast<std::size_t>(x)][static_cast<std::size_t>(j)]);
    auto back = combine_all_to_all(res, all);
    for (int i = 0; i < n; ++i)
      for (std::size_t k = 0; k < back[static_cast<std::size_t>(i)].size(); ++k) {
        ASSERT_EQ(back[static_cast<std::size_t>(i)][k].origin, i);
        ASSERT_EQ(back[static_cast<std::size_t>(i)][k].index, k);
        ASSERT_EQ(back[static_cast<std::size_t>(i)][k].expert, routing[static_cast<std::size_t>(i)][k]);
      }
  }
}

}  // namespace
}  // namespace elasticep
