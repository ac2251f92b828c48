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

#include <random>

#include "elasticep/placement.hpp"

namespace elasticep {
namespace {

using Columns = std::vector<std::vector<ExpertId>>;

PlacementPlan mro(std::vector<int> r, int n, int c) {
  return build_mro_plan(AllocationPlan::from_replicas(std::move(r)), ClusterSpec{n, c, 1, {}});
}

TEST(BuildMroPlanTest, TwoExpertsThreeNodes) {
  auto plan = mro({2, 4}, 3, 2);
  EXPECT_EQ(plan.columns(), (Columns{{0, 1}, {0, 1}, {1, 1}}));
  EXPECT_TRUE(verify_mro(plan, AllocationPlan::from_replicas({2, 4})));
}

TEST(BuildMroPlanTest, TwoGroupsNoLeftovers) {
  auto plan = mro({2, 2, 3, 3}, 5, 2);
  EXPECT_EQ(plan.columns(), (Columns{{0, 1}, {0, 1}, {2, 3}, {2, 3}, {2, 3}}));
}

TEST(BuildMroPlanTest, SingleExpert) {
  auto plan = mro({6}, 2, 3);
  EXPECT_EQ(plan.columns(), (Columns{{0, 0, 0}, {0, 0, 0}}));
  EXPECT_EQ(distinct_node_span(plan, 0), 2);
}

TEST(BuildMroPlanTest, UsesSortedOrderNotIds) {
  // expert 2 is the least replicated and leads the first group
  auto alloc = AllocationPlan::from_replicas({3, 3, 2, 2});
  auto plan = build_mro_plan(alloc, ClusterSpec{5, 2, 1, {}});
  EXPECT_EQ(plan.column(0), (std::vector<ExpertId>{2, 3}));
  EXPECT_EQ(plan.column(1), (std::vector<ExpertId>{2, 3}));
  EXPECT_TRUE(verify_mro(plan, alloc));
}

TEST(BuildMroPlanTest, RejectsShortfall) {
  EXPECT_THROW(mro({2, 3}, 3, 2), ValidationError);
}

TEST(BuildMroPlanTest, LastGroupClampedToRemainingNodes) {
  // groups {0,1} (rep r=2) and {2} (rep r=4): second block is min(4-2, 4) = 2 nodes
  auto alloc = AllocationPlan::from_replicas({2, 2, 4});
  auto plan = build_mro_plan(alloc, ClusterSpec{4, 2, 1, {}});
  const auto groups = mro_groups(alloc, 4, 2);
  EXPECT_EQ(groups.node_counts, (std::vector<int>{2, 2}));
  EXPECT_TRUE(groups.last_block_clamped());
  EXPECT_EQ(plan.columns(), (Columns{{0, 1}, {0, 1}, {2, 2}, {2, 2}}));
  EXPECT_TRUE(verify_mro(plan, alloc));
  EXPECT_EQ(distinct_node_span(plan, 2), 2);
}

TEST(BuildMroPlanTest, ClampedTriangleDuplicatesLastExpert) {
  auto plan = mro({2, 2, 2}, 3, 2);
  EXPECT_EQ(plan.columns(), (Columns{{0, 1}, {0, 1}, {2, 2}}));
  EXPECT_EQ(distinct_node_span(plan, 2), 1);
  EXPECT_TRUE(mro_groups(AllocationPlan::from_replicas({2, 2, 2}), 3, 2).last_block_clamped());
  EXPECT_FALSE(mro_groups(AllocationPlan::from_replicas({2, 2, 3, 3}), 5, 2).last_block_clamped());
}

TEST(VerifyMroTest, CompactPackingFails) {
  auto alloc = AllocationPlan::from_replicas({2, 4});
  PlacementPlan compact(2, 2, Columns{{0, 0}, {1, 1}, {1, 1}});
  EXPECT_FALSE(verify_mro(compact, alloc));
}

TEST(VerifyMroTest, WrongReplicaCountFails) {
  auto alloc = AllocationPlan::from_replicas({2, 4});
  PlacementPlan wrong(2, 2, Columns{{0, 1}, {0, 1}, {0, 1}});
  EXPECT_FALSE(verify_mro(wrong, alloc));
}

TEST(VerifyMroTest, AcceptsPermutedNodes) {
  auto alloc = AllocationPlan::from_replicas({2, 2, 3, 3});
  PlacementPlan shuffled(4, 2, Columns{{2, 3}, {0, 1}, {2, 3}, {0, 1}, {2, 3}});
  EXPECT_TRUE(verify_mro(shuffled, alloc));
}

TEST(DistinctNodeSpanTest, Examples) {
  auto plan = mro({2, 4}, 3, 2);
  EXPECT_EQ(distinct_node_span(plan, 0), 2);
  EXPECT_EQ(distinct_node_span(plan, 1), 3);
  EXPECT_THROW(distinct_node_span(plan, 2), ValidationError);
}

TEST(PlacementPlanTest, JsonRoundTrip) {
  auto plan = mro({2, 2, 3, 3}, 5, 2);
  plan.set_layer(3);
  nlohmann::json j = plan;
  EXPECT_EQ(j["slots"].size(), 2u);
  EXPECT_EQ(j["slots"][0].size(), 5u);
  EXPECT_EQ(j.get<PlacementPlan>(), plan);
}

TEST(BuildMroPlanTest, FuzzedProperties) {
  std::mt19937_64 rng(3);
  for (int iter = 0; iter < 3000; ++iter) {
    const int n = std::uniform_int_distribution<int>(1, 14)(rng);
    const int c = std::uniform_int_distribution<int>(1, 7)(rng);
    const int e = std::uniform_int_distribution<int>(1, std::min(20, n * c))(rng);
    const int f = std::uniform_int_distribution<int>(0, n)(rng);
    std::vector<std::int64_t> t(static_cast<std::size_t>(e));
    for (auto& v : t) v = std::uniform_int_distribution<std::int64_t>(0, 500)(rng);
    ClusterSpec spec{n, c, f, {}};
    auto alloc = allocate_replicas(t, spec);
    auto plan = build_mro_plan(alloc, spec);
    ASSERT_TRUE(verify_mro(plan, alloc));
    for (const auto& col : plan.columns()) ASSERT_EQ(static_cast<int>(col.size()), c);
    const bool clamped = mro_groups(alloc, n, c).last_block_clamped();
    if (!clamped) {
      for (int x = 0; x < e; ++x) ASSERT_GE(distinct_node_span(plan, x), std::min(alloc.f_used, n));
    }
    ASSERT_EQ(build_mro_plan(alloc, spec), plan);

    // Within each group the experts' block membership is nested.
    const auto groups = mro_groups(alloc, n, c);
    const auto cols = plan.col_sets();
    int first_node = 0;
    for (std::size_t g = 0; g < groups.experts.size(); ++g) {
      for (int j = first_node; j < first_node + groups.node_counts[g]; ++j)
        for (auto x : groups.experts[g]) ASSERT_TRUE(cols[static_cast<std::size_t>(j)].contains(x));
      first_node += groups.node_counts[g];
    }
  }
}

}  // namespace
}  // namespace elasticep
