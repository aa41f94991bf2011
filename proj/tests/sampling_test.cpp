#include "cpath/sampling.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <set>
#include <vector>

#include "cpath/rng.hpp"

using namespace cpath;

namespace {

SamplingPlan plan_for(Strategy s) {
  SamplingPlan p;
  p.strategy = s;
  return p;
}

std::vector<double> random_row(Rng& rng, std::size_t n) {
  std::vector<double> row(n);
  for (auto& x : row) x = uniform_real(rng, -1.0, 1.0);
  return row;
}

}  // namespace

TEST(Schedule, BaselineAlwaysZero) {
  const auto p = plan_for(Strategy::Baseline);
  for (int e = 0; e < 60; ++e) EXPECT_EQ(schedule(p, e), (std::pair{0, 0}));
}

TEST(Schedule, SrclActivatesAfterFiveEpochs) {
  const auto p = plan_for(Strategy::SRCL);
  for (int e = 0; e <= 5; ++e) EXPECT_EQ(schedule(p, e), (std::pair{0, 0})) << "epoch " << e;
  for (int e = 6; e < 50; ++e) EXPECT_EQ(schedule(p, e), (std::pair{5, 0})) << "epoch " << e;
}

TEST(Schedule, NsamAlwaysFifty) {
  const auto p = plan_for(Strategy::NSam);
  for (int e = 0; e < 50; ++e) EXPECT_EQ(schedule(p, e), (std::pair{0, 50}));
}

TEST(Schedule, DynamicCommittedTable) {
  // Frozen (S_e, T_e) for epochs 5..15: inactive at 5, then positives fall
  // 30 -> 1 in steps of 5 (clamped at 1) while negatives grow by 20.
  const auto p = plan_for(Strategy::Dynamic);
  const std::vector<std::pair<int, int>> expected = {
      {0, 0},    // 5
      {30, 20},  // 6
      {25, 40},  // 7
      {20, 60},  // 8
      {15, 80},  // 9
      {10, 100}, // 10
      {5, 120},  // 11
      {1, 140},  // 12
      {1, 160},  // 13
      {1, 180},  // 14
      {1, 200},  // 15
  };
  for (int e = 5; e <= 15; ++e) EXPECT_EQ(schedule(p, e), expected[e - 5]) << "epoch " << e;
}

TEST(Schedule, DynamicMonotoneAndClamped) {
  const auto p = plan_for(Strategy::Dynamic);
  auto prev = schedule(p, 6);
  for (int e = 7; e <= 80; ++e) {
    const auto cur = schedule(p, e);
    EXPECT_LE(cur.first, prev.first);
    EXPECT_GE(cur.second, prev.second);
    EXPECT_GE(cur.first, 1);
    prev = cur;
  }
}

TEST(SelectPositives, HandRow) {
  const std::vector<double> row{0.0, 0.9, 0.1, 0.5};
  EXPECT_EQ(select_positives(row, 0, 2), (std::vector<std::size_t>{1, 3}));
  EXPECT_TRUE(select_positives(row, 0, 0).empty());
}

TEST(SelectPositives, TieBreakLowerIndex) {
  const std::vector<double> row{0.4, 0.4, 0.4, 0.4};
  EXPECT_EQ(select_positives(row, 0, 2), (std::vector<std::size_t>{1, 2}));
  EXPECT_EQ(select_positives(row, 2, 2), (std::vector<std::size_t>{0, 1}));
}

TEST(SelectPositives, CountTooLarge) {
  const std::vector<double> row{0.0, 0.9, 0.1};
  EXPECT_THROW(select_positives(row, 0, 3), CountTooLargeError);
}

TEST(SelectNegativesTail, HandRow) {
  const std::vector<double> row{0.0, 0.9, 0.1, 0.5};
  EXPECT_EQ(select_negatives_tail(row, 0, 1), (std::vector<std::size_t>{2}));
  EXPECT_TRUE(select_negatives_tail(row, 0, 0).empty());
  EXPECT_EQ(select_negatives_tail(row, 0, 3), (std::vector<std::size_t>{2, 3, 1}));
}

TEST(SelectNegativesTail, FullTailIsAllNonAnchor) {
  const std::vector<double> row{0.2, 0.9, 0.1, 0.5, -0.3};
  const auto sel = select_negatives_tail(row, 2, 4);
  const std::set<std::size_t> got(sel.begin(), sel.end());
  EXPECT_EQ(got, (std::set<std::size_t>{0, 1, 3, 4}));
}

TEST(SelectNegativesMiddle, AlternationFromCenter) {
  // Candidates 1..5 ranked descending; center position is 2, then the more
  // similar neighbour, then the less similar one.
  const std::vector<double> row{0.0, 0.9, 0.7, 0.5, 0.3, 0.1};
  EXPECT_EQ(select_negatives_middle(row, 0, 3), (std::vector<std::size_t>{3, 2, 4}));
  EXPECT_TRUE(select_negatives_middle(row, 0, 0).empty());
}

TEST(SelectNegativesMiddle, ExhaustsOneSide) {
  // Four candidates: ranking positions emitted as [2, 1, 3, 0].
  const std::vector<double> row{0.0, 0.9, 0.7, 0.5, 0.3};
  EXPECT_EQ(select_negatives_middle(row, 0, 4), (std::vector<std::size_t>{3, 2, 4, 1}));
}

TEST(SelectNegativesMiddle, RespectsExclusions) {
  const std::vector<double> row{0.0, 0.9, 0.7, 0.5, 0.3, 0.1};
  const std::vector<std::size_t> exclude{1, 2};
  // Candidates 3,4,5 (descending); center = position 1 -> index 4.
  EXPECT_EQ(select_negatives_middle(row, 0, 3, exclude), (std::vector<std::size_t>{4, 3, 5}));
  EXPECT_THROW(select_negatives_middle(row, 0, 4, exclude), CountTooLargeError);
}

TEST(BuildSelection, BaselineEmpty) {
  Rng rng(21);
  const auto row = random_row(rng, 16);
  const auto sel = build_selection(plan_for(Strategy::Baseline), 10, row, 3);
  EXPECT_TRUE(sel.empty());
}

TEST(BuildSelection, NsamCounts) {
  Rng rng(22);
  const auto row = random_row(rng, 64);
  const auto sel = build_selection(plan_for(Strategy::NSam), 0, row, 5);
  EXPECT_EQ(sel.negatives_boosted.size(), 50u);
  EXPECT_TRUE(sel.positives.empty());
}

TEST(BuildSelection, DynamicDisjointAtActivation) {
  Rng rng(23);
  const auto row = random_row(rng, 256);
  const auto sel = build_selection(plan_for(Strategy::Dynamic), 6, row, 17);
  EXPECT_EQ(sel.positives.size(), 30u);
  EXPECT_EQ(sel.negatives_boosted.size(), 20u);
  std::set<std::size_t> all(sel.positives.begin(), sel.positives.end());
  for (auto j : sel.negatives_boosted) EXPECT_TRUE(all.insert(j).second) << "overlap at " << j;
  EXPECT_EQ(all.count(17), 0u);
}

// Criterion: selectors are rank-transform invariant, anchor-free, disjoint
// and deterministic under ties, over 1000 random rows.
TEST(SamplingProperties, RandomRows) {
  Rng rng(24);
  for (int it = 0; it < 1000; ++it) {
    const std::size_t n = 8 + uniform_index(rng, 57);  // 8..64
    auto row = random_row(rng, n);
    const std::size_t anchor = uniform_index(rng, n);
    if (it % 3 == 0) {
      // inject ties
      const std::size_t a = uniform_index(rng, n), b = uniform_index(rng, n);
      row[a] = row[b];
    }
    const std::size_t s = uniform_index(rng, (n - 1) / 2 + 1);
    const std::size_t t = uniform_index(rng, (n - 1) / 2 + 1);

    const auto pos = select_positives(row, anchor, s);
    const auto tail = select_negatives_tail(row, anchor, t);
    const auto mid = select_negatives_middle(row, anchor, t, pos);

    // anchor never selected
    for (auto j : pos) EXPECT_NE(j, anchor);
    for (auto j : tail) EXPECT_NE(j, anchor);
    for (auto j : mid) EXPECT_NE(j, anchor);

    // middle band disjoint from its exclusions by construction
    std::set<std::size_t> pos_set(pos.begin(), pos.end());
    for (auto j : mid) EXPECT_EQ(pos_set.count(j), 0u);

    // deterministic under ties: a second call is identical
    EXPECT_EQ(pos, select_positives(row, anchor, s));
    EXPECT_EQ(tail, select_negatives_tail(row, anchor, t));
    EXPECT_EQ(mid, select_negatives_middle(row, anchor, t, pos));

    // rank-based only: any strictly increasing transform leaves selections
    // unchanged (ties preserved by strict monotonicity)
    auto transformed = row;
    for (auto& x : transformed) x = std::exp(2.0 * x) + 3.0;
    EXPECT_EQ(pos, select_positives(transformed, anchor, s));
    EXPECT_EQ(tail, select_negatives_tail(transformed, anchor, t));
    EXPECT_EQ(mid, select_negatives_middle(transformed, anchor, t, pos));
  }
}

// With distinct entries, top-S and bottom-T never meet when S+T <= N-1.
TEST(SamplingProperties, TopTailDisjointDistinctEntries) {
  Rng rng(25);
  for (int it = 0; it < 200; ++it) {
    const std::size_t n = 6 + uniform_index(rng, 59);
    std::vector<double> row(n);
    for (std::size_t j = 0; j < n; ++j) row[j] = static_cast<double>(j) * 0.01;
    shuffle(row, rng);
    const std::size_t anchor = uniform_index(rng, n);
    const std::size_t s = uniform_index(rng, n);
    const std::size_t t = (n - 1) - s == 0 ? 0 : uniform_index(rng, n - s);
    const auto pos = select_positives(row, anchor, s);
    const auto tail = select_negatives_tail(row, anchor, t);
    std::set<std::size_t> seen(pos.begin(), pos.end());
    for (auto j : tail) EXPECT_TRUE(seen.insert(j).second);
  }
}

TEST(SamplingPlan, Validation) {
  SamplingPlan p;
  p.s_min = 0;
  EXPECT_THROW(p.validate(), Error);
  p = SamplingPlan{};
  p.t_step = -1;
  EXPECT_THROW(p.validate(), Error);
}
