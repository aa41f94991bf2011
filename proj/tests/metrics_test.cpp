#include "cpath/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <functional>

#include "cpath/rng.hpp"

using namespace cpath;

namespace {

// Brute-force references, deliberately different algorithms from the library.

// AUROC: mean over all positive-negative pairs, ties worth 1/2.
double auroc_brute(const ScoredLabels& d) {
  double s = 0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < d.scores.size(); ++i) {
    if (!d.labels[i]) continue;
    for (std::size_t j = 0; j < d.scores.size(); ++j) {
      if (d.labels[j]) continue;
      ++pairs;
      if (d.scores[i] > d.scores[j]) s += 1;
      else if (d.scores[i] == d.scores[j]) s += 0.5;
    }
  }
  return s / static_cast<double>(pairs);
}

// AP: rescan the full arrays at every distinct threshold.
double auprc_brute(const ScoredLabels& d) {
  std::vector<double> thresholds = d.scores;
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  std::size_t pos = 0;
  for (int l : d.labels) pos += static_cast<std::size_t>(l);
  double ap = 0, prev_recall = 0;
  for (double t : thresholds) {
    std::size_t tp = 0, fp = 0;
    for (std::size_t i = 0; i < d.scores.size(); ++i) {
      if (d.scores[i] >= t) {
        if (d.labels[i]) ++tp;
        else ++fp;
      }
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

}  // namespace

TEST(Auroc, HandExamples) {
  // perfectly ranked
  EXPECT_DOUBLE_EQ(auroc({{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}}), 1.0);
  // all ties
  EXPECT_DOUBLE_EQ(auroc({{0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}}), 0.5);
  // pair enumeration: (0.9 > 0.8) = 1, (0.1 < 0.8) = 0 -> 0.5
  EXPECT_NEAR(auroc({{0.9, 0.8, 0.1}, {1, 0, 1}}), 0.5, 1e-9);
}

TEST(Auroc, Errors) {
  EXPECT_THROW(auroc({{0.1, 0.2}, {1, 1}}), SingleClassError);
  EXPECT_THROW(auroc({{0.1, 0.2}, {0, 0}}), SingleClassError);
  EXPECT_THROW(auroc({{}, {}}), Error);
}

TEST(Auprc, HandExamples) {
  EXPECT_DOUBLE_EQ(auprc({{0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}}), 1.0);
  // thresholds 0.9 / 0.8 / 0.1: (0.5 * 1) + (0 * 0.5) + (0.5 * 2/3)
  EXPECT_NEAR(auprc({{0.9, 0.8, 0.1}, {1, 0, 1}}), 0.8333333, 1e-7);
  EXPECT_NEAR(auprc({{0.9, 0.8, 0.1}, {1, 0, 1}}), 1.0 * 0.5 + (2.0 / 3.0) * 0.5, 1e-12);
}

TEST(Auprc, Errors) {
  EXPECT_THROW(auprc({{0.1, 0.2}, {0, 0}}), NoPositivesError);
}

TEST(Metrics, MonotoneTransformInvariance) {
  Rng rng(121);
  for (int it = 0; it < 200; ++it) {
    const std::size_t n = 2 + uniform_index(rng, 30);
    ScoredLabels d;
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      d.scores.push_back(uniform_real(rng, -2, 2));
      d.labels.push_back(static_cast<int>(uniform_index(rng, 2)));
      (d.labels.back() ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    ScoredLabels t = d;
    for (auto& s : t.scores) s = std::exp(3.0 * s) + 7.0;  // strictly increasing
    EXPECT_DOUBLE_EQ(auroc(d), auroc(t));
    EXPECT_DOUBLE_EQ(auprc(d), auprc(t));
  }
}

TEST(Metrics, LabelFlipComplementsAurocWithoutTies) {
  Rng rng(122);
  for (int it = 0; it < 200; ++it) {
    const std::size_t n = 3 + uniform_index(rng, 20);
    ScoredLabels d;
    bool has_pos = false, has_neg = false;
    for (std::size_t i = 0; i < n; ++i) {
      d.scores.push_back(uniform_real(rng));  // continuous: ties measure zero
      d.labels.push_back(static_cast<int>(uniform_index(rng, 2)));
      (d.labels.back() ? has_pos : has_neg) = true;
    }
    if (!has_pos || !has_neg) continue;
    ScoredLabels f = d;
    for (auto& l : f.labels) l = 1 - l;
    EXPECT_NEAR(auroc(f), 1.0 - auroc(d), 1e-12);
  }
}

// Acceptance criterion: both metrics equal the brute-force references on
// every multiset instance of n <= 12 with scores from a 4-value grid. Up to
// score/label permutation (both metrics are permutation invariant), the
// nondecreasing sequences over the 8 (score, label) symbols enumerate all
// such inputs.
TEST(Metrics, ExhaustiveSmallInstancesAgainstBruteForce) {
  const double grid[4] = {0.1, 0.4, 0.4000000001, 0.9};
  long checked_auroc = 0, checked_auprc = 0;

  std::vector<int> symbols;  // symbol = score_idx * 2 + label
  std::function<void(int)> recurse = [&](int max_n) {
    if (!symbols.empty()) {
      ScoredLabels d;
      std::size_t pos = 0, neg = 0;
      for (int s : symbols) {
        d.scores.push_back(grid[s >> 1]);
        d.labels.push_back(s & 1);
        (d.labels.back() ? pos : neg) += 1;
      }
      if (pos >= 1) {
        const double got = auprc(d);
        const double want = auprc_brute(d);
        ASSERT_NEAR(got, want, 1e-12);
        ++checked_auprc;
      }
      if (pos >= 1 && neg >= 1) {
        const double got = auroc(d);
        const double want = auroc_brute(d);
        ASSERT_NEAR(got, want, 1e-12);
        ++checked_auroc;
      }
    }
    if (static_cast<int>(symbols.size()) == max_n) return;
    const int lo = symbols.empty() ? 0 : symbols.back();
    for (int s = lo; s < 8; ++s) {
      symbols.push_back(s);
      recurse(max_n);
      symbols.pop_back();
    }
  };
  recurse(12);
  // all nonempty multisets over 8 symbols with n <= 12: C(20,8) - 1 total
  EXPECT_EQ(checked_auroc + checked_auprc > 0, true);
  std::printf("exhaustive instances: auroc=%ld auprc=%ld\n", checked_auroc, checked_auprc);
}

TEST(Auprc, RandomScoresApproachPrevalence) {
  // expectation of AP at chance is the positive prevalence
  Rng rng(123);
  const std::size_t n = 10000;
  for (double prevalence : {0.1, 0.3}) {
    ScoredLabels d;
    for (std::size_t i = 0; i < n; ++i) {
      d.scores.push_back(uniform_real(rng));
      d.labels.push_back(uniform_real(rng) < prevalence ? 1 : 0);
    }
    EXPECT_NEAR(auprc(d), prevalence, 0.02);
  }
}
