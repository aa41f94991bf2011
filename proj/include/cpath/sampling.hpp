#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cpath/errors.hpp"

namespace cpath {

enum class Strategy { Baseline, SRCL, NSam, Dynamic };

inline std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::Baseline: return "baseline";
    case Strategy::SRCL: return "srcl";
    case Strategy::NSam: return "nsam";
    default: return "dynamic";
  }
}

inline Strategy strategy_from_name(const std::string& s) {
  if (s == "baseline") return Strategy::Baseline;
  if (s == "srcl") return Strategy::SRCL;
  if (s == "nsam") return Strategy::NSam;
  if (s == "dynamic") return Strategy::Dynamic;
  throw ParseError("unknown strategy '" + s + "'");
}

/// Which extra positives / boosted negatives to sample, per epoch.
/// Defaults are the full-scale constants; small-batch runs must scale the
/// dynamic counts down since growth past N-1 is an error, not a clamp.
struct SamplingPlan {
  Strategy strategy = Strategy::Baseline;
  int s_fixed = 5;           // SRCL extra positives
  int t_fixed = 50;          // NSam boosted tail negatives
  int activation_epoch = 5;  // sampling starts after this many completed epochs
  int s_start = 30;          // Dynamic: positives at first active epoch
  int s_step = 5;            // Dynamic: positives decrease per epoch
  int s_min = 1;             // Dynamic: positive floor
  int t_step = 20;           // Dynamic: negatives increase per epoch

  void validate() const {
    if (s_fixed < 0 || t_fixed < 0 || s_start < 0 || s_step < 0 || t_step < 0)
      throw Error("sampling plan counts must be nonnegative");
    if (s_min < 1) throw Error("sampling plan s_min must be >= 1");
    if (activation_epoch < 0) throw Error("sampling plan activation_epoch must be >= 0");
  }
};

/// Index sets for one anchor. Indices point into the key batch and never
/// include the anchor itself.
struct SampleSelection {
  std::vector<std::size_t> positives;
  std::vector<std::size_t> negatives_boosted;
  int epoch = 0;

  bool empty() const { return positives.empty() && negatives_boosted.empty(); }
};

/// (S_e, T_e) for a 1-based epoch number.
inline std::pair<int, int> schedule(const SamplingPlan& plan, int epoch) {
  plan.validate();
  if (epoch < 0) throw Error("epoch must be >= 0");
  const int a = plan.activation_epoch;
  switch (plan.strategy) {
    case Strategy::Baseline:
      return {0, 0};
    case Strategy::SRCL:
      return epoch >= a + 1 ? std::pair{plan.s_fixed, 0} : std::pair{0, 0};
    case Strategy::NSam:
      return {0, plan.t_fixed};
    case Strategy::Dynamic:
    default: {
      if (epoch <= a) return {0, 0};
      const int s = std::max(plan.s_min, plan.s_start - plan.s_step * (epoch - a - 1));
      const int t = plan.t_step * (epoch - a);
      return {s, t};
    }
  }
}

namespace detail {

// Candidate indices of a similarity row: everything except the anchor and
// the excluded set, sorted by (similarity desc, index asc).
inline std::vector<std::size_t> ranking_desc(std::span<const double> sims, std::size_t anchor,
                                             std::span<const std::size_t> exclude = {}) {
  std::vector<char> skip(sims.size(), 0);
  if (anchor < sims.size()) skip[anchor] = 1;
  for (std::size_t e : exclude)
    if (e < sims.size()) skip[e] = 1;
  std::vector<std::size_t> idx;
  idx.reserve(sims.size());
  for (std::size_t j = 0; j < sims.size(); ++j)
    if (!skip[j]) idx.push_back(j);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] > sims[b];
    return a < b;
  });
  return idx;
}

inline void check_count(std::size_t count, std::size_t available, const char* what) {
  if (count > available)
    throw CountTooLargeError(std::string(what) + ": requested " + std::to_string(count) +
                             " of " + std::to_string(available) + " available");
}

}  // namespace detail

/// Indices of the `count` highest-similarity entries, descending; ties go to
/// the lower index. The anchor's own column is never a candidate.
inline std::vector<std::size_t> select_positives(std::span<const double> sims, std::size_t anchor,
                                                 std::size_t count) {
  auto ranking = detail::ranking_desc(sims, anchor);
  detail::check_count(count, ranking.size(), "select_positives");
  ranking.resize(count);
  return ranking;
}

/// Indices of the `count` lowest-similarity entries, ascending similarity;
/// ties go to the lower index.
inline std::vector<std::size_t> select_negatives_tail(std::span<const double> sims,
                                                      std::size_t anchor, std::size_t count) {
  std::vector<std::size_t> idx;
  idx.reserve(sims.size());
  for (std::size_t j = 0; j < sims.size(); ++j)
    if (j != anchor) idx.push_back(j);
  detail::check_count(count, idx.size(), "select_negatives_tail");
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (sims[a] != sims[b]) return sims[a] < sims[b];
    return a < b;
  });
  idx.resize(count);
  return idx;
}

/// Middle-of-the-ranking negatives: with the candidates ranked by descending
/// similarity, start at floor(M/2) and alternate center, more-similar side,
/// less-similar side, growing outward; continue on the remaining side once
/// one is exhausted.
inline std::vector<std::size_t> select_negatives_middle(std::span<const double> sims,
                                                        std::size_t anchor, std::size_t count,
                                                        std::span<const std::size_t> exclude = {}) {
  auto ranking = detail::ranking_desc(sims, anchor, exclude);
  detail::check_count(count, ranking.size(), "select_negatives_middle");
  const std::size_t m = ranking.size();
  std::vector<std::size_t> out;
  out.reserve(count);
  if (count == 0) return out;
  const std::size_t c = m / 2;
  out.push_back(ranking[c]);
  std::size_t lo = c, hi = c;  // emitted window [lo, hi]
  while (out.size() < count) {
    if (lo > 0) {
      out.push_back(ranking[--lo]);
      if (out.size() == count) break;
    }
    if (hi + 1 < m) {
      out.push_back(ranking[++hi]);
    } else if (lo == 0) {
      break;  // both sides exhausted; count check above makes this unreachable
    }
  }
  return out;
}

/// Assemble the per-anchor selection for a strategy at an epoch.
inline SampleSelection build_selection(const SamplingPlan& plan, int epoch,
                                       std::span<const double> sims, std::size_t anchor) {
  if (anchor >= sims.size()) throw Error("build_selection: anchor out of range");
  const auto [s_e, t_e] = schedule(plan, epoch);
  SampleSelection sel;
  sel.epoch = epoch;
  switch (plan.strategy) {
    case Strategy::Baseline:
      break;
    case Strategy::SRCL:
      sel.positives = select_positives(sims, anchor, static_cast<std::size_t>(s_e));
      break;
    case Strategy::NSam:
      sel.negatives_boosted = select_negatives_tail(sims, anchor, static_cast<std::size_t>(t_e));
      break;
    case Strategy::Dynamic:
      sel.positives = select_positives(sims, anchor, static_cast<std::size_t>(s_e));
      sel.negatives_boosted = select_negatives_middle(sims, anchor, static_cast<std::size_t>(t_e),
                                                      sel.positives);
      break;
  }
  return sel;
}

}  // namespace cpath
