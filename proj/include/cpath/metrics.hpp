#pragma once

#include <algorithm>
#include <cstddef>
#include <numeric>
#include <vector>

#include "cpath/errors.hpp"

namespace cpath {

// Exact ranking metrics. AUROC is the Mann-Whitney statistic with ties
// counted one half; AUPRC is average precision with step-wise interpolation
// and threshold grouping (equal scores enter together).

struct ScoredLabels {
  std::vector<double> scores;
  std::vector<int> labels;  // 0 / 1

  void validate() const {
    if (scores.size() != labels.size() || scores.empty())
      throw Error("scores/labels must be non-empty and aligned");
    for (int l : labels)
      if (l != 0 && l != 1) throw Error("labels must be 0/1");
  }
};

inline double auroc(const ScoredLabels& data) {
  data.validate();
  const std::size_t n = data.scores.size();
  std::size_t pos = 0;
  for (int l : data.labels) pos += static_cast<std::size_t>(l);
  const std::size_t neg = n - pos;
  if (pos == 0 || neg == 0) throw SingleClassError();

  // midranks over ascending scores
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data.scores[a] < data.scores[b]; });
  double rank_sum_pos = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && data.scores[order[j + 1]] == data.scores[order[i]]) ++j;
    const double midrank = 0.5 * static_cast<double>(i + j) + 1.0;  // 1-based
    for (std::size_t k = i; k <= j; ++k)
      if (data.labels[order[k]]) rank_sum_pos += midrank;
    i = j + 1;
  }
  const double u = rank_sum_pos - 0.5 * static_cast<double>(pos) * static_cast<double>(pos + 1);
  return u / (static_cast<double>(pos) * static_cast<double>(neg));
}

inline double auprc(const ScoredLabels& data) {
  data.validate();
  std::size_t pos = 0;
  for (int l : data.labels) pos += static_cast<std::size_t>(l);
  if (pos == 0) throw NoPositivesError();
  const std::size_t n = data.scores.size();

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return data.scores[a] > data.scores[b]; });

  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t tp = 0, fp = 0, i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j + 1 < n && data.scores[order[j + 1]] == data.scores[order[i]]) ++j;
    for (std::size_t k = i; k <= j; ++k) {
      if (data.labels[order[k]]) ++tp;
      else ++fp;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(pos);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
    i = j + 1;
  }
  return ap;
}

}  // namespace cpath
