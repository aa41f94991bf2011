#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "cpath/core_math.hpp"
#include "cpath/errors.hpp"
#include "cpath/sampling.hpp"

namespace cpath {

// The four contrastive objectives as pure scalar functions of an anchor
// query, a key batch and a SampleSelection. One shared evaluation: the
// numerator holds the matched key plus any extra positives, the denominator
// additionally holds every non-positive key once plus the boosted set a
// second time. Sums are stabilized in the log domain; gradients flow through
// the query only.

struct ContrastiveLossInput {
  FeatureVector q;
  const EmbeddingBatch* keys = nullptr;
  std::size_t matched_index = 0;
  SampleSelection selection;
  Temperature tau{0.2};
};

struct LossValue {
  double value = 0.0;
  // Raw psi masses per term label: matched, extra_pos, boosted_neg, plain_neg.
  std::map<std::string, double> per_term_breakdown;
};

namespace detail {

inline void check_selection_indices(const ContrastiveLossInput& in) {
  const std::size_t n = in.keys->n;
  if (in.matched_index >= n) throw Error("matched_index out of range");
  std::vector<char> is_pos(n, 0);
  for (std::size_t j : in.selection.positives) {
    if (j >= n) throw Error("positive index out of range");
    if (j == in.matched_index) throw OverlapError("extra positive equals matched key");
    is_pos[j] = 1;
  }
  for (std::size_t j : in.selection.negatives_boosted) {
    if (j >= n) throw Error("boosted negative index out of range");
    if (j == in.matched_index) throw OverlapError("boosted negative equals matched key");
    if (is_pos[j]) throw OverlapError("boosted negative overlaps extra positives");
  }
}

// Shared evaluation; writes d(loss)/d(q) into grad_q when non-null.
inline LossValue contrastive_eval(const ContrastiveLossInput& in, FeatureVector* grad_q) {
  if (!in.keys) throw Error("loss input has no key batch");
  const EmbeddingBatch& keys = *in.keys;
  if (keys.n < 2) throw Error("need at least 2 keys");
  if (in.q.size() != keys.dim)
    throw DimensionMismatchError("query dim " + std::to_string(in.q.size()) + " vs key dim " +
                                 std::to_string(keys.dim));
  check_selection_indices(in);

  const std::size_t n = keys.n;
  const double inv_tau = 1.0 / in.tau.tau;
  const double qn = norm2(in.q);
  if (qn < kZeroNormThreshold) throw ZeroVectorError();

  std::vector<char> in_num(n, 0);
  in_num[in.matched_index] = 1;
  for (std::size_t j : in.selection.positives) in_num[j] = 1;
  std::vector<char> boosted(n, 0);
  for (std::size_t j : in.selection.negatives_boosted) boosted[j] = 1;

  // Logits and denominator weights. Every key sits in the denominator once;
  // boosted keys a second time.
  std::vector<double> logit(n), cosv(n), knorm(n);
  double max_logit = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < n; ++j) {
    const auto kj = keys.row(j);
    knorm[j] = norm2(kj);
    if (knorm[j] < kZeroNormThreshold) throw ZeroVectorError("key " + std::to_string(j) + " is zero");
    cosv[j] = dot(in.q, kj) / (qn * knorm[j]);
    logit[j] = cosv[j] * inv_tau;
    max_logit = std::max(max_logit, logit[j]);
  }

  double num_s = 0.0, den_s = 0.0;
  double mass_matched = 0.0, mass_extra = 0.0, mass_boost = 0.0, mass_plain = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    const double e = std::exp(logit[j] - max_logit);
    const double w = boosted[j] ? 2.0 : 1.0;
    den_s += w * e;
    if (in_num[j]) num_s += e;
    const double raw = std::exp(logit[j]);  // reporting only; value stays stable above
    if (j == in.matched_index) mass_matched += raw;
    else if (in_num[j]) mass_extra += raw;
    else if (boosted[j]) mass_boost += raw;
    else mass_plain += raw;
  }

  LossValue out;
  out.value = std::log(den_s) - std::log(num_s);
  out.per_term_breakdown = {{"matched", mass_matched},
                            {"extra_pos", mass_extra},
                            {"boosted_neg", mass_boost},
                            {"plain_neg", mass_plain}};

  if (grad_q) {
    grad_q->assign(in.q.size(), 0.0);
    for (std::size_t j = 0; j < n; ++j) {
      const double e = std::exp(logit[j] - max_logit);
      const double w_den = (boosted[j] ? 2.0 : 1.0) * e / den_s;
      const double w_num = in_num[j] ? e / num_s : 0.0;
      const double dl_ds = (w_den - w_num) * inv_tau;
      if (dl_ds == 0.0) continue;
      const auto kj = keys.row(j);
      // d cos(q,k)/dq = (k/|k| - cos * q/|q|) / |q|
      for (std::size_t d = 0; d < in.q.size(); ++d) {
        (*grad_q)[d] += dl_ds * (kj[d] / knorm[j] - cosv[j] * in.q[d] / qn) / qn;
      }
    }
  }
  return out;
}

}  // namespace detail

/// Plain InfoNCE: one matched key against all other keys. The selection must
/// be empty.
inline LossValue infonce(const ContrastiveLossInput& in, FeatureVector* grad_q = nullptr) {
  if (!in.selection.empty()) throw SelectionNotEmptyError("infonce takes an empty selection");
  return detail::contrastive_eval(in, grad_q);
}

/// Extra positives joined into the numerator; they leave the plain-negative
/// sum. Reduces to infonce when the selection has no positives.
inline LossValue srcl_loss(const ContrastiveLossInput& in, FeatureVector* grad_q = nullptr) {
  if (!in.selection.negatives_boosted.empty())
    throw SelectionNotEmptyError("srcl_loss takes no boosted negatives");
  return detail::contrastive_eval(in, grad_q);
}

/// Boosted tail negatives appear twice in the denominator (the plain sum
/// keeps all N-1 keys). Reduces to infonce when the boosted set is empty.
inline LossValue nsam_loss(const ContrastiveLossInput& in, FeatureVector* grad_q = nullptr) {
  if (!in.selection.positives.empty())
    throw SelectionNotEmptyError("nsam_loss takes no extra positives");
  return detail::contrastive_eval(in, grad_q);
}

/// Epoch-scheduled combination: extra positives plus double-counted
/// middle-band negatives.
inline LossValue dynamic_loss(const ContrastiveLossInput& in, FeatureVector* grad_q = nullptr) {
  return detail::contrastive_eval(in, grad_q);
}

inline LossValue strategy_loss(Strategy s, const ContrastiveLossInput& in,
                               FeatureVector* grad_q = nullptr) {
  switch (s) {
    case Strategy::Baseline: return infonce(in, grad_q);
    case Strategy::SRCL: return srcl_loss(in, grad_q);
    case Strategy::NSam: return nsam_loss(in, grad_q);
    default: return dynamic_loss(in, grad_q);
  }
}

/// Mean per-anchor loss over a batch of aligned (query, key, original-key)
/// triples. Rankings come from the strategy's designated source: SRCL ranks
/// each original-key row against the augmented keys, NSam and Dynamic rank
/// original keys against each other. Key-side embeddings are constants; the
/// optional gradient is w.r.t. the query rows only (row-major N x D).
inline double batch_loss(const SamplingPlan& plan, int epoch, const EmbeddingBatch& queries,
                         const EmbeddingBatch& keys, const EmbeddingBatch& original_keys,
                         Temperature tau, std::vector<double>* grad_queries = nullptr) {
  if (queries.n != keys.n || queries.n != original_keys.n)
    throw DimensionMismatchError("batch_loss: batch sizes disagree");
  if (queries.dim != keys.dim || queries.dim != original_keys.dim)
    throw DimensionMismatchError("batch_loss: embedding dims disagree");
  const std::size_t n = queries.n;
  if (n < 2) throw Error("batch_loss: need at least 2 samples");

  SimilarityMatrix sims;
  const bool active = plan.strategy != Strategy::Baseline;
  if (active) {
    sims = plan.strategy == Strategy::SRCL ? similarity_matrix(original_keys, keys)
                                           : similarity_matrix(original_keys, original_keys);
  }

  if (grad_queries) grad_queries->assign(n * queries.dim, 0.0);
  double total = 0.0;
  FeatureVector g;
  for (std::size_t i = 0; i < n; ++i) {
    ContrastiveLossInput in;
    in.q.assign(queries.row(i).begin(), queries.row(i).end());
    in.keys = &keys;
    in.matched_index = i;
    in.tau = tau;
    if (active) in.selection = build_selection(plan, epoch, sims.row(i), i);
    const LossValue lv = strategy_loss(plan.strategy, in, grad_queries ? &g : nullptr);
    total += lv.value;
    if (grad_queries)
      for (std::size_t d = 0; d < queries.dim; ++d)
        (*grad_queries)[i * queries.dim + d] = g[d] / static_cast<double>(n);
  }
  return total / static_cast<double>(n);
}

}  // namespace cpath
