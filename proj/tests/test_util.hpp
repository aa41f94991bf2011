#pragma once

// Shared test helpers: deterministic random batches and the naive
// enumeration oracle the loss implementations are checked against. The
// oracle deliberately mirrors the written formulas term by term and knows
// nothing about the library's stabilized evaluation path.

#include <cmath>
#include <cstddef>
#include <set>
#include <span>
#include <vector>

#include "cpath/core_math.hpp"
#include "cpath/rng.hpp"
#include "cpath/sampling.hpp"

namespace test_util {

inline cpath::EmbeddingBatch random_batch(std::size_t n, std::size_t dim, cpath::Rng& rng,
                                          bool normalize = true,
                                          cpath::Role role = cpath::Role::Key) {
  cpath::EmbeddingBatch b(n, dim, role);
  for (std::size_t i = 0; i < n; ++i) {
    double nrm = 0.0;
    for (std::size_t d = 0; d < dim; ++d) {
      b.data[i * dim + d] = cpath::normal(rng);
      nrm += b.data[i * dim + d] * b.data[i * dim + d];
    }
    if (normalize) {
      nrm = std::sqrt(nrm);
      for (std::size_t d = 0; d < dim; ++d) b.data[i * dim + d] /= nrm;
    }
  }
  return b;
}

inline double oracle_cos(std::span<const double> a, std::span<const double> b) {
  double ab = 0, aa = 0, bb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  return ab / (std::sqrt(aa) * std::sqrt(bb));
}

// Naive evaluation of the loss family: enumerate the three index sets
// explicitly, sum raw exp terms in 64-bit, take -log(num/den). Boosted
// negatives stay in the plain sum and are added once more on top; extra
// positives leave the plain sum.
inline double oracle_loss(std::span<const double> q, const cpath::EmbeddingBatch& keys,
                          std::size_t matched, const std::vector<std::size_t>& positives,
                          const std::vector<std::size_t>& boosted, double tau) {
  auto psi = [&](std::size_t j) { return std::exp(oracle_cos(q, keys.row(j)) / tau); };
  std::set<std::size_t> pos(positives.begin(), positives.end());
  pos.insert(matched);
  double num = 0.0;
  for (std::size_t j : pos) num += psi(j);
  double den = num;
  for (std::size_t j = 0; j < keys.n; ++j)
    if (!pos.count(j)) den += psi(j);
  for (std::size_t j : boosted) den += psi(j);
  return -std::log(num / den);
}

}  // namespace test_util
