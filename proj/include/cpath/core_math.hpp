#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "cpath/errors.hpp"

namespace cpath {

// Shared numeric primitives: normalization, cosine similarity, the
// exp(sim/tau) kernel and batch similarity matrices. Everything here is a
// pure function over 64-bit floats.

using FeatureVector = std::vector<double>;

inline constexpr double kZeroNormThreshold = 1e-12;

/// Role tag for embedding batches: which branch of the twin-encoder
/// protocol produced the rows.
enum class Role { Query, Key, OriginalKey };

inline std::string role_name(Role r) {
  switch (r) {
    case Role::Query: return "query";
    case Role::Key: return "key";
    default: return "original-key";
  }
}

/// Row-major batch of N embedding vectors of dimension D.
struct EmbeddingBatch {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::vector<double> data;  // n * dim, row-major
  Role role = Role::Key;

  EmbeddingBatch() = default;
  EmbeddingBatch(std::size_t n_, std::size_t dim_, Role role_ = Role::Key)
      : n(n_), dim(dim_), data(n_ * dim_, 0.0), role(role_) {}

  std::span<double> row(std::size_t i) { return {data.data() + i * dim, dim}; }
  std::span<const double> row(std::size_t i) const { return {data.data() + i * dim, dim}; }
};

/// N x M cosine-similarity matrix with the roles of its two sides.
struct SimilarityMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> entries;  // row-major
  Role row_role = Role::Key;
  Role col_role = Role::Key;

  double at(std::size_t i, std::size_t j) const { return entries[i * cols + j]; }
  std::span<const double> row(std::size_t i) const { return {entries.data() + i * cols, cols}; }
};

/// Positive temperature for the psi kernel.
struct Temperature {
  double tau;
  explicit Temperature(double t) : tau(t) {
    if (!(t > 0.0)) throw Error("temperature must be positive, got " + std::to_string(t));
  }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> v) {
  return std::sqrt(dot(v, v));
}

/// Scale to unit Euclidean norm. Throws ZeroVectorError below 1e-12.
inline FeatureVector l2_normalize(std::span<const double> v) {
  const double n = norm2(v);
  if (n < kZeroNormThreshold) throw ZeroVectorError();
  FeatureVector out(v.begin(), v.end());
  for (double& x : out) x /= n;
  return out;
}

/// dot(a,b) / (|a||b|), in [-1, 1].
inline double cosine_sim(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionMismatchError("cosine_sim: dims " + std::to_string(a.size()) + " vs " +
                                 std::to_string(b.size()));
  const double na = norm2(a), nb = norm2(b);
  if (na < kZeroNormThreshold || nb < kZeroNormThreshold) throw ZeroVectorError();
  return dot(a, b) / (na * nb);
}

/// exp(cosine_sim(a,b) / tau). Literal kernel; loss code stabilizes sums in
/// the log domain instead of calling this.
inline double psi(std::span<const double> a, std::span<const double> b, Temperature tau) {
  return std::exp(cosine_sim(a, b) / tau.tau);
}

/// Pairwise cosine similarities between two batches of equal dimension.
inline SimilarityMatrix similarity_matrix(const EmbeddingBatch& rows, const EmbeddingBatch& cols) {
  if (rows.dim != cols.dim)
    throw DimensionMismatchError("similarity_matrix: dims " + std::to_string(rows.dim) + " vs " +
                                 std::to_string(cols.dim));
  SimilarityMatrix out;
  out.rows = rows.n;
  out.cols = cols.n;
  out.row_role = rows.role;
  out.col_role = cols.role;
  out.entries.resize(rows.n * cols.n);
  for (std::size_t i = 0; i < rows.n; ++i)
    for (std::size_t j = 0; j < cols.n; ++j)
      out.entries[i * cols.n + j] = cosine_sim(rows.row(i), cols.row(j));
  return out;
}

}  // namespace cpath
