#include "cpath/core_math.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "cpath/rng.hpp"
#include "test_util.hpp"

using namespace cpath;

TEST(L2Normalize, HandValues) {
  const FeatureVector a = l2_normalize(std::vector<double>{3, 4});
  EXPECT_NEAR(a[0], 0.6, 1e-12);
  EXPECT_NEAR(a[1], 0.8, 1e-12);

  const FeatureVector b = l2_normalize(std::vector<double>{1, 0, 0});
  EXPECT_DOUBLE_EQ(b[0], 1.0);
  EXPECT_DOUBLE_EQ(b[1], 0.0);

  const FeatureVector c = l2_normalize(std::vector<double>{2, 2});
  EXPECT_NEAR(c[0], 0.70710678, 1e-8);
  EXPECT_NEAR(c[1], 0.70710678, 1e-8);
}

TEST(L2Normalize, ZeroVectorThrows) {
  EXPECT_THROW(l2_normalize(std::vector<double>{0, 0, 0}), ZeroVectorError);
  EXPECT_THROW(l2_normalize(std::vector<double>{1e-13, 0}), ZeroVectorError);
}

TEST(L2Normalize, UnitNormAndIdempotent) {
  Rng rng(11);
  for (int it = 0; it < 100; ++it) {
    FeatureVector v(5);
    for (auto& x : v) x = normal(rng) * 10;
    const auto n1 = l2_normalize(v);
    EXPECT_NEAR(norm2(n1), 1.0, 1e-6);
    const auto n2 = l2_normalize(n1);
    for (std::size_t d = 0; d < v.size(); ++d) EXPECT_NEAR(n1[d], n2[d], 1e-7);
  }
}

TEST(CosineSim, HandValues) {
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{0, 1}), 0.0, 1e-12);
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 0}, std::vector<double>{-1, 0}), -1.0, 1e-12);
  EXPECT_NEAR(cosine_sim(std::vector<double>{1, 1}, std::vector<double>{1, 0}), 0.70710678, 1e-8);
}

TEST(CosineSim, ScaleInvariance) {
  Rng rng(12);
  for (int it = 0; it < 100; ++it) {
    FeatureVector a(6), b(6);
    for (auto& x : a) x = normal(rng);
    for (auto& x : b) x = normal(rng);
    const double base = cosine_sim(a, b);
    const double alpha = uniform_real(rng, 0.01, 30.0);
    const double beta = uniform_real(rng, 0.01, 30.0);
    FeatureVector sa = a, sb = b;
    for (auto& x : sa) x *= alpha;
    for (auto& x : sb) x *= beta;
    EXPECT_NEAR(cosine_sim(sa, sb), base, 1e-7);
  }
}

TEST(CosineSim, Errors) {
  EXPECT_THROW(cosine_sim(std::vector<double>{0, 0}, std::vector<double>{1, 0}), ZeroVectorError);
  EXPECT_THROW(cosine_sim(std::vector<double>{1, 0, 0}, std::vector<double>{1, 0}),
               DimensionMismatchError);
}

TEST(Psi, HandValues) {
  const FeatureVector x{0.6, 0.8};
  EXPECT_NEAR(psi(x, x, Temperature(1.0)), std::exp(1.0), 1e-9);
  EXPECT_NEAR(psi(std::vector<double>{1, 0}, std::vector<double>{0, 1}, Temperature(0.2)), 1.0,
              1e-12);
  EXPECT_NEAR(psi(x, x, Temperature(0.2)), 148.4131591, 1e-6);
}

TEST(Psi, MonotoneInSimilarityAndTau) {
  // Higher similarity -> larger psi at fixed tau; larger tau -> smaller psi
  // when the similarity is positive.
  const FeatureVector q{1, 0};
  const FeatureVector near{0.9, std::sqrt(1 - 0.81)};
  const FeatureVector far{0.5, std::sqrt(0.75)};
  EXPECT_GT(psi(q, near, Temperature(0.3)), psi(q, far, Temperature(0.3)));
  EXPECT_GT(psi(q, near, Temperature(0.2)), psi(q, near, Temperature(0.4)));
}

TEST(Psi, InvalidTemperature) {
  EXPECT_THROW(Temperature(0.0), Error);
  EXPECT_THROW(Temperature(-0.1), Error);
}

TEST(SimilarityMatrix, IdentityBasis) {
  EmbeddingBatch b(3, 3);
  for (int i = 0; i < 3; ++i) b.data[i * 3 + i] = 1.0;
  const auto m = similarity_matrix(b, b);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) EXPECT_NEAR(m.at(i, j), i == j ? 1.0 : 0.0, 1e-12);
}

TEST(SimilarityMatrix, SelfSymmetricUnitDiagonal) {
  Rng rng(13);
  const auto b = test_util::random_batch(6, 5, rng);
  const auto m = similarity_matrix(b, b);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_NEAR(m.at(i, i), 1.0, 1e-9);
    for (std::size_t j = 0; j < 6; ++j) {
      EXPECT_NEAR(m.at(i, j), m.at(j, i), 1e-7);
      EXPECT_LE(std::abs(m.at(i, j)), 1.0 + 1e-6);
    }
  }
}

TEST(SimilarityMatrix, MatchesPairwiseLoopOracle) {
  Rng rng(14);
  const auto b = test_util::random_batch(4, 8, rng);
  const auto m = similarity_matrix(b, b);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j)
      EXPECT_NEAR(m.at(i, j), test_util::oracle_cos(b.row(i), b.row(j)), 1e-12);
}

TEST(SimilarityMatrix, DimensionMismatch) {
  EmbeddingBatch a(2, 3), b(2, 4);
  for (auto& x : a.data) x = 1.0;
  for (auto& x : b.data) x = 1.0;
  EXPECT_THROW(similarity_matrix(a, b), DimensionMismatchError);
}

TEST(SimilarityMatrix, RoleTagsCarried) {
  Rng rng(15);
  auto q = test_util::random_batch(2, 4, rng, true, Role::OriginalKey);
  auto k = test_util::random_batch(3, 4, rng, true, Role::Key);
  const auto m = similarity_matrix(q, k);
  EXPECT_EQ(m.row_role, Role::OriginalKey);
  EXPECT_EQ(m.col_role, Role::Key);
  EXPECT_EQ(m.rows, 2u);
  EXPECT_EQ(m.cols, 3u);
}
