#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <random>

#include "knnlm/ann_index.hpp"
#include "knnlm/knn_distribution.hpp"

using namespace knnlm;

namespace {

std::vector<NeighborHit> random_hits(std::mt19937_64& rng, std::size_t n, std::uint32_t vocab) {
  std::uniform_real_distribution<double> dist(0.0, 4.0);
  std::uniform_int_distribution<std::uint32_t> tok(0, vocab - 1);
  std::uniform_int_distribution<int> w(1, 5);
  std::vector<NeighborHit> hits(n);
  for (std::size_t i = 0; i < n; ++i) hits[i] = {static_cast<std::uint32_t>(i), dist(rng), tok(rng), float(w(rng))};
  return hits;
}

}  // namespace

TEST(KnnDistribution, SumsToOneOnRandomSets) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const auto hits = random_hits(rng, 1 + rng() % 64, 20);
    EXPECT_NEAR(knn_distribution(hits).total(), 1.0, 1e-12);
    EXPECT_NEAR(weighted_knn_distribution(hits).total(), 1.0, 1e-12);
  }
}

TEST(KnnDistribution, MatchesDirectSoftmaxOracle) {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const auto hits = random_hits(rng, 1 + rng() % 32, 8);
    std::map<TokenId, double> mass;
    double z = 0.0;
    for (const auto& h : hits) {
      mass[h.value] += h.weight * std::exp(-h.distance);
      z += h.weight * std::exp(-h.distance);
    }
    const auto p = weighted_knn_distribution(hits);
    ASSERT_EQ(p.entries.size(), mass.size());
    for (const auto& [tok, m] : mass) EXPECT_NEAR(p.prob(tok), m / z, 1e-12);
  }
}

TEST(KnnDistribution, SingleTokenGetsAllMass) {
  std::vector<NeighborHit> hits{{0, 0.5, 3, 1.0f}, {1, 1.5, 3, 1.0f}, {2, 2.0, 3, 1.0f}};
  EXPECT_DOUBLE_EQ(knn_distribution(hits).prob(3), 1.0);
  EXPECT_DOUBLE_EQ(knn_distribution(hits).prob(4), 0.0);
}

TEST(KnnDistribution, DuplicationEqualsWeight) {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 100; ++trial) {
    const auto weighted = random_hits(rng, 1 + rng() % 16, 6);
    std::vector<NeighborHit> expanded;
    for (const auto& h : weighted) {
      for (int c = 0; c < int(h.weight); ++c) expanded.push_back({h.id, h.distance, h.value, 1.0f});
    }
    const auto a = weighted_knn_distribution(weighted);
    const auto b = knn_distribution(expanded);
    ASSERT_EQ(a.entries.size(), b.entries.size());
    for (std::size_t i = 0; i < a.entries.size(); ++i) {
      EXPECT_EQ(a.entries[i].first, b.entries[i].first);
      EXPECT_NEAR(a.entries[i].second, b.entries[i].second, 1e-12);
    }
  }
}

TEST(KnnDistribution, UnitWeightsReduceToUnweighted) {
  std::mt19937_64 rng(14);
  auto hits = random_hits(rng, 40, 10);
  for (auto& h : hits) h.weight = 1.0f;
  const auto a = weighted_knn_distribution(hits);
  const auto b = knn_distribution(hits);
  ASSERT_EQ(a.entries.size(), b.entries.size());
  for (std::size_t i = 0; i < a.entries.size(); ++i) EXPECT_EQ(a.entries[i], b.entries[i]);
}

TEST(KnnDistribution, LargeDistancesStayFinite) {
  std::vector<NeighborHit> hits{{0, 1000.0, 1, 1.0f}, {1, 1001.0, 2, 1.0f}};
  const auto p = knn_distribution(hits);
  EXPECT_NEAR(p.prob(1), 1.0 / (1.0 + std::exp(-1.0)), 1e-12);
}

TEST(KnnDistribution, RejectsEmptyAndBadInput) {
  EXPECT_THROW(knn_distribution(std::vector<NeighborHit>{}), InvalidInput);
  std::vector<NeighborHit> nan_hit{{0, std::nan(""), 1, 1.0f}};
  EXPECT_THROW(knn_distribution(nan_hit), InvalidInput);
  std::vector<NeighborHit> zero_weights{{0, 1.0, 1, 0.0f}};
  EXPECT_THROW(weighted_knn_distribution(zero_weights), InvalidInput);
}

TEST(Interpolate, EndpointsCollapseExactly) {
  SparseDist knn{{{1, 0.25}, {3, 0.75}}};
  DenseDist nlm{0.1, 0.2, 0.3, 0.4};
  EXPECT_EQ(interpolate(knn, nlm, 0.0), nlm);
  EXPECT_EQ(interpolate(knn, nlm, 1.0), (DenseDist{0.0, 0.25, 0.0, 0.75}));
}

TEST(Interpolate, MixesAndSumsToOne) {
  SparseDist knn{{{0, 1.0}}};
  DenseDist nlm{0.5, 0.5};
  const auto p = interpolate(knn, nlm, 0.25);
  EXPECT_DOUBLE_EQ(p[0], 0.625);
  EXPECT_DOUBLE_EQ(p[1], 0.375);
  EXPECT_DOUBLE_EQ(interpolate_token(1.0, 0.5, 0.25), 0.625);
}

TEST(Interpolate, RejectsLambdaOutsideUnitInterval) {
  SparseDist knn{{{0, 1.0}}};
  EXPECT_THROW(interpolate(knn, DenseDist{1.0}, 1.5), InvalidInput);
  EXPECT_THROW(interpolate_token(0.5, 0.5, -0.1), InvalidInput);
}
