#include <gtest/gtest.h>

#include <numeric>
#include <random>

#include "knnlm/pruning.hpp"
#include "checks.hpp"
#include "oracles.hpp"

using namespace knnlm;

namespace {

Datastore line_store(const std::vector<float>& x, const std::vector<TokenId>& values) {
  return oracle::make_store(1, x, values);
}

double total_weight(const Datastore& ds) {
  return std::accumulate(ds.weights().begin(), ds.weights().end(), 0.0);
}

}  // namespace

TEST(GreedyMerge, MatchesHandTraces) {
  for (const auto& c : checks::hand_traced_gm_cases()) {
    SCOPED_TRACE(c.name);
    const auto ds = line_store(c.x, c.values);
    std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;
    const auto out = greedy_merge(ds, NeighborSource{}, c.K, 1, &merges);
    EXPECT_EQ(checks::survivors(ds, out), c.survivors);
    EXPECT_EQ(merges, c.merges);
    EXPECT_EQ(total_weight(out), double(c.x.size()));
  }
}

TEST(GreedyMerge, DistinctTokensAreUntouched) {
  std::mt19937_64 rng(41);
  auto ds = oracle::random_store(30, 4, 1, rng);
  std::vector<TokenId> values(30);
  std::iota(values.begin(), values.end(), 0);
  ds = Datastore(4, ds.keys(), values, ds.weights(), "distinct");
  const auto out = greedy_merge(ds, NeighborSource{}, 10);
  EXPECT_EQ(out.keys(), ds.keys());
  EXPECT_EQ(out.values(), ds.values());
  EXPECT_EQ(out.weights(), ds.weights());
}

TEST(GreedyMerge, ConservesWeightOnRandomStores) {
  std::mt19937_64 rng(42);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20 + rng() % 200;
    const auto ds = oracle::random_store(n, 1 + rng() % 8, 1 + rng() % 6, rng);
    const auto out = greedy_merge(ds, NeighborSource{}, 2 + rng() % 10);
    EXPECT_EQ(total_weight(out), double(n));
    for (float w : out.weights()) EXPECT_EQ(w, std::floor(w));
  }
}

TEST(GreedyMerge, AbsorbedRecordsWereAmongAbsorberNeighbors) {
  std::mt19937_64 rng(43);
  const auto ds = oracle::random_store(300, 6, 3, rng);
  std::vector<std::pair<std::uint32_t, std::uint32_t>> merges;
  greedy_merge(ds, NeighborSource{}, 6, 1, &merges);
  for (auto [i, t] : merges) {
    const auto hits = oracle::brute_force_knn(ds, ds.key(i), 6);
    EXPECT_TRUE(std::any_of(hits.begin(), hits.end(), [&](const oracle::Hit& h) { return h.id == t; }));
  }
}

TEST(GreedyMerge, ListVariantMatchesAndRetentionFallsWithK) {
  std::mt19937_64 rng(44);
  const auto ds = oracle::random_store(400, 4, 5, rng);
  const auto lists = neighbor_lists(ds, NeighborSource{}, 20);
  std::size_t previous = ds.size();
  for (std::size_t K = 2; K <= 20; K += 3) {
    const auto a = greedy_merge(ds, NeighborSource{}, K);
    const auto b = greedy_merge_lists(ds, lists, K);
    EXPECT_EQ(a.keys(), b.keys());
    EXPECT_EQ(a.weights(), b.weights());
    EXPECT_LE(a.size(), previous);
    previous = a.size();
  }
}

TEST(GreedyMerge, RetentionTargetPicksSmallestK) {
  std::mt19937_64 rng(45);
  const auto ds = oracle::random_store(500, 4, 4, rng);
  const auto lists = neighbor_lists(ds, NeighborSource{}, 30);
  const std::size_t K = gm_k_for_retention(ds, lists, 0.6, 30);
  EXPECT_LE(double(greedy_merge_lists(ds, lists, K).size()), 0.6 * 500);
  if (K > 2) EXPECT_GT(double(greedy_merge_lists(ds, lists, K - 1).size()), 0.6 * 500);
}

TEST(GreedyMerge, ThreadCountDoesNotChangeOutput) {
  std::mt19937_64 rng(46);
  const auto ds = oracle::random_store(1500, 8, 6, rng);
  const auto a = greedy_merge(ds, NeighborSource{}, 8, 1);
  const auto b = greedy_merge(ds, NeighborSource{}, 8, 4);
  EXPECT_TRUE(a == b);
}

TEST(GreedyMerge, RejectsSmallK) {
  const auto ds = line_store({0.0f, 1.0f}, {1, 1});
  EXPECT_THROW(greedy_merge(ds, NeighborSource{}, 1), InvalidInput);
}

TEST(ImportanceScores, MatchRankTallyOracle) {
  std::mt19937_64 rng(47);
  const auto ds = oracle::random_store(50, 8, 5, rng);
  const auto queries = oracle::random_store(50, 8, 5, rng).keys();
  for (std::size_t k : {1, 5, 17, 50}) {
    const auto got = importance_scores(ds, NeighborSource{}, queries, k);
    const auto want = oracle::rank_tally(ds, queries, 50, k);
    for (std::size_t i = 0; i < ds.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-12);
  }
}

TEST(ImportanceScores, RankOneHitsCountQueries) {
  const auto ds = line_store({0.0f, 10.0f, 20.0f}, {1, 2, 3});
  const std::vector<float> queries{0.1f, -0.1f, 0.2f};
  const auto g = importance_scores(ds, NeighborSource{}, queries, 1);
  EXPECT_EQ(g, (std::vector<double>{3.0, 0.0, 0.0}));
}

TEST(ImportanceScores, SelfHitIsExcluded) {
  const auto ds = line_store({0.0f, 1.0f, 3.0f}, {1, 1, 1});
  // Self queries with k = 2: 0 -> [0, 1], 1 -> [1, 0], 2 -> [2, 1].
  const auto g = self_importance_scores(ds, NeighborSource{}, 2);
  EXPECT_EQ(g, (std::vector<double>{0.5, 1.0, 0.0}));
}

TEST(RankPrune, KeepsTopScoresInIdOrder) {
  const auto ds = line_store({0.0f, 1.0f, 2.0f}, {1, 2, 3});
  const std::vector<double> scores{3, 2, 1};
  const auto out = rank_prune(ds, scores, 2.0 / 3.0);
  EXPECT_EQ(out.values(), (std::vector<TokenId>{1, 2}));
  EXPECT_EQ(rank_prune(ds, scores, 1.0).keys(), ds.keys());
  EXPECT_THROW(rank_prune(ds, std::vector<double>{1, 2}, 0.5), InvalidInput);
}

TEST(RankPrune, MatchesSortOracleWithTies) {
  std::mt19937_64 rng(48);
  std::vector<float> x(100);
  std::vector<TokenId> v(100);
  std::vector<double> scores(100);
  for (int i = 0; i < 100; ++i) {
    x[i] = float(i);
    v[i] = TokenId(i);
    scores[i] = double(rng() % 7);
  }
  const auto ds = line_store(x, v);
  std::vector<std::size_t> order(100);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] > scores[b]; });
  order.resize(37);
  std::sort(order.begin(), order.end());
  const auto out = rank_prune(ds, scores, 0.37);
  ASSERT_EQ(out.size(), 37u);
  for (std::size_t j = 0; j < 37; ++j) EXPECT_EQ(out.value(j), order[j]);
}

TEST(RandomPrune, KeepsCeilFractionInIdOrder) {
  std::mt19937_64 rng(49);
  const auto ds = oracle::random_store(101, 4, 200, rng);
  const auto out = random_prune(ds, 0.5, 9);
  EXPECT_EQ(out.size(), 51u);
  EXPECT_TRUE(out == random_prune(ds, 0.5, 9));
  EXPECT_EQ(retain_count(0.6, 10), 6u);
  EXPECT_EQ(retain_count(1.0, 10), 10u);
}

TEST(KmeansPrune, IdenticalKeysCollapseToOneRecord) {
  std::vector<float> keys;
  for (int i = 0; i < 20; ++i) keys.insert(keys.end(), {0.25f, -0.5f, 1.0f});
  const auto ds = oracle::make_store(3, keys, std::vector<TokenId>(20, 4));
  const auto out = kmeans_prune(ds, 1, 1.0 / 20.0, 1);
  ASSERT_EQ(out.size(), 1u);
  EXPECT_EQ(out.weight(0), 20.0f);
  EXPECT_EQ(out.value(0), 4u);
  EXPECT_EQ(std::vector<float>(out.key(0).begin(), out.key(0).end()), (std::vector<float>{0.25f, -0.5f, 1.0f}));
}

TEST(KmeansPrune, ConservesWeightAndPassesRareTokensThrough) {
  std::mt19937_64 rng(50);
  const auto ds = oracle::random_store(600, 6, 12, rng);
  const auto out = kmeans_prune(ds, 3, 0.1, 2);
  EXPECT_EQ(total_weight(out), 600.0);
  EXPECT_LT(out.size(), ds.size());
}
