#include <gtest/gtest.h>

#include <random>
#include <set>

#include "knnlm/ann_index.hpp"
#include "oracles.hpp"

using namespace knnlm;

namespace {

std::vector<float> random_query(std::size_t dim, std::mt19937_64& rng) {
  std::normal_distribution<float> g(0.0f, 1.0f);
  std::vector<float> q(dim);
  for (auto& x : q) x = g(rng);
  return q;
}

void expect_matches_oracle(const std::vector<NeighborHit>& got, const std::vector<oracle::Hit>& want) {
  ASSERT_EQ(got.size(), want.size());
  for (std::size_t i = 0; i < got.size(); ++i) {
    EXPECT_EQ(got[i].id, want[i].id);
    EXPECT_NEAR(got[i].distance, want[i].distance, 1e-5 * std::max(1.0, want[i].distance));
  }
}

}  // namespace

TEST(FlatSearch, MatchesBruteForceScan) {
  std::mt19937_64 rng(21);
  const auto ds = oracle::random_store(200, 16, 30, rng);
  for (int q = 0; q < 20; ++q) {
    const auto query = random_query(16, rng);
    expect_matches_oracle(flat_search(ds, query, 10), oracle::brute_force_knn(ds, query, 10));
  }
}

TEST(FlatSearch, SelfMatchIsRankOneAtZero) {
  std::mt19937_64 rng(22);
  const auto ds = oracle::random_store(50, 8, 5, rng);
  const auto hits = flat_search(ds, ds.key(17), 3);
  EXPECT_EQ(hits[0].id, 17u);
  EXPECT_EQ(hits[0].distance, 0.0);
}

TEST(FlatSearch, KBeyondSizeReturnsAll) {
  std::mt19937_64 rng(23);
  const auto ds = oracle::random_store(7, 4, 3, rng);
  const auto hits = flat_search(ds, random_query(4, rng), 100);
  EXPECT_EQ(hits.size(), 7u);
  for (std::size_t i = 1; i < hits.size(); ++i) EXPECT_LE(hits[i - 1].distance, hits[i].distance);
}

TEST(FlatSearch, TiesGoToLowerId) {
  const auto ds = oracle::make_store(2, {1, 0, 0, 1, -1, 0, 0, -1}, {0, 1, 2, 3});
  const std::vector<float> origin{0, 0};
  const auto hits = flat_search(ds, origin, 4);
  for (std::uint32_t i = 0; i < 4; ++i) EXPECT_EQ(hits[i].id, i);
}

TEST(FlatSearch, RejectsDimensionMismatch) {
  std::mt19937_64 rng(24);
  const auto ds = oracle::random_store(10, 4, 3, rng);
  EXPECT_THROW(flat_search(ds, std::vector<float>(3, 0.0f), 1), InvalidInput);
}

TEST(IvfSearch, FullProbeEqualsFlatSearch) {
  std::mt19937_64 rng(25);
  const auto ds = oracle::random_store(600, 12, 10, rng);
  IvfOptions opts;
  opts.nlist = 16;
  opts.seed = 3;
  const auto index = build_ivf(ds, opts);
  for (int q = 0; q < 20; ++q) {
    const auto query = random_query(12, rng);
    const auto a = ivf_search(index, ds, query, 15, index.nlist);
    const auto b = flat_search(ds, query, 15);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      EXPECT_EQ(a[i].id, b[i].id);
      EXPECT_EQ(a[i].distance, b[i].distance);
    }
  }
}

TEST(IvfSearch, SingleProbeStaysInNearestList) {
  std::mt19937_64 rng(26);
  const auto ds = oracle::random_store(400, 8, 10, rng);
  IvfOptions opts;
  opts.nlist = 10;
  const auto index = build_ivf(ds, opts);
  const auto query = random_query(8, rng);
  std::size_t best = 0;
  double best_d = 1e300;
  for (std::size_t l = 0; l < index.nlist; ++l) {
    const double d = squared_l2(query, std::span<const float>(index.centroids.data() + l * 8, 8));
    if (d < best_d) best_d = d, best = l;
  }
  const auto members = index.list(best);
  const std::set<std::uint32_t> in_list(members.begin(), members.end());
  for (const auto& h : ivf_search(index, ds, query, 20, 1)) EXPECT_TRUE(in_list.count(h.id));
}

TEST(IvfSearch, EveryRecordInExactlyOneList) {
  std::mt19937_64 rng(27);
  const auto ds = oracle::random_store(300, 6, 4, rng);
  IvfOptions opts;
  opts.nlist = 12;
  const auto index = build_ivf(ds, opts);
  std::vector<int> seen(ds.size(), 0);
  for (auto id : index.list_ids) ++seen[id];
  for (int s : seen) EXPECT_EQ(s, 1);
}

TEST(IvfSearch, RetrieverAgreesWithIvfSearch) {
  std::mt19937_64 rng(28);
  const auto ds = oracle::random_store(500, 16, 10, rng);
  IvfOptions opts;
  opts.nlist = 20;
  const auto index = build_ivf(ds, opts);
  IvfRetriever r(ds, index, 4);
  for (int q = 0; q < 10; ++q) {
    const auto query = random_query(16, rng);
    const auto a = r.search(query, 12);
    const auto b = ivf_search(index, ds, query, 12, 4);
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].id, b[i].id);
  }
  EXPECT_EQ(r.query_count(), 10u);
}

TEST(IvfSearch, TrainingIsDeterministic) {
  std::mt19937_64 rng(29);
  const auto ds = oracle::random_store(300, 8, 4, rng);
  IvfOptions opts;
  opts.nlist = 8;
  opts.seed = 5;
  EXPECT_EQ(serialize_index(build_ivf(ds, opts)), serialize_index(build_ivf(ds, opts)));
}

TEST(IvfIndexFile, RoundTripsAndRejectsCorruption) {
  std::mt19937_64 rng(30);
  const auto ds = oracle::random_store(200, 8, 4, rng);
  IvfOptions opts;
  opts.nlist = 6;
  opts.pq_m = 4;
  opts.pq_bits = 4;
  const auto bytes = serialize_index(build_ivf(ds, opts));
  EXPECT_EQ(serialize_index(deserialize_index(bytes)), bytes);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_index(bad), FormatError);
  EXPECT_THROW(deserialize_index(std::span<const char>(bytes.data(), bytes.size() / 2)), FormatError);
}

TEST(ProductQuantizer, LosslessWhenEverySubValueIsACodeword) {
  // Four distinct values per coordinate and 16 codewords per one-dimensional sub-space.
  std::vector<float> keys;
  const float levels[4] = {-1.5f, -0.25f, 0.5f, 2.0f};
  for (int i = 0; i < 64; ++i) {
    for (int j = 0; j < 4; ++j) keys.push_back(levels[(i >> (j % 3)) & 3]);
  }
  const auto cb = train_pq(keys, 64, 4, 4, 4, 1);
  std::mt19937_64 rng(31);
  const auto query = random_query(4, rng);
  for (int i = 0; i < 64; ++i) {
    std::span<const float> key(keys.data() + i * 4, 4);
    EXPECT_NEAR(pq_distance(cb, cb.encode(key), query), squared_l2(key, query), 1e-5);
  }
}

TEST(ProductQuantizer, DecodedQueryIsAtZero) {
  std::mt19937_64 rng(32);
  const auto ds = oracle::random_store(300, 8, 4, rng);
  const auto cb = train_pq(ds.keys(), ds.size(), 8, 2, 8, 1);
  const auto code = cb.encode(ds.key(5));
  EXPECT_NEAR(pq_distance(cb, code, cb.decode(code)), 0.0, 1e-9);
}

TEST(ProductQuantizer, MoreBitsLowerError) {
  std::mt19937_64 rng(33);
  const auto ds = oracle::random_store(2000, 16, 4, rng);
  const auto cb4 = train_pq(ds.keys(), ds.size(), 16, 4, 4, 1);
  const auto cb8 = train_pq(ds.keys(), ds.size(), 16, 4, 8, 1);
  double err4 = 0.0, err8 = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const auto q = random_query(16, rng);
    const auto key = ds.key(i);
    const double exact = squared_l2(key, q);
    err4 += std::abs(pq_distance(cb4, cb4.encode(key), q) - exact);
    err8 += std::abs(pq_distance(cb8, cb8.encode(key), q) - exact);
  }
  EXPECT_LT(err8, err4);
}

TEST(ProductQuantizer, RejectsBadShapes) {
  std::vector<float> keys(40, 0.5f);
  EXPECT_THROW(train_pq(keys, 4, 10, 3, 8, 1), InvalidInput);
  EXPECT_THROW(train_pq(keys, 4, 10, 5, 6, 1), InvalidInput);
}
