#include <gtest/gtest.h>

#include <filesystem>
#include <cstring>
#include <numeric>
#include <random>

#include "knnlm/datastore.hpp"
#include "knnlm/kmeans.hpp"
#include "oracles.hpp"

using namespace knnlm;

namespace {

Corpus random_corpus(std::mt19937_64& rng, std::size_t docs, std::size_t vocab) {
  Corpus c(docs);
  for (auto& d : c) {
    d.resize(1 + rng() % 30);
    for (auto& t : d) t = 2 + TokenId(rng() % (vocab - 2));
  }
  return c;
}

}  // namespace

TEST(Datastore, OneRecordPerTokenWithEncodedContext) {
  std::mt19937_64 rng(81);
  const auto corpus = random_corpus(rng, 12, 40);
  const ContextEncoder enc(40, 8, 0.5, 4, 2);
  const auto ds = build_datastore(corpus, enc);
  ASSERT_EQ(ds.size(), token_count(corpus));
  std::size_t row = 0;
  for (const auto& doc : corpus) {
    for (std::size_t t = 0; t < doc.size(); ++t, ++row) {
      EXPECT_EQ(ds.value(row), doc[t]);
      EXPECT_EQ(ds.weight(row), 1.0f);
      const auto want = enc.encode(std::span<const TokenId>(doc.data(), t));
      EXPECT_TRUE(std::equal(want.begin(), want.end(), ds.key(row).begin()));
    }
  }
  EXPECT_TRUE(ds == build_datastore(corpus, enc));
}

TEST(Datastore, SerializationRoundTrips) {
  std::mt19937_64 rng(82);
  auto ds = oracle::random_store(50, 6, 9, rng);
  EXPECT_TRUE(deserialize_datastore(serialize_datastore(ds)) == ds);
  std::vector<float> w(50);
  for (auto& x : w) x = float(1 + rng() % 4);
  const Datastore weighted(6, ds.keys(), ds.values(), w, "weighted");
  EXPECT_TRUE(deserialize_datastore(serialize_datastore(weighted)) == weighted);
  const auto path = (std::filesystem::temp_directory_path() / "knnlm_ds_test.knnd").string();
  save_datastore(weighted, path);
  EXPECT_TRUE(load_datastore(path) == weighted);
  std::filesystem::remove(path);
}

TEST(Datastore, HalfPrecisionKeysAreClose) {
  std::mt19937_64 rng(83);
  const auto ds = oracle::random_store(40, 8, 5, rng, true);
  const auto half = deserialize_datastore(serialize_datastore(ds, true));
  EXPECT_EQ(half.values(), ds.values());
  for (std::size_t i = 0; i < ds.keys().size(); ++i) EXPECT_NEAR(half.keys()[i], ds.keys()[i], 1e-3);
  EXPECT_LT(serialize_datastore(ds, true).size(), serialize_datastore(ds).size());
}

TEST(Datastore, HeaderLayoutAndCorruption) {
  std::mt19937_64 rng(84);
  const auto ds = oracle::random_store(3, 2, 5, rng);
  const auto bytes = serialize_datastore(ds);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 4), "KNND");
  std::uint32_t dim = 0;
  std::uint64_t count = 0;
  std::memcpy(&dim, bytes.data() + 8, 4);
  std::memcpy(&count, bytes.data() + 12, 8);
  EXPECT_EQ(dim, 2u);
  EXPECT_EQ(count, 3u);
  auto bad = bytes;
  bad[1] = 'Z';
  EXPECT_THROW(deserialize_datastore(bad), FormatError);
  EXPECT_THROW(deserialize_datastore(std::span<const char>(bytes.data(), 30)), FormatError);
}

TEST(Datastore, SubsetAndStats) {
  std::mt19937_64 rng(85);
  const auto ds = oracle::random_store(10, 3, 4, rng);
  const std::vector<std::size_t> ids{7, 2};
  const auto sub = ds.subset(ids, "pick");
  EXPECT_EQ(sub.size(), 2u);
  EXPECT_EQ(sub.value(0), ds.value(7));
  EXPECT_NE(sub.provenance().find("pick"), std::string::npos);
  const auto stats = datastore_stats(ds);
  EXPECT_EQ(stats.count, 10u);
  EXPECT_EQ(stats.total_weight, 10.0);
  std::size_t hist = 0;
  for (const auto& [tok, c] : stats.value_histogram) hist += c;
  EXPECT_EQ(hist, 10u);
}

TEST(Datastore, RejectsInconsistentShapes) {
  EXPECT_THROW(Datastore(2, {1, 2, 3}, {1, 2}, {1, 1}, ""), InvalidInput);
  EXPECT_THROW(Datastore(2, {1, 2}, {1}, {-1}, ""), InvalidInput);
  EXPECT_THROW(build_datastore(Corpus{}, ContextEncoder(5, 2, 0.5, 2, 1)), InvalidInput);
}

TEST(Kmeans, AssignmentIsArgminOfReturnedCentroids) {
  std::mt19937_64 rng(86);
  const auto ds = oracle::random_store(500, 5, 2, rng);
  const auto r = kmeans(ds.keys(), 500, 5, 12, {25, 3});
  ASSERT_EQ(r.assignment.size(), 500u);
  EXPECT_EQ(std::accumulate(r.sizes.begin(), r.sizes.end(), std::size_t{0}), 500u);
  for (std::size_t i = 0; i < 500; ++i) {
    double best = 1e300;
    std::uint32_t arg = 0;
    for (std::uint32_t c = 0; c < 12; ++c) {
      const double d = squared_l2(ds.key(i), std::span<const float>(r.centroids.data() + c * 5, 5));
      if (d < best) best = d, arg = c;
    }
    EXPECT_EQ(r.assignment[i], arg);
  }
  const auto again = kmeans(ds.keys(), 500, 5, 12, {25, 3});
  EXPECT_EQ(again.centroids, r.centroids);
}

TEST(Kmeans, SeparatedBlobsAreRecovered) {
  std::vector<float> pts;
  std::mt19937_64 rng(87);
  std::normal_distribution<float> g(0.0f, 0.05f);
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 40; ++i) pts.insert(pts.end(), {float(c * 10) + g(rng), g(rng)});
  const auto r = kmeans(pts, 120, 2, 3, {25, 1});
  EXPECT_TRUE(r.converged);
  for (int c = 0; c < 3; ++c)
    for (int i = 1; i < 40; ++i) EXPECT_EQ(r.assignment[c * 40 + i], r.assignment[c * 40]);
  EXPECT_THROW(kmeans(pts, 120, 2, 0, {}), InvalidInput);
  EXPECT_THROW(kmeans(pts, 120, 2, 121, {}), InvalidInput);
}

TEST(Kmeans, SampleRowsIsSortedDistinctAndSeeded) {
  const auto a = sample_rows(100, 30, 5);
  EXPECT_EQ(a.size(), 30u);
  EXPECT_TRUE(std::is_sorted(a.begin(), a.end()));
  EXPECT_EQ(std::adjacent_find(a.begin(), a.end()), a.end());
  EXPECT_EQ(a, sample_rows(100, 30, 5));
  EXPECT_EQ(sample_rows(10, 30, 5).size(), 10u);
}
