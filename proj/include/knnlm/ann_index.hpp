#pragma once

#include <atomic>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnlm/datastore.hpp"

namespace knnlm {

/// One retrieval result. `distance` is squared L2, approximate when PQ is active.
struct NeighborHit {
  std::uint32_t id = 0;
  double distance = 0.0;
  TokenId value = 0;
  float weight = 1.0f;
};

/// Exact k nearest neighbors by squared L2, ties broken by lower id.
/// Returns min(k, N) hits sorted by ascending distance.
std::vector<NeighborHit> flat_search(const Datastore& ds, std::span<const float> query, std::size_t k);

/// Product quantizer with m sub-spaces of dim/m coordinates and 2^bits
/// codewords per sub-space.
struct PqCodebook {
  std::size_t dim = 0;
  std::size_t m = 0;
  int bits = 8;
  std::vector<float> codewords;  // m x ksub x dsub

  std::size_t ksub() const { return std::size_t{1} << bits; }
  std::size_t dsub() const { return dim / m; }
  std::span<const float> codeword(std::size_t sub, std::size_t code) const {
    return {codewords.data() + (sub * ksub() + code) * dsub(), dsub()};
  }

  std::vector<std::uint8_t> encode(std::span<const float> vec) const;
  std::vector<float> decode(std::span<const std::uint8_t> code) const;
  /// m x ksub table of squared distances from the query's sub-vectors.
  std::vector<float> distance_table(std::span<const float> query) const;
};

/// Per-sub-space k-means codebooks. Training uses at most `sample_cap` rows.
PqCodebook train_pq(std::span<const float> keys, std::size_t n, std::size_t dim, std::size_t m, int bits,
                    std::uint64_t seed, std::size_t sample_cap = 65536);

/// Asymmetric distance: sum over sub-spaces of |query_sub - codeword|^2.
double pq_distance(const PqCodebook& codebook, std::span<const std::uint8_t> code, std::span<const float> query);

/// Inverted-file index: coarse centroids plus one id list per centroid.
struct IvfIndex {
  std::size_t dim = 0;
  std::size_t nlist = 0;
  std::vector<float> centroids;             // nlist x dim
  std::vector<std::uint64_t> list_offsets;  // nlist + 1
  std::vector<std::uint32_t> list_ids;      // concatenated inverted lists
  std::optional<PqCodebook> pq;
  std::vector<std::uint8_t> codes;  // N x m when pq is present, indexed by record id

  std::size_t size() const { return list_ids.size(); }
  std::span<const std::uint32_t> list(std::size_t l) const {
    return {list_ids.data() + list_offsets[l], list_offsets[l + 1] - list_offsets[l]};
  }
};

struct IvfOptions {
  std::size_t nlist = 0;  // 0 selects round(4 * sqrt(N)), capped at N
  std::uint64_t seed = 0;
  int max_iters = 25;
  std::size_t train_points_per_list = 64;  // coarse k-means sample cap per list
  std::size_t pq_m = 0;                    // 0 disables product quantization
  int pq_bits = 8;
};

std::size_t default_nlist(std::size_t n);

/// Coarse quantizer over `n` keys; every record lands in exactly one list.
IvfIndex train_ivf(std::span<const float> keys, std::size_t n, std::size_t dim, std::size_t nlist,
                   std::uint64_t seed, int max_iters, std::size_t sample_cap = 0);

/// train_ivf over the datastore keys plus optional PQ codes.
IvfIndex build_ivf(const Datastore& ds, const IvfOptions& options);

/// Scans the nprobe lists whose centroids are nearest to the query. Distances
/// are exact without PQ and asymmetric-PQ approximations otherwise.
std::vector<NeighborHit> ivf_search(const IvfIndex& index, const Datastore& ds, std::span<const float> query,
                                    std::size_t k, std::size_t nprobe);

std::vector<char> serialize_index(const IvfIndex& index);
IvfIndex deserialize_index(std::span<const char> bytes);
void save_index(const IvfIndex& index, const std::string& path);
IvfIndex load_index(const std::string& path);

/// Search front-end used by the pipeline. Takes raw encoder-space queries,
/// applies the datastore's reduction transform when present, and counts every
/// query issued.
class Retriever {
 public:
  explicit Retriever(const Datastore& ds) : ds_(ds) {}
  Retriever(const Retriever&) = delete;
  Retriever& operator=(const Retriever&) = delete;
  virtual ~Retriever() = default;

  std::vector<NeighborHit> search(std::span<const float> query, std::size_t k) const;

  std::uint64_t query_count() const { return queries_.load(); }
  void reset_query_count() { queries_.store(0); }
  const Datastore& datastore() const { return ds_; }

 protected:
  virtual std::vector<NeighborHit> search_transformed(std::span<const float> query, std::size_t k) const = 0;
  const Datastore& ds_;

 private:
  mutable std::atomic<std::uint64_t> queries_{0};
};

class FlatRetriever final : public Retriever {
 public:
  using Retriever::Retriever;

 protected:
  std::vector<NeighborHit> search_transformed(std::span<const float> query, std::size_t k) const override;
};

class IvfRetriever final : public Retriever {
 public:
  IvfRetriever(const Datastore& ds, const IvfIndex& index, std::size_t nprobe);

 protected:
  std::vector<NeighborHit> search_transformed(std::span<const float> query, std::size_t k) const override;

 private:
  const IvfIndex& index_;
  std::size_t nprobe_;
  std::vector<float> list_keys_;  // keys in inverted-list order, for contiguous scans
};

}  // namespace knnlm
