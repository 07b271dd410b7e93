#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "knnlm/ann_index.hpp"
#include "knnlm/datastore.hpp"

namespace knnlm {

struct PruneReport {
  std::string method;
  std::size_t input_count = 0;
  std::size_t output_count = 0;
  double retention = 0.0;
  double weight_before = 0.0;
  double weight_after = 0.0;
  double seconds = 0.0;

  /// One JSON object on a single line.
  std::string to_json() const;
};

PruneReport make_prune_report(std::string method, const Datastore& before, const Datastore& after, double seconds);

/// Number of records kept at `fraction`: ceil(fraction * n), robust to
/// floating-point noise in the product.
std::size_t retain_count(double fraction, std::size_t n);

/// Neighbor lookup over datastore-space keys: exact scan when `index` is null,
/// otherwise an IVF probe of `nprobe` lists.
struct NeighborSource {
  const IvfIndex* index = nullptr;
  std::size_t nprobe = 1;

  std::vector<NeighborHit> search(const Datastore& ds, std::span<const float> query, std::size_t k) const;
};

/// Uniform sample of ceil(fraction * N) records, kept in id order.
Datastore random_prune(const Datastore& ds, double retain_fraction, std::uint64_t seed);

/// Target-aware clustering: the `top_m_tokens` most frequent values are each
/// replaced by max(1, ceil(ratio * count)) centroids carrying their cluster's
/// total weight; other records pass through unchanged.
Datastore kmeans_prune(const Datastore& ds, std::size_t top_m_tokens, double cluster_ratio, std::uint64_t seed,
                       int max_iters = 25);

/// Greedy merging. Records are scanned in id order; a record absorbs each of
/// its K nearest neighbors that still has weight count 1, shares its value,
/// and is not itself. Records already absorbed are skipped as absorbers.
/// `merges`, when given, receives (absorber, absorbed) pairs in merge order.
Datastore greedy_merge(const Datastore& ds, const NeighborSource& source, std::size_t K, int threads = 1,
                       std::vector<std::pair<std::uint32_t, std::uint32_t>>* merges = nullptr);

/// Neighbor id lists (nearest first) for every record, `K` hits each.
std::vector<std::vector<std::uint32_t>> neighbor_lists(const Datastore& ds, const NeighborSource& source,
                                                       std::size_t K, int threads = 1);

/// greedy_merge driven by precomputed lists; only the first K ids of each list
/// are considered, so one set of lists at a large K serves every smaller K.
Datastore greedy_merge_lists(const Datastore& ds, std::span<const std::vector<std::uint32_t>> lists, std::size_t K);

/// Smallest K in [2, max_k] whose greedy merge keeps at most `target_retention`
/// of the records; max_k when none does.
std::size_t gm_k_for_retention(const Datastore& ds, std::span<const std::vector<std::uint32_t>> lists,
                               double target_retention, std::size_t max_k);

/// g = sum of 1/rank over all retrievals (rank is 1-based). Queries are
/// row-major datastore-space vectors.
std::vector<double> importance_scores(const Datastore& ds, const NeighborSource& source,
                                      std::span<const float> queries, std::size_t k, int threads = 1);

/// importance_scores using every record's own key as a query; a record's
/// self-hit does not count toward its own score.
std::vector<double> self_importance_scores(const Datastore& ds, const NeighborSource& source, std::size_t k,
                                           int threads = 1);

/// Keeps the ceil(fraction * N) highest-scoring records (ties to lower id), in id order.
Datastore rank_prune(const Datastore& ds, std::span<const double> scores, double retain_fraction);

}  // namespace knnlm
