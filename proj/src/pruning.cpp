#include "knnlm/pruning.hpp"

#include <algorithm>
#include <cmath>
#include <json.hpp>
#include <map>
#include <numeric>

#include "knnlm/kmeans.hpp"

namespace knnlm {

std::string PruneReport::to_json() const {
  nlohmann::json j = {{"report", "prune"},
                      {"method", method},
                      {"input_count", input_count},
                      {"output_count", output_count},
                      {"retention", retention},
                      {"weight_before", weight_before},
                      {"weight_after", weight_after},
                      {"seconds", seconds}};
  return j.dump();
}

PruneReport make_prune_report(std::string method, const Datastore& before, const Datastore& after, double seconds) {
  PruneReport r;
  r.method = std::move(method);
  r.input_count = before.size();
  r.output_count = after.size();
  r.retention = static_cast<double>(after.size()) / static_cast<double>(before.size());
  r.weight_before = datastore_stats(before).total_weight;
  r.weight_after = datastore_stats(after).total_weight;
  r.seconds = seconds;
  return r;
}

std::size_t retain_count(double fraction, std::size_t n) {
  const double exact = fraction * static_cast<double>(n);
  const double nearest = std::round(exact);
  const double count = std::abs(exact - nearest) < 1e-9 * std::max(1.0, exact) ? nearest : std::ceil(exact);
  return std::clamp<std::size_t>(static_cast<std::size_t>(count), 1, n);
}

std::vector<NeighborHit> NeighborSource::search(const Datastore& ds, std::span<const float> query,
                                                std::size_t k) const {
  if (index == nullptr) return flat_search(ds, query, k);
  return ivf_search(*index, ds, query, k, std::clamp<std::size_t>(nprobe, 1, index->nlist));
}

Datastore random_prune(const Datastore& ds, double retain_fraction, std::uint64_t seed) {
  if (!(retain_fraction > 0.0 && retain_fraction <= 1.0)) throw InvalidInput("retain fraction must be in (0, 1]");
  const auto keep = sample_rows(ds.size(), retain_count(retain_fraction, ds.size()), seed);
  return ds.subset(keep, "random_prune retain=" + std::to_string(retain_fraction) + " seed=" + std::to_string(seed));
}

Datastore kmeans_prune(const Datastore& ds, std::size_t top_m_tokens, double cluster_ratio, std::uint64_t seed,
                       int max_iters) {
  if (!(cluster_ratio > 0.0 && cluster_ratio <= 1.0)) throw InvalidInput("cluster ratio must be in (0, 1]");
  const std::string note = "kmeans_prune top_m=" + std::to_string(top_m_tokens) +
                           " ratio=" + std::to_string(cluster_ratio) + " seed=" + std::to_string(seed);

  std::map<TokenId, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < ds.size(); ++i) members[ds.value(i)].push_back(i);
  std::vector<TokenId> by_freq;
  for (const auto& [tok, ids] : members) by_freq.push_back(tok);
  std::stable_sort(by_freq.begin(), by_freq.end(),
                   [&](TokenId a, TokenId b) { return members[a].size() > members[b].size(); });
  by_freq.resize(std::min(top_m_tokens, by_freq.size()));
  std::vector<bool> clustered_token;
  for (TokenId t : by_freq) {
    if (t >= clustered_token.size()) clustered_token.resize(t + 1, false);
    clustered_token[t] = true;
  }
  auto is_clustered = [&](TokenId t) { return t < clustered_token.size() && clustered_token[t]; };

  const std::size_t dim = ds.dim();
  std::vector<float> keys;
  std::vector<TokenId> values;
  std::vector<float> weights;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (is_clustered(ds.value(i))) continue;
    const auto k = ds.key(i);
    keys.insert(keys.end(), k.begin(), k.end());
    values.push_back(ds.value(i));
    weights.push_back(ds.weight(i));
  }

  std::vector<float> points;
  for (TokenId tok : by_freq) {
    const auto& ids = members[tok];
    points.resize(ids.size() * dim);
    for (std::size_t r = 0; r < ids.size(); ++r) {
      const auto k = ds.key(ids[r]);
      std::copy(k.begin(), k.end(), points.begin() + r * dim);
    }
    const std::size_t clusters = std::max<std::size_t>(1, retain_count(cluster_ratio, ids.size()));
    const auto km = kmeans(points, ids.size(), dim, clusters, {max_iters, seed + tok});
    std::vector<double> cluster_weight(clusters, 0.0);
    for (std::size_t r = 0; r < ids.size(); ++r) cluster_weight[km.assignment[r]] += ds.weight(ids[r]);
    for (std::size_t c = 0; c < clusters; ++c) {
      if (km.sizes[c] == 0) continue;
      keys.insert(keys.end(), km.centroids.begin() + c * dim, km.centroids.begin() + (c + 1) * dim);
      values.push_back(tok);
      weights.push_back(static_cast<float>(cluster_weight[c]));
    }
  }
  return Datastore(dim, std::move(keys), std::move(values), std::move(weights), ds.provenance() + "\n" + note,
                   ds.transform());
}

Datastore greedy_merge(const Datastore& ds, const NeighborSource& source, std::size_t K, int threads,
                       std::vector<std::pair<std::uint32_t, std::uint32_t>>* merges) {
  if (K < 2) throw InvalidInput("greedy merging needs K >= 2");
  const std::size_t n = ds.size();
  std::vector<std::int64_t> count(n, 1);  // records represented by each entry
  std::vector<double> weight(ds.weights().begin(), ds.weights().end());

  // Neighbor lists do not depend on merge state, so they are fetched ahead in
  // blocks (optionally in parallel) while the merge scan stays sequential.
  constexpr std::size_t kBlock = 512;
  std::vector<std::vector<NeighborHit>> block_hits(kBlock);
  for (std::size_t lo = 0; lo < n; lo += kBlock) {
    const std::size_t hi = std::min(n, lo + kBlock);
    parallel_for(hi - lo, threads, [&](std::size_t j) {
      const std::size_t i = lo + j;
      block_hits[j] = count[i] > 0 ? source.search(ds, ds.key(i), K) : std::vector<NeighborHit>{};
    });
    for (std::size_t i = lo; i < hi; ++i) {
      if (count[i] == 0) continue;
      for (const auto& hit : block_hits[i - lo]) {
        const std::size_t t = hit.id;
        if (count[t] == 1 && ds.value(t) == ds.value(i) && t != i) {
          ++count[i];
          --count[t];
          weight[i] += weight[t];
          weight[t] = 0.0;
          if (merges) merges->emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(t));
        }
      }
    }
  }

  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < n; ++i) {
    if (count[i] > 0) keep.push_back(i);
  }
  Datastore out = ds.subset(keep, "greedy_merge K=" + std::to_string(K));
  std::vector<float> new_weights;
  new_weights.reserve(keep.size());
  for (std::size_t i : keep) new_weights.push_back(static_cast<float>(weight[i]));
  return Datastore(out.dim(), out.keys(), out.values(), std::move(new_weights), out.provenance(), out.transform());
}

std::vector<std::vector<std::uint32_t>> neighbor_lists(const Datastore& ds, const NeighborSource& source,
                                                       std::size_t K, int threads) {
  std::vector<std::vector<std::uint32_t>> lists(ds.size());
  parallel_for(ds.size(), threads, [&](std::size_t i) {
    for (const auto& hit : source.search(ds, ds.key(i), K)) lists[i].push_back(hit.id);
  });
  return lists;
}

namespace {

// Merge counts for the first K ids of each list; entries with count 0 were absorbed.
std::vector<std::int64_t> merge_counts(const Datastore& ds, std::span<const std::vector<std::uint32_t>> lists,
                                       std::size_t K) {
  std::vector<std::int64_t> count(ds.size(), 1);
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (count[i] == 0) continue;
    const std::size_t limit = std::min(K, lists[i].size());
    for (std::size_t j = 0; j < limit; ++j) {
      const std::size_t t = lists[i][j];
      if (count[t] == 1 && ds.value(t) == ds.value(i) && t != i) {
        ++count[i];
        --count[t];
      }
    }
  }
  return count;
}

}  // namespace

Datastore greedy_merge_lists(const Datastore& ds, std::span<const std::vector<std::uint32_t>> lists, std::size_t K) {
  if (K < 2) throw InvalidInput("greedy merging needs K >= 2");
  if (lists.size() != ds.size()) throw InvalidInput("one neighbor list per record is required");
  std::vector<std::int64_t> count(ds.size(), 1);
  std::vector<double> weight(ds.weights().begin(), ds.weights().end());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (count[i] == 0) continue;
    const std::size_t limit = std::min(K, lists[i].size());
    for (std::size_t j = 0; j < limit; ++j) {
      const std::size_t t = lists[i][j];
      if (count[t] == 1 && ds.value(t) == ds.value(i) && t != i) {
        ++count[i];
        --count[t];
        weight[i] += weight[t];
        weight[t] = 0.0;
      }
    }
  }
  std::vector<std::size_t> keep;
  std::vector<float> new_weights;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    if (count[i] > 0) {
      keep.push_back(i);
      new_weights.push_back(static_cast<float>(weight[i]));
    }
  }
  Datastore out = ds.subset(keep, "greedy_merge K=" + std::to_string(K));
  return Datastore(out.dim(), out.keys(), out.values(), std::move(new_weights), out.provenance(), out.transform());
}

std::size_t gm_k_for_retention(const Datastore& ds, std::span<const std::vector<std::uint32_t>> lists,
                               double target_retention, std::size_t max_k) {
  for (std::size_t K = 2; K <= max_k; ++K) {
    const auto count = merge_counts(ds, lists, K);
    const auto kept = static_cast<std::size_t>(std::count_if(count.begin(), count.end(), [](auto c) { return c > 0; }));
    if (static_cast<double>(kept) <= target_retention * static_cast<double>(ds.size())) return K;
  }
  return max_k;
}

namespace {

std::vector<double> tally_scores(const Datastore& ds, const NeighborSource& source, std::span<const float> queries,
                                 std::size_t n_queries, std::size_t k, int threads, bool exclude_self) {
  if (k == 0) throw InvalidInput("k must be positive");
  const std::size_t dim = ds.dim();
  std::vector<double> scores(ds.size(), 0.0);
  constexpr std::size_t kBlock = 256;
  std::vector<std::vector<NeighborHit>> block_hits(kBlock);
  for (std::size_t lo = 0; lo < n_queries; lo += kBlock) {
    const std::size_t hi = std::min(n_queries, lo + kBlock);
    parallel_for(hi - lo, threads, [&](std::size_t j) {
      block_hits[j] = source.search(ds, queries.subspan((lo + j) * dim, dim), k);
    });
    // Sequential reduction in query order keeps the sums thread-count independent.
    for (std::size_t q = lo; q < hi; ++q) {
      const auto& hits = block_hits[q - lo];
      for (std::size_t r = 0; r < hits.size(); ++r) {
        if (exclude_self && hits[r].id == q) continue;
        scores[hits[r].id] += 1.0 / static_cast<double>(r + 1);
      }
    }
  }
  return scores;
}

}  // namespace

std::vector<double> importance_scores(const Datastore& ds, const NeighborSource& source,
                                      std::span<const float> queries, std::size_t k, int threads) {
  if (queries.size() % ds.dim() != 0) throw InvalidInput("query matrix does not match datastore dimension");
  return tally_scores(ds, source, queries, queries.size() / ds.dim(), k, threads, false);
}

std::vector<double> self_importance_scores(const Datastore& ds, const NeighborSource& source, std::size_t k,
                                           int threads) {
  return tally_scores(ds, source, ds.keys(), ds.size(), k, threads, true);
}

Datastore rank_prune(const Datastore& ds, std::span<const double> scores, double retain_fraction) {
  if (scores.size() != ds.size()) throw InvalidInput("score vector length does not match datastore size");
  if (!(retain_fraction > 0.0 && retain_fraction <= 1.0)) throw InvalidInput("retain fraction must be in (0, 1]");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(retain_count(retain_fraction, ds.size()));
  std::sort(order.begin(), order.end());
  return ds.subset(order, "rank_prune retain=" + std::to_string(retain_fraction));
}

}  // namespace knnlm
