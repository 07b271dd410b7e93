#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnlm/common.hpp"
#include "knnlm/pca_transform.hpp"
#include "knnlm/reference_lm.hpp"

namespace knnlm {

/// One (key, next token, weight) triple. Views into the owning Datastore.
struct DatastoreRecord {
  std::span<const float> key;
  TokenId value;
  float weight;
};

/// Immutable key-value store. Record ids are positions 0..N-1; transforms
/// (pruning, reduction) always produce a new Datastore.
class Datastore {
 public:
  Datastore(std::size_t dim, std::vector<float> keys, std::vector<TokenId> values,
            std::vector<float> weights, std::string provenance,
            std::optional<PcaTransform> transform = std::nullopt);

  std::size_t dim() const { return dim_; }
  std::size_t size() const { return values_.size(); }

  std::span<const float> key(std::size_t i) const { return {keys_.data() + i * dim_, dim_}; }
  TokenId value(std::size_t i) const { return values_[i]; }
  float weight(std::size_t i) const { return weights_[i]; }
  DatastoreRecord record(std::size_t i) const { return {key(i), values_[i], weights_[i]}; }

  const std::vector<float>& keys() const { return keys_; }
  const std::vector<TokenId>& values() const { return values_; }
  const std::vector<float>& weights() const { return weights_; }
  const std::string& provenance() const { return provenance_; }

  /// Present when keys live in a reduced space; queries must go through it.
  const std::optional<PcaTransform>& transform() const { return transform_; }

  /// New datastore holding the given records in the given order.
  Datastore subset(std::span<const std::size_t> ids, const std::string& note) const;

  bool operator==(const Datastore& other) const;

 private:
  std::size_t dim_;
  std::vector<float> keys_;
  std::vector<TokenId> values_;
  std::vector<float> weights_;
  std::string provenance_;
  std::optional<PcaTransform> transform_;
};

/// One record per corpus token: key = encoder(context), value = token, weight 1.
/// Contexts are BOS-padded at every document start.
Datastore build_datastore(const Corpus& corpus, const ContextEncoder& encoder,
                          const std::string& corpus_id = "corpus");

struct DatastoreStats {
  std::size_t count = 0;
  std::size_t dim = 0;
  double total_weight = 0.0;
  std::size_t bytes = 0;
  std::map<TokenId, std::size_t> value_histogram;
};

DatastoreStats datastore_stats(const Datastore& ds);

std::vector<char> serialize_datastore(const Datastore& ds, bool half_precision_keys = false);
Datastore deserialize_datastore(std::span<const char> bytes);

void save_datastore(const Datastore& ds, const std::string& path, bool half_precision_keys = false);
Datastore load_datastore(const std::string& path);

/// Squared L2 distance accumulated in double, four lanes at a time.
inline double squared_l2(std::span<const float> a, std::span<const float> b) {
  const std::size_t n = a.size();
  double acc[4] = {0.0, 0.0, 0.0, 0.0};
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    for (std::size_t j = 0; j < 4; ++j) {
      const double d = static_cast<double>(a[i + j]) - static_cast<double>(b[i + j]);
      acc[j] += d * d;
    }
  }
  for (; i < n; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc[0] += d * d;
  }
  return (acc[0] + acc[1]) + (acc[2] + acc[3]);
}

}  // namespace knnlm
