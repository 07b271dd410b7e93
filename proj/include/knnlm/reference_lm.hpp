#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "knnlm/common.hpp"
#include "knnlm/binary_io.hpp"
#include "knnlm/knn_distribution.hpp"

namespace knnlm {

/// Dense token <-> id map. Ids 0 and 1 are reserved for BOS and UNK.
class Vocabulary {
 public:
  static constexpr TokenId kBos = 0;
  static constexpr TokenId kUnk = 1;

  Vocabulary();

  TokenId add(std::string_view token);
  std::optional<TokenId> find(std::string_view token) const;
  /// Unknown tokens map to kUnk.
  TokenId lookup(std::string_view token) const;
  const std::string& token(TokenId id) const;
  std::size_t size() const { return tokens_.size(); }

  /// One token per line; the line number is the id.
  void save(const std::string& path) const;
  static Vocabulary load(const std::string& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
};

using Document = std::vector<TokenId>;
/// One document per entry; contexts never cross document boundaries.
using Corpus = std::vector<Document>;

std::size_t token_count(const Corpus& corpus);

/// Whitespace-tokenizes one document per line. With `grow` set, new tokens are
/// added to the vocabulary; otherwise they map to UNK. Empty lines are skipped.
Corpus tokenize(const std::vector<std::string>& lines, Vocabulary& vocab, bool grow);
Corpus read_corpus(const std::string& path, Vocabulary& vocab, bool grow);
void write_corpus(const std::string& path, const Corpus& corpus, const Vocabulary& vocab);

/// Throws InvalidInput if any token id is outside [0, vocab_size).
void check_corpus(const Corpus& corpus, std::size_t vocab_size);

/// Token `back` positions before the end of `history` (back = 1 is the last
/// token); positions before the start of the document read as BOS.
inline TokenId context_token(std::span<const TokenId> history, std::size_t back) {
  return back <= history.size() ? history[history.size() - back] : Vocabulary::kBos;
}

/// Interpolated n-gram model (order 1..3) with additive smoothing. Each order
/// contributes (c(h, w) + alpha) / (c(h) + alpha * V), mixed with weights
/// proportional to 2^(n-1), so every token has positive probability.
class CountLM {
 public:
  static CountLM fit(const Corpus& corpus, std::size_t vocab_size, int order, double smoothing);

  DenseDist distribution(std::span<const TokenId> history) const;
  double prob(std::span<const TokenId> history, TokenId token) const;

  int order() const { return order_; }
  double smoothing() const { return smoothing_; }
  std::size_t vocab_size() const { return vocab_size_; }
  /// Mixture weight of each order, index 0 = unigram.
  const std::vector<double>& order_weights() const { return weights_; }

  void serialize(io::Writer& out) const;
  static CountLM deserialize(io::Reader& in);

 private:
  struct Successors {
    std::uint64_t total = 0;
    std::vector<std::pair<TokenId, std::uint32_t>> counts;  // sorted by token
  };

  const Successors* history_counts(int n, std::span<const TokenId> history) const;
  static std::uint64_t history_key(int n, std::span<const TokenId> history);

  int order_ = 3;
  double smoothing_ = 0.1;
  std::size_t vocab_size_ = 0;
  std::vector<double> weights_;
  std::vector<std::uint64_t> unigram_;
  std::uint64_t total_tokens_ = 0;
  // tables_[n - 2] holds order-n successor counts keyed by the (n-1)-token history.
  std::vector<std::unordered_map<std::uint64_t, Successors>> tables_;
};

/// Deterministic key function: L2-normalized, geometrically decayed sum of
/// seeded random token embeddings over the last `window` context tokens.
class ContextEncoder {
 public:
  ContextEncoder(std::size_t vocab_size, std::size_t dim, double decay, std::size_t window,
                 std::uint64_t seed);

  std::vector<float> encode(std::span<const TokenId> history) const;
  void encode_into(std::span<const TokenId> history, std::span<float> out) const;

  std::size_t dim() const { return dim_; }
  std::size_t vocab_size() const { return vocab_size_; }
  double decay() const { return decay_; }
  std::size_t window() const { return window_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::size_t vocab_size_;
  std::size_t dim_;
  double decay_;
  std::size_t window_;
  std::uint64_t seed_;
  std::vector<double> embeddings_;  // vocab_size x dim
};

/// Frequency and fertility of every 1..4-token context suffix in training data.
/// freq counts occurrences of the suffix immediately followed by a token in the
/// same document; fert counts the distinct tokens that follow it.
class SuffixTables {
 public:
  static constexpr int kMaxOrder = 4;

  struct Entry {
    std::uint64_t freq = 0;
    std::uint64_t fert = 0;
  };

  static SuffixTables build(const Corpus& corpus);

  /// Zeros when the suffix never occurred.
  Entry lookup(std::span<const TokenId> history, int n) const;
  std::size_t size(int n) const { return tables_[n - 1].size(); }

 private:
  using Key = std::array<TokenId, kMaxOrder>;
  struct KeyHash {
    std::size_t operator()(const Key& k) const noexcept;
  };
  static Key make_key(std::span<const TokenId> history, int n);

  std::array<std::unordered_map<Key, Entry, KeyHash>, kMaxOrder> tables_;
};

/// Everything the base model contributes at one token position.
struct LmStep {
  DenseDist p_nlm;
  std::vector<float> ctx;
  double conf = 0.0;
  double ent = 0.0;
};

LmStep lm_step(const CountLM& lm, const ContextEncoder& encoder, std::span<const TokenId> history);

/// Largest probability and Shannon entropy (nats) of a distribution.
double confidence(const DenseDist& p);
double entropy(const DenseDist& p);

/// Base-model bundle persisted by `build-lm` (the KNNL file).
struct ReferenceModel {
  CountLM lm;
  ContextEncoder encoder;

  void save(const std::string& path) const;
  static ReferenceModel load(const std::string& path);
};

}  // namespace knnlm
