#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace knnlm {

/// Synthetic domain-shift benchmark. The base LM sees only "general" text
/// drawn from a first-order Markov chain over common words; the datastore,
/// validation, and test splits come from a "domain" where documents mix
/// recurring multi-token phrases (mostly domain-only words) with general filler.
struct ToyBenchmarkOptions {
  std::uint64_t seed = 7;
  std::size_t common_words = 600;
  std::size_t domain_words = 500;
  std::size_t phrases = 400;
  std::size_t min_phrase_len = 3;
  std::size_t max_phrase_len = 8;
  double phrase_prob = 0.45;
  std::size_t doc_len = 120;
  std::size_t lm_tokens = 100000;
  std::size_t datastore_tokens = 70000;
  std::size_t valid_tokens = 16000;
  std::size_t test_tokens = 10000;
};

struct ToyBenchmark {
  std::vector<std::string> lm_lines;
  std::vector<std::string> datastore_lines;
  std::vector<std::string> valid_lines;
  std::vector<std::string> test_lines;
};

ToyBenchmark make_toy_benchmark(const ToyBenchmarkOptions& options);

void write_lines(const std::string& path, const std::vector<std::string>& lines);

}  // namespace knnlm
