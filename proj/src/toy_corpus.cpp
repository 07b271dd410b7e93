#include "knnlm/toy_corpus.hpp"

#include <array>
#include <cmath>
#include <fstream>
#include <random>

#include "knnlm/common.hpp"

namespace knnlm {

namespace {

std::discrete_distribution<std::size_t> zipf(std::size_t n, double exponent) {
  std::vector<double> w(n);
  for (std::size_t i = 0; i < n; ++i) w[i] = 1.0 / std::pow(static_cast<double>(i + 1), exponent);
  return {w.begin(), w.end()};
}

class Generator {
 public:
  explicit Generator(const ToyBenchmarkOptions& o) : o_(o), rng_(o.seed), unigram_(zipf(o.common_words, 1.0)) {
    if (o.common_words < 8 || o.domain_words < 1 || o.phrases < 1 || o.min_phrase_len < 1 ||
        o.max_phrase_len < o.min_phrase_len || o.doc_len < 1) {
      throw InvalidInput("degenerate toy benchmark options");
    }
    std::uniform_int_distribution<std::size_t> any_common(0, o.common_words - 1);
    successors_.resize(o.common_words);
    for (auto& s : successors_) {
      for (auto& t : s) t = any_common(rng_);
    }
    std::uniform_int_distribution<std::size_t> any_domain(0, o.domain_words - 1);
    std::uniform_int_distribution<std::size_t> len(o.min_phrase_len, o.max_phrase_len);
    std::bernoulli_distribution common_slot(0.25);
    phrases_.resize(o.phrases);
    for (auto& p : phrases_) {
      const std::size_t n = len(rng_);
      for (std::size_t i = 0; i < n; ++i) {
        p.push_back(common_slot(rng_) ? "g" + std::to_string(any_common(rng_)) : "d" + std::to_string(any_domain(rng_)));
      }
    }
    phrase_pick_ = zipf(o.phrases, 0.8);
  }

  std::vector<std::string> general(std::size_t tokens) {
    std::vector<std::string> lines;
    std::size_t made = 0;
    while (made < tokens) {
      const std::size_t n = std::min(o_.doc_len, tokens - made);
      std::string line;
      std::size_t state = unigram_(rng_);
      for (std::size_t i = 0; i < n; ++i) {
        line += (i ? " g" : "g") + std::to_string(state);
        state = next_common(state);
      }
      lines.push_back(std::move(line));
      made += n;
    }
    return lines;
  }

  std::vector<std::string> domain(std::size_t tokens) {
    std::vector<std::string> lines;
    std::bernoulli_distribution take_phrase(o_.phrase_prob);
    std::uniform_int_distribution<std::size_t> filler_len(1, 3);
    std::size_t made = 0;
    while (made < tokens) {
      const std::size_t n = std::min(o_.doc_len, tokens - made);
      std::vector<std::string> words;
      std::size_t state = unigram_(rng_);
      while (words.size() < n) {
        if (take_phrase(rng_)) {
          for (const auto& w : phrases_[phrase_pick_(rng_)]) words.push_back(w);
        } else {
          for (std::size_t f = filler_len(rng_); f > 0; --f) {
            words.push_back("g" + std::to_string(state));
            state = next_common(state);
          }
        }
      }
      words.resize(n);
      std::string line;
      for (std::size_t i = 0; i < n; ++i) line += (i ? " " : "") + words[i];
      lines.push_back(std::move(line));
      made += n;
    }
    return lines;
  }

 private:
  std::size_t next_common(std::size_t state) {
    // 70% of the mass on four preferred successors, the rest from the Zipf unigram.
    static constexpr double kCumulative[] = {0.35, 0.55, 0.65, 0.70};
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
    for (std::size_t j = 0; j < 4; ++j) {
      if (u < kCumulative[j]) return successors_[state][j];
    }
    return unigram_(rng_);
  }

  ToyBenchmarkOptions o_;
  std::mt19937_64 rng_;
  std::discrete_distribution<std::size_t> unigram_;
  std::discrete_distribution<std::size_t> phrase_pick_;
  std::vector<std::array<std::size_t, 4>> successors_;
  std::vector<std::vector<std::string>> phrases_;
};

}  // namespace

ToyBenchmark make_toy_benchmark(const ToyBenchmarkOptions& options) {
  Generator g(options);
  ToyBenchmark b;
  b.lm_lines = g.general(options.lm_tokens);
  b.datastore_lines = g.domain(options.datastore_tokens);
  b.valid_lines = g.domain(options.valid_tokens);
  b.test_lines = g.domain(options.test_tokens);
  return b;
}

void write_lines(const std::string& path, const std::vector<std::string>& lines) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path);
  for (const auto& l : lines) out << l << '\n';
}

}  // namespace knnlm
