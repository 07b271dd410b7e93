#include "knnlm/reference_lm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <random>
#include <sstream>

namespace knnlm {

Vocabulary::Vocabulary() {
  add("<s>");
  add("<unk>");
}

TokenId Vocabulary::add(std::string_view token) {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  const auto id = static_cast<TokenId>(tokens_.size());
  tokens_.emplace_back(token);
  ids_.emplace(tokens_.back(), id);
  return id;
}

std::optional<TokenId> Vocabulary::find(std::string_view token) const {
  if (auto it = ids_.find(std::string(token)); it != ids_.end()) return it->second;
  return std::nullopt;
}

TokenId Vocabulary::lookup(std::string_view token) const { return find(token).value_or(kUnk); }

const std::string& Vocabulary::token(TokenId id) const {
  if (id >= tokens_.size()) throw InvalidInput("token id " + std::to_string(id) + " outside vocabulary");
  return tokens_[id];
}

void Vocabulary::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path);
  for (const auto& t : tokens_) out << t << '\n';
}

Vocabulary Vocabulary::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open " + path);
  Vocabulary v;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    if (lineno < 2) {
      if (line != v.tokens_[lineno]) throw FormatError("vocabulary must start with <s> and <unk>", lineno);
    } else if (v.add(line) != lineno) {
      throw FormatError("duplicate vocabulary entry \"" + line + "\"", lineno);
    }
    ++lineno;
  }
  return v;
}

std::size_t token_count(const Corpus& corpus) {
  std::size_t n = 0;
  for (const auto& doc : corpus) n += doc.size();
  return n;
}

Corpus tokenize(const std::vector<std::string>& lines, Vocabulary& vocab, bool grow) {
  Corpus corpus;
  for (const auto& line : lines) {
    std::istringstream words(line);
    Document doc;
    std::string w;
    while (words >> w) doc.push_back(grow ? vocab.add(w) : vocab.lookup(w));
    if (!doc.empty()) corpus.push_back(std::move(doc));
  }
  return corpus;
}

Corpus read_corpus(const std::string& path, Vocabulary& vocab, bool grow) {
  std::ifstream in(path);
  if (!in) throw InvalidInput("cannot open corpus " + path);
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) lines.push_back(std::move(line));
  return tokenize(lines, vocab, grow);
}

void write_corpus(const std::string& path, const Corpus& corpus, const Vocabulary& vocab) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InvalidInput("cannot write " + path);
  for (const auto& doc : corpus) {
    for (std::size_t i = 0; i < doc.size(); ++i) out << (i ? " " : "") << vocab.token(doc[i]);
    out << '\n';
  }
}

void check_corpus(const Corpus& corpus, std::size_t vocab_size) {
  for (const auto& doc : corpus) {
    for (TokenId t : doc) {
      if (t >= vocab_size) {
        throw InvalidInput("token id " + std::to_string(t) + " outside vocabulary of size " +
                           std::to_string(vocab_size));
      }
    }
  }
}

// ---------------------------------------------------------------------------
// CountLM

std::uint64_t CountLM::history_key(int n, std::span<const TokenId> history) {
  std::uint64_t key = 0;
  for (int back = n - 1; back >= 1; --back) key = (key << 32) | context_token(history, back);
  return key;
}

CountLM CountLM::fit(const Corpus& corpus, std::size_t vocab_size, int order, double smoothing) {
  if (order < 1 || order > 3) throw InvalidInput("count LM order must be in [1, 3]");
  if (!(smoothing > 0.0)) throw InvalidInput("smoothing constant must be positive");
  const std::size_t total = token_count(corpus);
  if (total == 0) throw InvalidInput("cannot fit a language model on an empty corpus");
  if (total < static_cast<std::size_t>(order)) throw InvalidInput("corpus shorter than model order");
  check_corpus(corpus, vocab_size);

  CountLM lm;
  lm.order_ = order;
  lm.smoothing_ = smoothing;
  lm.vocab_size_ = vocab_size;
  lm.total_tokens_ = total;
  lm.unigram_.assign(vocab_size, 0);

  double norm = 0.0;
  for (int n = 1; n <= order; ++n) norm += std::ldexp(1.0, n - 1);
  for (int n = 1; n <= order; ++n) lm.weights_.push_back(std::ldexp(1.0, n - 1) / norm);

  std::vector<std::unordered_map<std::uint64_t, std::map<TokenId, std::uint32_t>>> raw(order - 1);
  for (const auto& doc : corpus) {
    for (std::size_t t = 0; t < doc.size(); ++t) {
      const std::span<const TokenId> history(doc.data(), t);
      ++lm.unigram_[doc[t]];
      for (int n = 2; n <= order; ++n) ++raw[n - 2][history_key(n, history)][doc[t]];
    }
  }
  lm.tables_.resize(order - 1);
  for (int n = 2; n <= order; ++n) {
    for (auto& [key, succ] : raw[n - 2]) {
      Successors s;
      s.counts.assign(succ.begin(), succ.end());
      for (const auto& [tok, c] : s.counts) s.total += c;
      lm.tables_[n - 2].emplace(key, std::move(s));
    }
  }
  return lm;
}

const CountLM::Successors* CountLM::history_counts(int n, std::span<const TokenId> history) const {
  const auto& table = tables_[n - 2];
  auto it = table.find(history_key(n, history));
  return it == table.end() ? nullptr : &it->second;
}

DenseDist CountLM::distribution(std::span<const TokenId> history) const {
  const double alpha = smoothing_;
  const double av = alpha * static_cast<double>(vocab_size_);
  DenseDist p(vocab_size_);
  const double uni_den = static_cast<double>(total_tokens_) + av;
  for (std::size_t w = 0; w < vocab_size_; ++w) {
    p[w] = weights_[0] * (static_cast<double>(unigram_[w]) + alpha) / uni_den;
  }
  double floor = 0.0;
  for (int n = 2; n <= order_; ++n) {
    const Successors* s = history_counts(n, history);
    const double den = (s ? static_cast<double>(s->total) : 0.0) + av;
    floor += weights_[n - 1] * alpha / den;
    if (s) {
      for (const auto& [tok, c] : s->counts) p[tok] += weights_[n - 1] * static_cast<double>(c) / den;
    }
  }
  if (floor != 0.0) {
    for (auto& x : p) x += floor;
  }
  return p;
}

double CountLM::prob(std::span<const TokenId> history, TokenId token) const {
  if (token >= vocab_size_) throw InvalidInput("token outside vocabulary");
  const double alpha = smoothing_;
  const double av = alpha * static_cast<double>(vocab_size_);
  double p = weights_[0] * (static_cast<double>(unigram_[token]) + alpha) /
             (static_cast<double>(total_tokens_) + av);
  for (int n = 2; n <= order_; ++n) {
    const Successors* s = history_counts(n, history);
    double c = 0.0;
    double total = 0.0;
    if (s) {
      total = static_cast<double>(s->total);
      auto it = std::lower_bound(s->counts.begin(), s->counts.end(), token,
                                 [](const auto& e, TokenId t) { return e.first < t; });
      if (it != s->counts.end() && it->first == token) c = it->second;
    }
    p += weights_[n - 1] * (c + alpha) / (total + av);
  }
  return p;
}

void CountLM::serialize(io::Writer& out) const {
  out.put<std::uint32_t>(static_cast<std::uint32_t>(order_));
  out.put<double>(smoothing_);
  out.put<std::uint64_t>(vocab_size_);
  out.put<std::uint64_t>(total_tokens_);
  out.put_span<std::uint64_t>(unigram_);
  for (const auto& table : tables_) {
    // Sorted keys keep the file independent of hash-map iteration order.
    std::vector<std::uint64_t> keys;
    keys.reserve(table.size());
    for (const auto& [k, s] : table) keys.push_back(k);
    std::sort(keys.begin(), keys.end());
    out.put<std::uint64_t>(keys.size());
    for (auto k : keys) {
      const auto& s = table.at(k);
      out.put<std::uint64_t>(k);
      out.put<std::uint64_t>(s.counts.size());
      for (const auto& [tok, c] : s.counts) {
        out.put<std::uint32_t>(tok);
        out.put<std::uint32_t>(c);
      }
    }
  }
}

CountLM CountLM::deserialize(io::Reader& in) {
  CountLM lm;
  lm.order_ = static_cast<int>(in.get<std::uint32_t>());
  if (lm.order_ < 1 || lm.order_ > 3) in.fail("bad count LM order");
  lm.smoothing_ = in.get<double>();
  lm.vocab_size_ = in.get<std::uint64_t>();
  lm.total_tokens_ = in.get<std::uint64_t>();
  lm.unigram_ = in.get_vector<std::uint64_t>(lm.vocab_size_);
  double norm = 0.0;
  for (int n = 1; n <= lm.order_; ++n) norm += std::ldexp(1.0, n - 1);
  for (int n = 1; n <= lm.order_; ++n) lm.weights_.push_back(std::ldexp(1.0, n - 1) / norm);
  lm.tables_.resize(lm.order_ - 1);
  for (auto& table : lm.tables_) {
    const auto entries = in.get<std::uint64_t>();
    for (std::uint64_t e = 0; e < entries; ++e) {
      const auto key = in.get<std::uint64_t>();
      const auto count = in.get<std::uint64_t>();
      Successors s;
      for (std::uint64_t j = 0; j < count; ++j) {
        const auto tok = in.get<std::uint32_t>();
        const auto c = in.get<std::uint32_t>();
        if (tok >= lm.vocab_size_) in.fail("successor token outside vocabulary");
        s.counts.emplace_back(tok, c);
        s.total += c;
      }
      table.emplace(key, std::move(s));
    }
  }
  return lm;
}

// ---------------------------------------------------------------------------
// ContextEncoder

ContextEncoder::ContextEncoder(std::size_t vocab_size, std::size_t dim, double decay, std::size_t window,
                               std::uint64_t seed)
    : vocab_size_(vocab_size), dim_(dim), decay_(decay), window_(window), seed_(seed) {
  if (dim == 0) throw InvalidInput("encoder dimension must be positive");
  if (!(decay > 0.0 && decay < 1.0)) throw InvalidInput("encoder decay must be in (0, 1)");
  if (window == 0) throw InvalidInput("encoder window must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0 / std::sqrt(static_cast<double>(dim)));
  embeddings_.resize(vocab_size * dim);
  for (auto& x : embeddings_) x = gauss(rng);
}

void ContextEncoder::encode_into(std::span<const TokenId> history, std::span<float> out) const {
  if (out.size() != dim_) throw InvalidInput("encoder output buffer has wrong dimension");
  std::vector<double> acc(dim_, 0.0);
  double scale = 1.0;
  for (std::size_t back = 1; back <= window_; ++back) {
    const TokenId tok = context_token(history, back);
    if (tok >= vocab_size_) throw InvalidInput("context token outside vocabulary");
    const double* e = embeddings_.data() + static_cast<std::size_t>(tok) * dim_;
    for (std::size_t i = 0; i < dim_; ++i) acc[i] += scale * e[i];
    scale *= decay_;
  }
  double norm = 0.0;
  for (double x : acc) norm += x * x;
  norm = std::sqrt(norm);
  for (std::size_t i = 0; i < dim_; ++i) out[i] = static_cast<float>(norm > 0.0 ? acc[i] / norm : 0.0);
}

std::vector<float> ContextEncoder::encode(std::span<const TokenId> history) const {
  std::vector<float> out(dim_);
  encode_into(history, out);
  return out;
}

// ---------------------------------------------------------------------------
// SuffixTables

std::size_t SuffixTables::KeyHash::operator()(const Key& k) const noexcept {
  std::uint64_t h = 0x9e3779b97f4a7c15ULL;
  for (TokenId t : k) {
    h ^= t + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
  }
  return static_cast<std::size_t>(h);
}

SuffixTables::Key SuffixTables::make_key(std::span<const TokenId> history, int n) {
  Key key;
  key.fill(~TokenId{0});
  for (int back = 1; back <= n; ++back) key[back - 1] = context_token(history, back);
  return key;
}

SuffixTables SuffixTables::build(const Corpus& corpus) {
  SuffixTables st;
  std::array<std::unordered_map<Key, std::vector<TokenId>, KeyHash>, kMaxOrder> followers;
  for (const auto& doc : corpus) {
    for (std::size_t t = 0; t < doc.size(); ++t) {
      const std::span<const TokenId> history(doc.data(), t);
      for (int n = 1; n <= kMaxOrder; ++n) {
        const Key key = make_key(history, n);
        ++st.tables_[n - 1][key].freq;
        followers[n - 1][key].push_back(doc[t]);
      }
    }
  }
  for (int n = 1; n <= kMaxOrder; ++n) {
    for (auto& [key, next] : followers[n - 1]) {
      std::sort(next.begin(), next.end());
      st.tables_[n - 1][key].fert =
          static_cast<std::uint64_t>(std::unique(next.begin(), next.end()) - next.begin());
    }
  }
  return st;
}

SuffixTables::Entry SuffixTables::lookup(std::span<const TokenId> history, int n) const {
  if (n < 1 || n > kMaxOrder) throw InvalidInput("suffix order must be in [1, 4]");
  const auto& table = tables_[n - 1];
  auto it = table.find(make_key(history, n));
  return it == table.end() ? Entry{} : it->second;
}

// ---------------------------------------------------------------------------

double confidence(const DenseDist& p) { return p.empty() ? 0.0 : *std::max_element(p.begin(), p.end()); }

double entropy(const DenseDist& p) {
  double h = 0.0;
  for (double x : p) {
    if (x > 0.0) h -= x * std::log(x);
  }
  return h;
}

LmStep lm_step(const CountLM& lm, const ContextEncoder& encoder, std::span<const TokenId> history) {
  LmStep step;
  step.p_nlm = lm.distribution(history);
  step.ctx = encoder.encode(history);
  step.conf = confidence(step.p_nlm);
  step.ent = entropy(step.p_nlm);
  return step;
}

void ReferenceModel::save(const std::string& path) const {
  io::Writer out;
  out.put_magic("KNNL");
  out.put<std::uint32_t>(1);
  out.put<std::uint64_t>(encoder.vocab_size());
  out.put<std::uint64_t>(encoder.dim());
  out.put<double>(encoder.decay());
  out.put<std::uint64_t>(encoder.window());
  out.put<std::uint64_t>(encoder.seed());
  lm.serialize(out);
  io::write_file(path, out.bytes());
}

ReferenceModel ReferenceModel::load(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes);
  in.expect_magic("KNNL");
  if (in.get<std::uint32_t>() != 1) in.fail("unsupported language model version");
  const auto vocab = in.get<std::uint64_t>();
  const auto dim = in.get<std::uint64_t>();
  const auto decay = in.get<double>();
  const auto window = in.get<std::uint64_t>();
  const auto seed = in.get<std::uint64_t>();
  CountLM lm = CountLM::deserialize(in);
  if (lm.vocab_size() != vocab) in.fail("encoder and count LM disagree on vocabulary size");
  if (!in.at_end()) in.fail("trailing bytes after language model");
  return ReferenceModel{std::move(lm), ContextEncoder(vocab, dim, decay, window, seed)};
}

}  // namespace knnlm
