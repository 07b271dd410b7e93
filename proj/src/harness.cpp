#include "knnlm/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <json.hpp>
#include <numeric>
#include <random>

#include "knnlm/dim_reduction.hpp"

namespace knnlm {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double floored_log(double p) { return p > 0.0 ? std::max(std::log(p), kLogProbFloor) : kLogProbFloor; }

struct Position {
  std::uint32_t doc;
  std::uint32_t pos;
};

std::vector<Position> positions_of(const Corpus& corpus) {
  std::vector<Position> out;
  out.reserve(token_count(corpus));
  for (std::size_t d = 0; d < corpus.size(); ++d) {
    for (std::size_t p = 0; p < corpus[d].size(); ++p) {
      out.push_back({static_cast<std::uint32_t>(d), static_cast<std::uint32_t>(p)});
    }
  }
  return out;
}

std::span<const TokenId> history_of(const Corpus& corpus, Position at) {
  return std::span<const TokenId>(corpus[at.doc]).first(at.pos);
}

std::vector<NeighborHit> retrieve(const Retriever& retriever, std::span<const float> ctx, std::size_t k,
                                  double distance_exponent) {
  auto hits = retriever.search(ctx, k);
  if (distance_exponent != 1.0) {
    for (auto& h : hits) h.distance = std::pow(std::max(h.distance, 0.0), distance_exponent);
  }
  return hits;
}

double perplexity_of(std::span<const double> log_probs) {
  if (log_probs.empty()) return 1.0;
  double sum = 0.0;
  for (double lp : log_probs) sum += lp;
  return std::exp(-sum / static_cast<double>(log_probs.size()));
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

std::string stack_name(Stack stack) {
  switch (stack) {
    case Stack::kVanilla:
      return "vanilla";
    case Stack::kGm:
      return "gm";
    case Stack::kDr:
      return "dr";
    case Stack::kAll:
      return "all";
  }
  return "?";
}

Stack parse_stack(const std::string& text) {
  const auto t = lower(text);
  if (t == "vanilla" || t == "knnlm") return Stack::kVanilla;
  if (t == "gm") return Stack::kGm;
  if (t == "dr") return Stack::kDr;
  if (t == "all") return Stack::kAll;
  throw ConfigError("unknown stack \"" + text + "\" (expected vanilla, gm, dr, or all)");
}

std::string mode_name(EvalMode mode) {
  switch (mode) {
    case EvalMode::kNlm:
      return "nlm";
    case EvalMode::kKnnlm:
      return "knnlm";
    case EvalMode::kAr:
      return "knnlm+AR";
    case EvalMode::kGm:
      return "knnlm+GM";
    case EvalMode::kDr:
      return "knnlm+DR";
    case EvalMode::kAll:
      return "knnlm+All";
  }
  return "?";
}

EvalMode parse_mode(const std::string& text) {
  auto t = lower(text);
  if (t.rfind("knnlm+", 0) == 0) t = t.substr(5);
  if (t == "nlm") return EvalMode::kNlm;
  if (t == "knnlm" || t == "vanilla") return EvalMode::kKnnlm;
  if (t == "+ar" || t == "ar") return EvalMode::kAr;
  if (t == "+gm" || t == "gm") return EvalMode::kGm;
  if (t == "+dr" || t == "dr") return EvalMode::kDr;
  if (t == "+all" || t == "all") return EvalMode::kAll;
  throw ConfigError("unknown eval mode \"" + text + "\"");
}

std::optional<Stack> mode_stack(EvalMode mode) {
  switch (mode) {
    case EvalMode::kNlm:
      return std::nullopt;
    case EvalMode::kKnnlm:
    case EvalMode::kAr:
      return Stack::kVanilla;
    case EvalMode::kGm:
      return Stack::kGm;
    case EvalMode::kDr:
      return Stack::kDr;
    case EvalMode::kAll:
      return Stack::kAll;
  }
  return std::nullopt;
}

std::string EvalReport::to_json() const {
  nlohmann::ordered_json j;
  j["model"] = label;
  j["perplexity"] = perplexity;
  j["tokens"] = tokens;
  j["tokens_per_s"] = tokens_per_second;
  j["speedup"] = speedup ? nlohmann::ordered_json(*speedup) : nlohmann::ordered_json(nullptr);
  j["retrieval_fraction"] = retrieval_fraction;
  j["queries"] = queries;
  j["retention"] = retention ? nlohmann::ordered_json(*retention) : nlohmann::ordered_json(nullptr);
  j["dim"] = dim ? nlohmann::ordered_json(*dim) : nlohmann::ordered_json(nullptr);
  j["lambda"] = lambda ? nlohmann::ordered_json(*lambda) : nlohmann::ordered_json(nullptr);
  j["config_hash"] = config_hash;
  j["seconds"] = seconds;
  j["t_nlm"] = t_nlm;
  j["t_knn"] = t_knn;
  j["threads"] = threads;
  return j.dump();
}

std::size_t skip_count(double fraction, std::size_t n) {
  if (!(fraction > 0.0)) return 0;
  if (fraction >= 1.0) return n;
  return retain_count(fraction, n);
}

std::vector<bool> random_retrieval_mask(std::size_t tokens, double prune_fraction, std::uint64_t seed) {
  std::vector<std::size_t> order(tokens);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<bool> keep(tokens, true);
  const std::size_t skip = skip_count(prune_fraction, tokens);
  for (std::size_t i = 0; i < skip; ++i) keep[order[i]] = false;
  return keep;
}

EvalReport evaluate(const EvalSetup& setup, const Corpus& corpus, const std::string& label) {
  if (!setup.lm || !setup.encoder) throw InvalidInput("evaluation needs a base LM and an encoder");
  if (setup.lambda < 0.0 || setup.lambda > 1.0) throw InvalidInput("lambda must be in [0, 1]");
  const GateSpec& gate = setup.gate;
  const bool gated = setup.retriever && gate.enabled;
  const bool needs_adaptor = gated && (gate.learned_mask || gate.learned_weight);
  if (needs_adaptor && (!setup.adaptor || !setup.tables)) {
    throw InvalidInput("a learned gate needs an adaptor and suffix tables");
  }

  const auto positions = positions_of(corpus);
  const std::size_t n = positions.size();
  std::vector<bool> mask;
  if (gated && !gate.learned_mask) mask = random_retrieval_mask(n, gate.prune_fraction, gate.mask_seed);

  std::vector<double> log_probs(n), t_nlm(n), t_knn(n);
  const std::uint64_t queries_before = setup.retriever ? setup.retriever->query_count() : 0;
  const auto start = Clock::now();
  parallel_for(n, setup.threads, [&](std::size_t i) {
    const auto hist = history_of(corpus, positions[i]);
    const TokenId target = corpus[positions[i].doc][positions[i].pos];
    const auto t0 = Clock::now();
    const LmStep step = lm_step(*setup.lm, *setup.encoder, hist);
    const auto t1 = Clock::now();
    const double pn = step.p_nlm[target];
    double p = pn;
    if (setup.retriever) {
      bool use = true;
      double lam = setup.lambda;
      if (gated) {
        double learned = 0.0;
        if (needs_adaptor) {
          learned = setup.adaptor->forward(extract_features(step.p_nlm, step.ctx, *setup.tables, hist)).lambda();
        }
        use = gate.learned_mask ? learned > setup.threshold : static_cast<bool>(mask[i]);
        if (gate.learned_weight) lam = learned;
      }
      if (use) {
        const auto hits = retrieve(*setup.retriever, step.ctx, setup.k, setup.distance_exponent);
        p = interpolate_token(weighted_knn_distribution(hits).prob(target), pn, lam);
      }
    }
    const auto t2 = Clock::now();
    log_probs[i] = floored_log(p);
    t_nlm[i] = std::chrono::duration<double>(t1 - t0).count();
    t_knn[i] = std::chrono::duration<double>(t2 - t1).count();
  });

  EvalReport r;
  r.seconds = seconds_since(start);
  r.label = label;
  r.tokens = n;
  double sum = 0.0;
  for (double lp : log_probs) sum += lp;
  r.mean_nll = n ? -sum / static_cast<double>(n) : 0.0;
  r.perplexity = std::exp(r.mean_nll);
  r.tokens_per_second = r.seconds > 0.0 ? static_cast<double>(n) / r.seconds : 0.0;
  r.queries = setup.retriever ? setup.retriever->query_count() - queries_before : 0;
  r.retrieval_fraction = n ? static_cast<double>(r.queries) / static_cast<double>(n) : 0.0;
  r.t_nlm = std::accumulate(t_nlm.begin(), t_nlm.end(), 0.0);
  r.t_knn = std::accumulate(t_knn.begin(), t_knn.end(), 0.0);
  r.threads = setup.threads;
  if (setup.retriever && !(gated && gate.learned_weight)) r.lambda = setup.lambda;
  if (setup.retriever) r.dim = setup.retriever->datastore().dim();
  return r;
}

ComponentProbs component_probs(const CountLM& lm, const ContextEncoder& encoder, const Retriever& retriever,
                               const Corpus& corpus, std::size_t k, double distance_exponent, int threads) {
  const auto positions = positions_of(corpus);
  ComponentProbs out;
  out.p_nlm.resize(positions.size());
  out.p_knn.resize(positions.size());
  parallel_for(positions.size(), threads, [&](std::size_t i) {
    const auto hist = history_of(corpus, positions[i]);
    const TokenId target = corpus[positions[i].doc][positions[i].pos];
    const LmStep step = lm_step(lm, encoder, hist);
    out.p_nlm[i] = step.p_nlm[target];
    out.p_knn[i] = weighted_knn_distribution(retrieve(retriever, step.ctx, k, distance_exponent)).prob(target);
  });
  return out;
}

double mixture_perplexity(std::span<const double> p_knn, std::span<const double> p_nlm, double lambda) {
  if (p_knn.size() != p_nlm.size()) throw InvalidInput("probability vectors differ in length");
  std::vector<double> lp(p_knn.size());
  for (std::size_t i = 0; i < lp.size(); ++i) lp[i] = floored_log(interpolate_token(p_knn[i], p_nlm[i], lambda));
  return perplexity_of(lp);
}

std::vector<double> lambda_grid() {
  std::vector<double> grid;
  for (int i = 0; i <= 16; ++i) grid.push_back((10 + 5 * i) / 100.0);
  return grid;
}

double tune_lambda(const ComponentProbs& probs) {
  double best = 0.0;
  double best_ppl = std::numeric_limits<double>::infinity();
  for (double lam : lambda_grid()) {
    const double ppl = mixture_perplexity(probs.p_knn, probs.p_nlm, lam);
    if (ppl < best_ppl) {
      best_ppl = ppl;
      best = lam;
    }
  }
  return best;
}

std::vector<AdaptorExample> adaptor_dataset(const CountLM& lm, const ContextEncoder& encoder,
                                            const SuffixTables& tables, const Retriever& retriever,
                                            const Corpus& corpus, std::size_t k, double distance_exponent,
                                            int threads) {
  const auto positions = positions_of(corpus);
  std::vector<AdaptorExample> out(positions.size());
  parallel_for(positions.size(), threads, [&](std::size_t i) {
    const auto hist = history_of(corpus, positions[i]);
    const TokenId target = corpus[positions[i].doc][positions[i].pos];
    const LmStep step = lm_step(lm, encoder, hist);
    out[i].features = extract_features(step.p_nlm, step.ctx, tables, hist);
    out[i].p_nlm = step.p_nlm[target];
    out[i].p_knn = weighted_knn_distribution(retrieve(retriever, step.ctx, k, distance_exponent)).prob(target);
  });
  return out;
}

double threshold_for_fraction(std::span<const double> heldout_lambdas, double fraction) {
  if (!(fraction > 0.0)) return 0.0;
  if (fraction >= 1.0) return 1.0;
  return select_lambda_threshold(heldout_lambdas, fraction);
}

std::string AblationCell::label() const {
  return std::string(learned_mask ? "learned mask" : "random mask") + ", " +
         (learned_weight ? "learned weight" : "constant weight");
}

std::string AblationCell::to_json() const {
  nlohmann::ordered_json j;
  j["prune_fraction"] = prune_fraction;
  j["mask"] = learned_mask ? "learned" : "random";
  j["weight"] = learned_weight ? "learned" : "constant";
  j["perplexity"] = perplexity;
  j["retrieval_fraction"] = retrieval_fraction;
  return j.dump();
}

AblationInputs ablation_inputs(const CountLM& lm, const ContextEncoder& encoder, const SuffixTables& tables,
                               const Retriever& retriever, const AdaptorNet& adaptor, const Corpus& corpus,
                               std::size_t k, double distance_exponent, int threads) {
  const auto positions = positions_of(corpus);
  AblationInputs out;
  out.p_nlm.resize(positions.size());
  out.p_knn.resize(positions.size());
  out.lambda.resize(positions.size());
  parallel_for(positions.size(), threads, [&](std::size_t i) {
    const auto hist = history_of(corpus, positions[i]);
    const TokenId target = corpus[positions[i].doc][positions[i].pos];
    const LmStep step = lm_step(lm, encoder, hist);
    out.p_nlm[i] = step.p_nlm[target];
    out.lambda[i] = adaptor.forward(extract_features(step.p_nlm, step.ctx, tables, hist)).lambda();
    out.p_knn[i] = weighted_knn_distribution(retrieve(retriever, step.ctx, k, distance_exponent)).prob(target);
  });
  return out;
}

std::vector<AblationCell> ablation_grid(const AblationInputs& inputs, std::span<const double> heldout_lambdas,
                                        double constant_lambda, std::span<const double> fractions,
                                        std::uint64_t mask_seed) {
  const std::size_t n = inputs.p_nlm.size();
  std::vector<AblationCell> cells;
  for (double f : fractions) {
    const double threshold = threshold_for_fraction(heldout_lambdas, f);
    const auto random_mask = random_retrieval_mask(n, f, mask_seed);
    for (bool learned_mask : {true, false}) {
      for (bool learned_weight : {true, false}) {
        std::vector<double> lp(n);
        std::size_t retrieved = 0;
        for (std::size_t i = 0; i < n; ++i) {
          const bool use = learned_mask ? inputs.lambda[i] > threshold : static_cast<bool>(random_mask[i]);
          const double lam = learned_weight ? inputs.lambda[i] : constant_lambda;
          double p = inputs.p_nlm[i];
          if (use) {
            p = interpolate_token(inputs.p_knn[i], inputs.p_nlm[i], lam);
            ++retrieved;
          }
          lp[i] = floored_log(p);
        }
        AblationCell cell;
        cell.prune_fraction = f;
        cell.learned_mask = learned_mask;
        cell.learned_weight = learned_weight;
        cell.perplexity = perplexity_of(lp);
        cell.retrieval_fraction = n ? static_cast<double>(retrieved) / static_cast<double>(n) : 0.0;
        cells.push_back(cell);
      }
    }
  }
  return cells;
}

// ---------------------------------------------------------------------------
// Experiment

Experiment::Experiment(PipelineConfig config) : config_(std::move(config)) {}
Experiment::~Experiment() = default;

std::string Experiment::datastore_path(Stack stack) const {
  switch (stack) {
    case Stack::kVanilla:
      return config_.datastore;
    case Stack::kGm:
      return config_.gm_datastore;
    case Stack::kDr:
      return config_.dr_datastore;
    case Stack::kAll:
      return config_.all_datastore;
  }
  return "";
}

std::string Experiment::index_path(Stack stack) const {
  switch (stack) {
    case Stack::kVanilla:
      return config_.index;
    case Stack::kGm:
      return config_.gm_index;
    case Stack::kDr:
      return config_.dr_index;
    case Stack::kAll:
      return config_.all_index;
  }
  return "";
}

std::string Experiment::adaptor_path(Stack stack) const {
  if (stack == Stack::kVanilla) return config_.adaptor;
  if (stack == Stack::kAll) return config_.all_adaptor;
  throw ConfigError("the " + stack_name(stack) + " stack has no adaptor; use vanilla or all");
}

namespace {

std::string producing_stage(Stack stack) {
  switch (stack) {
    case Stack::kVanilla:
      return "build-datastore";
    case Stack::kGm:
      return "prune";
    case Stack::kDr:
      return "reduce --stack dr";
    case Stack::kAll:
      return "reduce --stack all";
  }
  return "?";
}

void require_path(const std::string& path, const std::string& key, const std::string& stage) {
  if (path.empty()) throw ConfigError("config key \"" + key + "\" is not set (needed by stage " + stage + ")");
  if (!std::filesystem::exists(path)) {
    throw ConfigError("missing artifact " + path + ": run stage " + stage + " first");
  }
}

void require_key(const std::string& value, const std::string& key) {
  if (value.empty()) throw ConfigError("config key \"" + key + "\" is not set");
}

std::string prefixed(Stack stack, const std::string& key) {
  return stack == Stack::kVanilla ? key : stack_name(stack) + "_" + key;
}

}  // namespace

void Experiment::forget(Stack stack) {
  datastores_.erase(stack);
  indexes_.erase(stack);
  adaptors_.erase(stack);
  lambdas_.erase(stack);
}

const Vocabulary& Experiment::vocab() {
  if (!vocab_) {
    require_path(config_.vocab, "vocab", "build-lm");
    vocab_ = std::make_unique<Vocabulary>(Vocabulary::load(config_.vocab));
  }
  return *vocab_;
}

const ReferenceModel& Experiment::model() {
  if (!model_) {
    require_path(config_.lm, "lm", "build-lm");
    model_ = std::make_unique<ReferenceModel>(ReferenceModel::load(config_.lm));
  }
  return *model_;
}

const Corpus& Experiment::corpus(const std::string& split) {
  auto it = corpora_.find(split);
  if (it != corpora_.end()) return it->second;
  std::string path;
  if (split == "lm") {
    path = config_.lm_corpus;
  } else if (split == "datastore") {
    path = config_.datastore_corpus;
  } else if (split == "valid") {
    path = config_.valid_corpus;
  } else if (split == "test") {
    path = config_.test_corpus;
  } else {
    throw ConfigError("unknown corpus split \"" + split + "\"");
  }
  require_key(path, split + "_corpus");
  if (!std::filesystem::exists(path)) throw ConfigError("corpus file " + path + " does not exist");
  Vocabulary v = vocab();
  return corpora_.emplace(split, read_corpus(path, v, false)).first->second;
}

const SuffixTables& Experiment::suffix_tables() {
  if (!tables_) tables_ = std::make_unique<SuffixTables>(SuffixTables::build(corpus("datastore")));
  return *tables_;
}

const Datastore& Experiment::datastore(Stack stack) {
  auto it = datastores_.find(stack);
  if (it != datastores_.end()) return *it->second;
  const auto path = datastore_path(stack);
  require_path(path, prefixed(stack, "datastore"), producing_stage(stack));
  return *datastores_.emplace(stack, std::make_unique<Datastore>(load_datastore(path))).first->second;
}

const IvfIndex& Experiment::index(Stack stack) {
  auto it = indexes_.find(stack);
  if (it != indexes_.end()) return *it->second;
  const auto path = index_path(stack);
  require_path(path, prefixed(stack, "index"), "build-index --stack " + stack_name(stack));
  auto idx = std::make_unique<IvfIndex>(load_index(path));
  if (idx->size() != datastore(stack).size() || idx->dim != datastore(stack).dim()) {
    throw ConfigError("index " + path + " does not match its datastore: rerun build-index --stack " +
                      stack_name(stack));
  }
  return *indexes_.emplace(stack, std::move(idx)).first->second;
}

const TrainedAdaptor& Experiment::adaptor(Stack stack) {
  auto it = adaptors_.find(stack);
  if (it != adaptors_.end()) return *it->second;
  const auto path = adaptor_path(stack);
  require_path(path, prefixed(stack, "adaptor"), "train-adaptor --stack " + stack_name(stack));
  return *adaptors_.emplace(stack, std::make_unique<TrainedAdaptor>(TrainedAdaptor::load(path))).first->second;
}

std::unique_ptr<Retriever> Experiment::retriever(Stack stack) {
  const Datastore& ds = datastore(stack);
  if (index_path(stack).empty()) return std::make_unique<FlatRetriever>(ds);
  return std::make_unique<IvfRetriever>(ds, index(stack), config_.nprobe);
}

double Experiment::lambda(Stack stack) {
  if (config_.lambda) {
    if (*config_.lambda < 0.0 || *config_.lambda > 1.0) throw ConfigError("lambda must be in [0, 1]");
    return *config_.lambda;
  }
  auto it = lambdas_.find(stack);
  if (it != lambdas_.end()) return it->second;
  return tune_lambda(stack);
}

double Experiment::threshold_for(Stack stack) {
  const auto& a = adaptor(stack);
  if (a.prune_fraction == config_.ar_prune_fraction) return a.threshold;
  return threshold_for_fraction(a.heldout_lambdas, config_.ar_prune_fraction);
}

void Experiment::build_lm() {
  require_key(config_.lm_corpus, "lm_corpus");
  require_key(config_.vocab, "vocab");
  require_key(config_.lm, "lm");
  Vocabulary v;
  std::vector<std::string> sources{config_.lm_corpus};
  if (!config_.datastore_corpus.empty()) sources.push_back(config_.datastore_corpus);
  Corpus lm_corpus;
  for (const auto& path : sources) {
    if (!std::filesystem::exists(path)) throw ConfigError("corpus file " + path + " does not exist");
    Corpus c = read_corpus(path, v, true);
    if (path == config_.lm_corpus) lm_corpus = std::move(c);
  }
  ReferenceModel m{CountLM::fit(lm_corpus, v.size(), config_.lm_order, config_.lm_smoothing),
                   ContextEncoder(v.size(), config_.encoder_dim, config_.encoder_decay, config_.encoder_window,
                                  config_.seed)};
  v.save(config_.vocab);
  m.save(config_.lm);
  vocab_ = std::make_unique<Vocabulary>(std::move(v));
  model_ = std::make_unique<ReferenceModel>(std::move(m));
  corpora_.clear();
  tables_.reset();
  for (Stack s : {Stack::kVanilla, Stack::kGm, Stack::kDr, Stack::kAll}) forget(s);
}

DatastoreStats Experiment::build_datastore() {
  require_key(config_.datastore, "datastore");
  const auto& c = corpus("datastore");
  const Datastore ds = knnlm::build_datastore(c, model().encoder,
                                              std::filesystem::path(config_.datastore_corpus).filename().string());
  save_datastore(ds, config_.datastore, config_.half_keys);
  forget(Stack::kVanilla);
  return datastore_stats(datastore(Stack::kVanilla));
}

void Experiment::build_index(Stack stack) {
  const auto path = index_path(stack);
  require_key(path, prefixed(stack, "index"));
  const Datastore& ds = datastore(stack);
  IvfOptions opts;
  opts.nlist = config_.nlist;
  opts.seed = config_.seed;
  opts.max_iters = config_.ivf_iters;
  opts.train_points_per_list = config_.ivf_train_per_list;
  opts.pq_m = config_.pq_m;
  opts.pq_bits = config_.pq_bits;
  save_index(build_ivf(ds, opts), path);
  indexes_.erase(stack);
  lambdas_.erase(stack);
}

PruneReport Experiment::prune(const std::string& method, double retain, std::size_t gm_k, std::size_t kmeans_top_m,
                              double kmeans_ratio, std::uint64_t seed, Stack source, Stack target) {
  const auto out_path = datastore_path(target);
  require_key(out_path, prefixed(target, "datastore"));
  const Datastore& ds = datastore(source);
  NeighborSource neighbors;
  if (config_.gm_nprobe > 0 && !index_path(source).empty()) {
    neighbors.index = &index(source);
    neighbors.nprobe = config_.gm_nprobe;
  }
  const auto t0 = Clock::now();
  std::optional<Datastore> pruned;
  std::string label = method;
  if (method == "random") {
    pruned.emplace(random_prune(ds, retain, seed));
  } else if (method == "kmeans") {
    pruned.emplace(kmeans_prune(ds, kmeans_top_m, kmeans_ratio, seed));
  } else if (method == "gm") {
    if (gm_k > 0) {
      pruned.emplace(greedy_merge(ds, neighbors, gm_k, config_.threads));
    } else {
      constexpr std::size_t kMaxK = 100;
      const auto lists = neighbor_lists(ds, neighbors, kMaxK, config_.threads);
      gm_k = gm_k_for_retention(ds, lists, retain, kMaxK);
      pruned.emplace(greedy_merge_lists(ds, lists, gm_k));
    }
    label = "gm K=" + std::to_string(gm_k);
  } else if (method == "rank") {
    const auto scores = self_importance_scores(ds, neighbors, config_.rank_k, config_.threads);
    pruned.emplace(rank_prune(ds, scores, retain));
  } else {
    throw ConfigError("unknown prune method \"" + method + "\"");
  }
  const double secs = seconds_since(t0);
  auto report = make_prune_report(label, ds, *pruned, secs);
  save_datastore(*pruned, out_path, config_.half_keys);
  forget(target);
  return report;
}

PruneReport Experiment::reduce(std::size_t dim, bool rotate, std::uint64_t seed, Stack target) {
  if (target != Stack::kDr && target != Stack::kAll) throw ConfigError("reduce writes the dr or all stack");
  const Stack source = target == Stack::kDr ? Stack::kVanilla : Stack::kGm;
  const auto out_path = datastore_path(target);
  require_key(out_path, prefixed(target, "datastore"));
  const Datastore& ds = datastore(source);
  const auto t0 = Clock::now();
  PcaTransform t = fit_pca(ds.keys(), ds.size(), ds.dim(), dim, config_.dr_sample_cap, seed);
  if (rotate) t = with_rotation(std::move(t), seed + 1);
  Datastore reduced = reduce_datastore(ds, t);
  auto report = make_prune_report("pca d=" + std::to_string(dim) + (rotate ? " rotated" : ""), ds, reduced,
                                  seconds_since(t0));
  save_datastore(reduced, out_path, config_.half_keys);
  forget(target);
  return report;
}

AdaptorTrainLog Experiment::train_adaptor(Stack stack) {
  const auto path = adaptor_path(stack);
  require_key(path, prefixed(stack, "adaptor"));
  const auto& m = model();
  const auto r = retriever(stack);
  const auto data = adaptor_dataset(m.lm, m.encoder, suffix_tables(), *r, corpus("valid"), config_.k,
                                    config_.distance_exponent, config_.threads);
  AdaptorTrainConfig tc;
  tc.l1 = config_.adaptor_l1;
  tc.learning_rate = config_.adaptor_lr;
  tc.epochs = config_.adaptor_epochs;
  tc.patience = config_.adaptor_patience;
  tc.batch_size = config_.adaptor_batch;
  tc.holdout_fraction = config_.adaptor_holdout;
  tc.select_prune_fraction = config_.ar_prune_fraction;
  tc.seed = config_.seed;
  tc.arch.ctx_dim = m.encoder.dim();
  tc.arch.mask = config_.adaptor_features;
  tc.arch.hidden_layers = config_.adaptor_hidden_layers;
  tc.arch.hidden_units = config_.adaptor_hidden_units;
  tc.arch.dropout = config_.adaptor_dropout;
  TrainedAdaptor trained = knnlm::train_adaptor(data, tc);
  trained.save(path);
  auto log = trained.log;
  adaptors_[stack] = std::make_unique<TrainedAdaptor>(std::move(trained));
  return log;
}

double Experiment::tune_lambda(Stack stack) {
  const auto& m = model();
  const auto r = retriever(stack);
  const auto probs = component_probs(m.lm, m.encoder, *r, corpus("valid"), config_.k, config_.distance_exponent,
                                     config_.threads);
  const double lam = knnlm::tune_lambda(probs);
  lambdas_[stack] = lam;
  return lam;
}

EvalReport Experiment::eval(EvalMode mode, const std::string& split) {
  const auto& m = model();
  const Corpus& c = corpus(split);
  EvalSetup setup;
  setup.lm = &m.lm;
  setup.encoder = &m.encoder;
  setup.k = config_.k;
  setup.distance_exponent = config_.distance_exponent;
  setup.threads = config_.threads;
  std::unique_ptr<Retriever> r;
  const auto stack = mode_stack(mode);
  if (stack) {
    r = retriever(*stack);
    setup.retriever = r.get();
    setup.lambda = lambda(*stack);
    if (mode == EvalMode::kAr || mode == EvalMode::kAll) {
      setup.adaptor = &adaptor(*stack).net;
      setup.tables = &suffix_tables();
      setup.threshold = threshold_for(*stack);
      setup.gate.enabled = true;
      setup.gate.learned_mask = true;
      setup.gate.learned_weight = true;
      setup.gate.prune_fraction = config_.ar_prune_fraction;
    }
  }
  EvalReport report = evaluate(setup, c, mode_name(mode));
  report.config_hash = config_.config_hash();
  if (stack) {
    report.retention = static_cast<double>(datastore(*stack).size()) /
                       static_cast<double>(datastore(Stack::kVanilla).size());
  }
  return report;
}

std::vector<SpeedRow> Experiment::bench(std::span<const EvalMode> modes, int repetitions) {
  if (repetitions < 1) throw ConfigError("bench needs at least one repetition");
  std::vector<SpeedRow> rows;
  for (EvalMode mode : modes) {
    eval(mode);  // warmup; also loads and tunes everything the mode needs
    std::vector<EvalReport> runs;
    for (int i = 0; i < repetitions; ++i) runs.push_back(eval(mode));
    std::sort(runs.begin(), runs.end(),
              [](const EvalReport& a, const EvalReport& b) { return a.tokens_per_second < b.tokens_per_second; });
    SpeedRow row;
    for (const auto& r : runs) row.tokens_per_second.push_back(r.tokens_per_second);
    row.report = runs[runs.size() / 2];
    rows.push_back(std::move(row));
  }
  const auto base = std::find_if(rows.begin(), rows.end(),
                                 [](const SpeedRow& r) { return r.report.label == mode_name(EvalMode::kKnnlm); });
  if (base != rows.end()) {
    const double base_tps = base->report.tokens_per_second;
    for (auto& r : rows) r.report.speedup = r.report.tokens_per_second / base_tps;
  }
  return rows;
}

std::vector<AblationCell> Experiment::ablate(Stack stack, std::uint64_t mask_seed) {
  const auto& m = model();
  const auto r = retriever(stack);
  const auto& a = adaptor(stack);
  const auto inputs = ablation_inputs(m.lm, m.encoder, suffix_tables(), *r, a.net, corpus("test"), config_.k,
                                      config_.distance_exponent, config_.threads);
  return ablation_grid(inputs, a.heldout_lambdas, lambda(stack), config_.ablation_fractions, mask_seed);
}

void Experiment::compose_all(const AllSettings& settings) {
  require_key(config_.gm_datastore, "gm_datastore");
  require_key(config_.all_datastore, "all_datastore");
  prune("gm", settings.gm_retention, 0, 0, 0.0, config_.seed, Stack::kVanilla, Stack::kGm);
  reduce(settings.dr_dim, config_.dr_rotate, config_.seed, Stack::kAll);
  if (!config_.all_index.empty()) build_index(Stack::kAll);
  config_.ar_prune_fraction = settings.ar_prune_fraction;
  train_adaptor(Stack::kAll);
}

AllSettings Experiment::select_all_settings(std::span<const double> ar_fractions,
                                            std::span<const double> gm_retentions,
                                            std::span<const std::size_t> dr_dims, double tolerance) {
  const auto& m = model();
  const Corpus& valid = corpus("valid");
  const double vanilla_lambda = lambda(Stack::kVanilla);

  // Validation perplexity of a candidate datastore with its own tuned lambda.
  auto candidate_ppl = [&](const Datastore& ds) {
    std::unique_ptr<IvfIndex> idx;
    std::unique_ptr<Retriever> r;
    if (index_path(Stack::kVanilla).empty()) {
      r = std::make_unique<FlatRetriever>(ds);
    } else {
      IvfOptions opts;
      opts.nlist = config_.nlist;
      opts.seed = config_.seed;
      opts.max_iters = config_.ivf_iters;
      opts.train_points_per_list = config_.ivf_train_per_list;
      opts.pq_m = config_.pq_m;
      opts.pq_bits = config_.pq_bits;
      idx = std::make_unique<IvfIndex>(build_ivf(ds, opts));
      r = std::make_unique<IvfRetriever>(ds, *idx, config_.nprobe);
    }
    const auto probs = component_probs(m.lm, m.encoder, *r, valid, config_.k, config_.distance_exponent,
                                       config_.threads);
    return mixture_perplexity(probs.p_knn, probs.p_nlm, knnlm::tune_lambda(probs));
  };

  AllSettings out;
  const double vanilla_ppl = [&] {
    const auto base = retriever(Stack::kVanilla);
    const auto probs = component_probs(m.lm, m.encoder, *base, valid, config_.k, config_.distance_exponent,
                                       config_.threads);
    return mixture_perplexity(probs.p_knn, probs.p_nlm, vanilla_lambda);
  }();

  // AR: judged on the adaptor's own held-out split.
  const auto& a = adaptor(Stack::kVanilla);
  const double heldout_base = mixture_perplexity(a.heldout_p_knn, a.heldout_p_nlm, vanilla_lambda);
  out.ar_prune_fraction = 0.0;
  for (double r : ar_fractions) {
    const double ppl =
        gated_perplexity(a.heldout_lambdas, a.heldout_p_knn, a.heldout_p_nlm, threshold_for_fraction(a.heldout_lambdas, r));
    if (ppl - heldout_base <= tolerance) out.ar_prune_fraction = std::max(out.ar_prune_fraction, r);
  }

  const Datastore& ds = datastore(Stack::kVanilla);
  NeighborSource neighbors;
  if (config_.gm_nprobe > 0 && !index_path(Stack::kVanilla).empty()) {
    neighbors.index = &index(Stack::kVanilla);
    neighbors.nprobe = config_.gm_nprobe;
  }
  constexpr std::size_t kMaxK = 100;
  const auto lists = neighbor_lists(ds, neighbors, kMaxK, config_.threads);
  out.gm_retention = 1.0;
  for (double n : gm_retentions) {
    if (n >= out.gm_retention) continue;
    const Datastore merged = greedy_merge_lists(ds, lists, gm_k_for_retention(ds, lists, n, kMaxK));
    if (candidate_ppl(merged) - vanilla_ppl <= tolerance) out.gm_retention = n;
  }

  out.dr_dim = ds.dim();
  for (std::size_t d : dr_dims) {
    if (d >= out.dr_dim) continue;
    PcaTransform t = fit_pca(ds.keys(), ds.size(), ds.dim(), d, config_.dr_sample_cap, config_.seed);
    if (config_.dr_rotate) t = with_rotation(std::move(t), config_.seed + 1);
    if (candidate_ppl(reduce_datastore(ds, t)) - vanilla_ppl <= tolerance) out.dr_dim = d;
  }
  return out;
}

}  // namespace knnlm
