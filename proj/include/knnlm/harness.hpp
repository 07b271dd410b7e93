#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "knnlm/adaptor.hpp"
#include "knnlm/ann_index.hpp"
#include "knnlm/config.hpp"
#include "knnlm/datastore.hpp"
#include "knnlm/pruning.hpp"
#include "knnlm/reference_lm.hpp"

namespace knnlm {

/// Datastore/index/adaptor sets the pipeline keeps side by side.
enum class Stack { kVanilla, kGm, kDr, kAll };
std::string stack_name(Stack stack);
Stack parse_stack(const std::string& text);

enum class EvalMode { kNlm, kKnnlm, kAr, kGm, kDr, kAll };
/// "nlm", "knnlm", "knnlm+AR", "knnlm+GM", "knnlm+DR", "knnlm+All".
std::string mode_name(EvalMode mode);
/// Accepts the names above, the "+AR" shorthands, and lower case.
EvalMode parse_mode(const std::string& text);
/// Stack a mode retrieves from; nullopt for nlm.
std::optional<Stack> mode_stack(EvalMode mode);

struct EvalReport {
  std::string label;
  double perplexity = 0.0;
  double mean_nll = 0.0;
  std::size_t tokens = 0;
  double seconds = 0.0;
  double tokens_per_second = 0.0;
  std::optional<double> speedup;
  double retrieval_fraction = 0.0;
  std::uint64_t queries = 0;
  std::optional<double> retention;
  std::optional<std::size_t> dim;
  std::optional<double> lambda;  // the constant weight, when one is used
  std::string config_hash;
  double t_nlm = 0.0;
  double t_knn = 0.0;
  int threads = 1;

  std::string to_json() const;
};

/// Per-token retrieval gate. Disabled means every token retrieves with the
/// constant lambda.
struct GateSpec {
  bool enabled = false;
  bool learned_mask = true;
  bool learned_weight = true;
  double prune_fraction = 0.5;
  std::uint64_t mask_seed = 0;
};

/// Everything one evaluation pass reads. Pointers are borrowed.
struct EvalSetup {
  const CountLM* lm = nullptr;
  const ContextEncoder* encoder = nullptr;
  const Retriever* retriever = nullptr;  // null evaluates the base LM alone
  std::size_t k = 1024;
  double lambda = 0.25;
  double distance_exponent = 1.0;
  const AdaptorNet* adaptor = nullptr;  // required by gates with a learned part
  const SuffixTables* tables = nullptr;
  double threshold = 0.0;  // learned mask: tokens with lambda <= threshold skip retrieval
  GateSpec gate;
  int threads = 1;
};

/// Streams the corpus token by token: base LM step, optional gate, search,
/// weighted kNN distribution, interpolation. Perplexity is exp of the mean
/// negative log-likelihood in nats; retrieval_fraction is the retriever's query
/// count over the token count.
EvalReport evaluate(const EvalSetup& setup, const Corpus& corpus, const std::string& label);

/// Number of tokens a random mask drops at `fraction`: ceil(fraction * n), 0 at fraction 0.
std::size_t skip_count(double fraction, std::size_t n);

/// Positions (in corpus order) a seeded random mask lets through.
std::vector<bool> random_retrieval_mask(std::size_t tokens, double prune_fraction, std::uint64_t seed);

/// Target-token probabilities with retrieval on every token.
struct ComponentProbs {
  std::vector<double> p_nlm;
  std::vector<double> p_knn;
};

ComponentProbs component_probs(const CountLM& lm, const ContextEncoder& encoder, const Retriever& retriever,
                               const Corpus& corpus, std::size_t k, double distance_exponent, int threads);

/// Perplexity of lambda * p_knn + (1 - lambda) * p_nlm with the log-prob floor.
double mixture_perplexity(std::span<const double> p_knn, std::span<const double> p_nlm, double lambda);

/// {0.10, 0.15, ..., 0.90}.
std::vector<double> lambda_grid();
/// Grid point with the lowest perplexity; ties go to the smaller lambda.
double tune_lambda(const ComponentProbs& probs);

std::vector<AdaptorExample> adaptor_dataset(const CountLM& lm, const ContextEncoder& encoder,
                                            const SuffixTables& tables, const Retriever& retriever,
                                            const Corpus& corpus, std::size_t k, double distance_exponent,
                                            int threads);

/// Threshold that drops `fraction` of retrievals according to held-out lambdas.
/// Fraction 0 keeps everything, fraction 1 drops everything.
double threshold_for_fraction(std::span<const double> heldout_lambdas, double fraction);

struct AblationCell {
  double prune_fraction = 0.0;
  bool learned_mask = false;
  bool learned_weight = false;
  double perplexity = 0.0;
  double retrieval_fraction = 0.0;

  std::string label() const;
  std::string to_json() const;
};

/// Per-token quantities that every ablation cell is a function of.
struct AblationInputs {
  std::vector<double> p_nlm;
  std::vector<double> p_knn;
  std::vector<double> lambda;  // adaptor output per token
};

AblationInputs ablation_inputs(const CountLM& lm, const ContextEncoder& encoder, const SuffixTables& tables,
                               const Retriever& retriever, const AdaptorNet& adaptor, const Corpus& corpus,
                               std::size_t k, double distance_exponent, int threads);

/// {learned, random mask} x {learned, constant weight} at every fraction.
/// Learned-mask thresholds come from the adaptor's held-out lambdas.
std::vector<AblationCell> ablation_grid(const AblationInputs& inputs, std::span<const double> heldout_lambdas,
                                        double constant_lambda, std::span<const double> fractions,
                                        std::uint64_t mask_seed);

/// Median-of-repetitions timing for one mode.
struct SpeedRow {
  EvalReport report;  // the median repetition
  std::vector<double> tokens_per_second;
};

/// Settings for the combined pipeline.
struct AllSettings {
  double ar_prune_fraction = 0.5;
  double gm_retention = 0.6;
  std::size_t dr_dim = 32;
};

/// Loads, builds, and evaluates pipeline artifacts named by a PipelineConfig.
/// Artifacts are cached after first use; a stage that writes an artifact
/// refreshes the cache. Reading an artifact that was never built raises a
/// ConfigError naming the stage that produces it.
class Experiment {
 public:
  explicit Experiment(PipelineConfig config);
  ~Experiment();

  const PipelineConfig& config() const { return config_; }
  PipelineConfig& mutable_config() { return config_; }

  // Stages.
  void build_lm();
  DatastoreStats build_datastore();
  void build_index(Stack stack);
  PruneReport prune(const std::string& method, double retain, std::size_t gm_k, std::size_t kmeans_top_m,
                    double kmeans_ratio, std::uint64_t seed, Stack source = Stack::kVanilla,
                    Stack target = Stack::kGm);
  PruneReport reduce(std::size_t dim, bool rotate, std::uint64_t seed, Stack target);
  AdaptorTrainLog train_adaptor(Stack stack);
  double tune_lambda(Stack stack);

  // Evaluation.
  EvalReport eval(EvalMode mode, const std::string& split = "test");
  std::vector<SpeedRow> bench(std::span<const EvalMode> modes, int repetitions);
  std::vector<AblationCell> ablate(Stack stack, std::uint64_t mask_seed);

  /// Builds the combined stack in the order GM -> DR -> index -> AR.
  void compose_all(const AllSettings& settings);
  /// Most aggressive candidate settings whose validation perplexity is within
  /// `tolerance` of vanilla kNN-LM. Candidates are tried independently per
  /// technique, as each technique's setting is chosen on its own.
  AllSettings select_all_settings(std::span<const double> ar_fractions, std::span<const double> gm_retentions,
                                  std::span<const std::size_t> dr_dims, double tolerance = 0.1);

  // Artifacts.
  const Vocabulary& vocab();
  const ReferenceModel& model();
  const Corpus& corpus(const std::string& split);
  const SuffixTables& suffix_tables();
  const Datastore& datastore(Stack stack);
  const IvfIndex& index(Stack stack);
  const TrainedAdaptor& adaptor(Stack stack);
  std::unique_ptr<Retriever> retriever(Stack stack);
  /// Configured lambda, or the validation-tuned one for this stack.
  double lambda(Stack stack);

 private:
  std::string datastore_path(Stack stack) const;
  std::string index_path(Stack stack) const;
  std::string adaptor_path(Stack stack) const;
  double threshold_for(Stack stack);
  void forget(Stack stack);

  PipelineConfig config_;
  std::unique_ptr<Vocabulary> vocab_;
  std::unique_ptr<ReferenceModel> model_;
  std::map<std::string, Corpus> corpora_;
  std::unique_ptr<SuffixTables> tables_;
  std::map<Stack, std::unique_ptr<Datastore>> datastores_;
  std::map<Stack, std::unique_ptr<IvfIndex>> indexes_;
  std::map<Stack, std::unique_ptr<TrainedAdaptor>> adaptors_;
  std::map<Stack, double> lambdas_;
};

}  // namespace knnlm
