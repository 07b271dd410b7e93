#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "knnlm/ann_index.hpp"
#include "knnlm/knn_distribution.hpp"
#include "knnlm/reference_lm.hpp"

namespace knnlm {

/// Number of scalar feature types: conf, ent, log_freq[1..4], log_fert[1..4].
inline constexpr std::size_t kScalarFeatures = 10;

/// Which feature groups feed the adaptor.
enum FeatureBits : std::uint32_t {
  kFeatureCtx = 1u << 0,
  kFeatureConf = 1u << 1,
  kFeatureEnt = 1u << 2,
  kFeatureLogFreq = 1u << 3,
  kFeatureLogFert = 1u << 4,
};
inline constexpr std::uint32_t kAllFeatures = 0x1f;
/// Everything except log_freq.
inline constexpr std::uint32_t kFeaturesNoLogFreq = kAllFeatures & ~kFeatureLogFreq;

/// Parses "all", "no-log-freq", or a '+'-separated list such as "ctx+conf+ent".
std::uint32_t parse_feature_mask(const std::string& text);
std::string feature_mask_name(std::uint32_t mask);

struct FeatureVector {
  std::vector<float> ctx;
  double conf = 0.0;
  double ent = 0.0;
  std::array<double, 4> log_freq{};
  std::array<double, 4> log_fert{};

  /// conf, ent, log_freq[0..3], log_fert[0..3].
  std::array<double, kScalarFeatures> scalars() const;
};

FeatureVector extract_features(const DenseDist& p_nlm, std::span<const float> ctx, const SuffixTables& tables,
                               std::span<const TokenId> history);

/// Per-scalar standardization statistics, fitted on the adaptor training split.
struct FeatureStats {
  std::array<double, kScalarFeatures> mean{};
  std::array<double, kScalarFeatures> stddev{1, 1, 1, 1, 1, 1, 1, 1, 1, 1};

  static FeatureStats fit(std::span<const FeatureVector> features);
};

struct AdaptorArch {
  std::size_t ctx_dim = 64;
  std::uint32_t mask = kAllFeatures;
  std::size_t embed_dim = 0;  // 0 selects max(4, ctx_dim / 10)
  std::size_t hidden_layers = 4;
  std::size_t hidden_units = 128;
  double dropout = 0.2;
};

/// MLP producing (log lambda, log(1 - lambda)). Each active scalar feature is
/// embedded by Linear(1, m)-ReLU-Linear(m, m); the embeddings and the context
/// vector feed an input layer, `hidden_layers` hidden layers (ReLU + dropout),
/// and a 2-way output followed by log-softmax.
class AdaptorNet {
 public:
  struct Output {
    double log_lambda = 0.0;
    double log_one_minus_lambda = 0.0;
    double lambda() const;
  };

  struct Linear {
    std::size_t in = 0;
    std::size_t out = 0;
    std::size_t weight_offset = 0;  // out x in, row-major
    std::size_t bias_offset = 0;
  };

  AdaptorNet(const AdaptorArch& arch, std::uint64_t seed);

  const AdaptorArch& arch() const { return arch_; }
  std::size_t embed_dim() const { return embed_dim_; }
  std::size_t parameter_count() const { return params_.size(); }
  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  /// Scalar feature slots (0..9) consumed under the current mask.
  const std::vector<std::size_t>& active_scalars() const { return active_; }
  const std::vector<Linear>& embed_layers() const { return embed_layers_; }
  const std::vector<Linear>& trunk_layers() const { return trunk_layers_; }

  FeatureStats& stats() { return stats_; }
  const FeatureStats& stats() const { return stats_; }

  /// Deterministic when `rng` is null (dropout off).
  Output forward(const FeatureVector& features, std::mt19937_64* rng = nullptr) const;
  std::vector<Output> forward_batch(std::span<const FeatureVector* const> batch, std::mt19937_64* rng = nullptr) const;

  /// Mean over the batch of -log(lambda p_knn + (1 - lambda) p_nlm) + a * lambda,
  /// and its gradient with respect to every parameter.
  double loss_and_grad(std::span<const FeatureVector* const> batch, std::span<const double> p_knn,
                       std::span<const double> p_nlm, double l1, std::vector<double>* grad,
                       std::mt19937_64* rng = nullptr) const;

  /// Rounds every parameter to the nearest float so checkpoints reload exactly.
  void round_to_float();

  std::vector<double> standardized_scalars(const FeatureVector& f) const;

 private:
  struct Cache;
  void run(std::span<const FeatureVector* const> batch, std::mt19937_64* rng, Cache& cache) const;

  AdaptorArch arch_;
  std::size_t embed_dim_;
  std::vector<std::size_t> active_;
  std::vector<Linear> embed_layers_;  // two per active scalar
  std::vector<Linear> trunk_layers_;  // input, hidden..., output
  std::vector<double> params_;
  FeatureStats stats_;
};

/// Single-example training record: features plus the target token's
/// probability under each component distribution.
struct AdaptorExample {
  FeatureVector features;
  double p_knn = 0.0;
  double p_nlm = 0.0;
};

struct LossGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

LossGrad adaptor_loss_and_grad(const AdaptorNet& net, std::span<const AdaptorExample> batch, double l1);

struct AdaptorTrainConfig {
  double l1 = 0.05;
  double learning_rate = 5e-4;
  int epochs = 20;
  int patience = 5;
  std::size_t batch_size = 256;
  double holdout_fraction = 0.1;
  double select_prune_fraction = 0.5;
  AdaptorArch arch;
  std::uint64_t seed = 0;
};

struct AdaptorTrainLog {
  std::vector<double> train_loss;   // eval-mode objective on the training split per epoch
  std::vector<double> heldout_ppl;  // at select_prune_fraction
  int best_epoch = 0;
  std::size_t train_examples = 0;
  std::size_t heldout_examples = 0;
};

/// A trained network, its retrieval threshold, and the held-out split's lambdas
/// and target probabilities, used to pick thresholds for other pruning fractions.
struct TrainedAdaptor {
  AdaptorNet net;
  double threshold = 0.0;
  double prune_fraction = 0.5;
  std::vector<double> heldout_lambdas;
  std::vector<double> heldout_p_knn;
  std::vector<double> heldout_p_nlm;
  AdaptorTrainLog log;

  void save(const std::string& path) const;
  static TrainedAdaptor load(const std::string& path);
};

/// Adam on the objective above with a 90/10 train/held-out split; keeps the
/// epoch with the best held-out perplexity at `select_prune_fraction`.
TrainedAdaptor train_adaptor(std::span<const AdaptorExample> dataset, const AdaptorTrainConfig& config);

/// Perplexity when the `prune_fraction` lowest-lambda tokens fall back to p_nlm.
double gated_perplexity(std::span<const double> lambdas, std::span<const double> p_knn,
                        std::span<const double> p_nlm, double threshold);

/// The prune_fraction-quantile of `lambdas`: tokens with lambda <= threshold
/// skip retrieval. A fraction of 0 returns 0, below every lambda.
double select_lambda_threshold(std::span<const double> lambdas, double prune_fraction);

struct AdaptivePrediction {
  DenseDist distribution;
  double lambda = 0.0;
  bool retrieved = false;
};

/// Gated kNN-LM step: below the threshold no search is issued and p_nlm is
/// returned; otherwise the learned lambda mixes in the weighted kNN distribution.
AdaptivePrediction adaptive_predict(const AdaptorNet& net, double threshold, const LmStep& step,
                                    const FeatureVector& features, const Retriever& retriever, std::size_t k);

}  // namespace knnlm
