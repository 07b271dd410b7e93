#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace knnlm {

/// Flat key=value pipeline configuration. Lines starting with '#' are comments;
/// unknown keys are configuration errors. Relative paths are resolved against
/// the directory of the config file.
struct PipelineConfig {
  // Corpora: UTF-8, whitespace-tokenized, one document per line.
  std::string lm_corpus;
  std::string datastore_corpus;
  std::string valid_corpus;
  std::string test_corpus;

  // Artifacts. The unprefixed set is the vanilla kNN-LM stack; gm_/dr_/all_
  // hold the greedy-merged, reduced, and fully combined stacks.
  std::string vocab;
  std::string lm;
  std::string datastore;
  std::string index;
  std::string adaptor;
  std::string gm_datastore;
  std::string gm_index;
  std::string dr_datastore;
  std::string dr_index;
  std::string all_datastore;
  std::string all_index;
  std::string all_adaptor;

  // Reference LM and key function.
  int lm_order = 3;
  double lm_smoothing = 0.1;
  std::size_t encoder_dim = 64;
  double encoder_decay = 0.5;
  std::size_t encoder_window = 8;

  // Retrieval and interpolation. An unset lambda is tuned on validation data.
  std::size_t k = 1024;
  std::optional<double> lambda;
  double distance_exponent = 1.0;  // hits' squared L2 is raised to this power before exp(-d)
  std::size_t nlist = 0;           // 0 selects round(4 sqrt(N))
  std::size_t nprobe = 32;
  int ivf_iters = 25;
  std::size_t ivf_train_per_list = 64;
  std::size_t pq_m = 0;
  int pq_bits = 8;
  bool half_keys = false;

  // Adaptive retrieval.
  double ar_prune_fraction = 0.5;
  double adaptor_l1 = 0.05;
  double adaptor_lr = 5e-4;
  int adaptor_epochs = 20;
  int adaptor_patience = 5;
  std::size_t adaptor_batch = 256;
  std::size_t adaptor_hidden_layers = 4;
  std::size_t adaptor_hidden_units = 128;
  double adaptor_dropout = 0.2;
  double adaptor_holdout = 0.1;
  std::uint32_t adaptor_features = 0x1f;

  // Datastore pruning.
  std::string prune_method = "gm";
  double prune_retain = 0.5;
  std::size_t gm_k = 8;
  std::size_t gm_nprobe = 0;  // 0 uses the exact flat scan for neighbor lookup
  std::size_t kmeans_top_m = 5000;
  double kmeans_ratio = 0.05;
  std::size_t rank_k = 1024;

  // Dimension reduction.
  std::size_t dr_dim = 32;
  bool dr_rotate = true;
  std::size_t dr_sample_cap = 100000;

  // Reporting.
  std::vector<double> ablation_fractions = {0.0, 0.25, 0.5, 0.75, 1.0};
  int bench_reps = 3;

  std::uint64_t seed = 1;
  int threads = 1;

  /// Applies one key=value assignment; throws ConfigError on unknown keys or bad values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  /// Sorted "key=value" lines; the basis of config_hash().
  std::string canonical() const;
  /// FNV-1a of canonical(), 16 hex digits.
  std::string config_hash() const;
};

PipelineConfig parse_config(const std::string& text, const std::string& base_dir = "");
PipelineConfig load_config(const std::string& path);

}  // namespace knnlm
