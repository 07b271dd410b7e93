#include <CLI11.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <json.hpp>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "knnlm/config.hpp"
#include "knnlm/harness.hpp"
#include "knnlm/toy_corpus.hpp"

using namespace knnlm;

namespace {

constexpr int kConfigExit = 2;
constexpr int kFormatExit = 3;

// Human-readable tables go to stderr so stdout stays pure JSON-lines.
void print_table(const std::vector<std::string>& header, const std::vector<std::vector<std::string>>& rows) {
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) width[c] = header[c].size();
  for (const auto& r : rows) {
    for (std::size_t c = 0; c < r.size(); ++c) width[c] = std::max(width[c], r[c].size());
  }
  auto line = [&](const std::vector<std::string>& cells) {
    std::string out;
    for (std::size_t c = 0; c < cells.size(); ++c) {
      out += cells[c] + std::string(width[c] - cells[c].size() + 2, ' ');
    }
    std::cerr << out << "\n";
  };
  line(header);
  for (const auto& r : rows) line(r);
}

std::string fmt(double v, int precision = 3) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", precision, v);
  return buf;
}

std::vector<std::string> report_row(const EvalReport& r) {
  return {r.label,
          fmt(r.perplexity),
          fmt(r.tokens_per_second, 1),
          r.speedup ? fmt(*r.speedup, 2) + "x" : "-",
          fmt(r.retrieval_fraction),
          r.retention ? fmt(*r.retention) : "-",
          r.dim ? std::to_string(*r.dim) : "-",
          r.lambda ? fmt(*r.lambda, 2) : (r.queries ? "learned" : "-"),
          fmt(r.t_nlm, 2),
          fmt(r.t_knn, 2)};
}

const std::vector<std::string> kReportHeader{"model",     "ppl", "tok/s",  "speedup", "retrieved",
                                             "retention", "dim", "lambda", "t_nlm",   "t_knn"};

void write_toy(const std::string& dir, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  ToyBenchmarkOptions opts;
  opts.seed = seed;
  const auto toy = make_toy_benchmark(opts);
  const std::filesystem::path d(dir);
  write_lines((d / "lm.txt").string(), toy.lm_lines);
  write_lines((d / "datastore.txt").string(), toy.datastore_lines);
  write_lines((d / "valid.txt").string(), toy.valid_lines);
  write_lines((d / "test.txt").string(), toy.test_lines);
  std::ofstream cfg(d / "toy.cfg");
  cfg << "# toy domain-shift benchmark\n"
         "lm_corpus=lm.txt\n"
         "datastore_corpus=datastore.txt\n"
         "valid_corpus=valid.txt\n"
         "test_corpus=test.txt\n"
         "vocab=vocab.txt\n"
         "lm=model.knnl\n"
         "datastore=vanilla.knnd\n"
         "index=vanilla.knni\n"
         "adaptor=vanilla.knna\n"
         "gm_datastore=gm.knnd\n"
         "gm_index=gm.knni\n"
         "dr_datastore=dr.knnd\n"
         "dr_index=dr.knni\n"
         "all_datastore=all.knnd\n"
         "all_index=all.knni\n"
         "all_adaptor=all.knna\n"
         "ivf_train_per_list=32\n"
         "nprobe=32\n"
         "gm_nprobe=8\n"
         "prune_retain=0.6\n"
         "dr_dim=16\n"
         "distance_exponent=8\n"
         "ivf_iters=10\n";
  nlohmann::ordered_json j;
  j["stage"] = "make-toy";
  j["dir"] = dir;
  j["lm_docs"] = toy.lm_lines.size();
  j["datastore_docs"] = toy.datastore_lines.size();
  j["valid_docs"] = toy.valid_lines.size();
  j["test_docs"] = toy.test_lines.size();
  std::cout << j.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"kNN-LM toolkit: build, prune, reduce, gate, and evaluate retrieval-augmented LMs"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<int> threads;
  std::vector<std::string> overrides;
  app.add_option("--config", config_path, "pipeline config (key=value lines)");
  app.add_option("--seed", seed, "global seed");
  app.add_option("--threads", threads, "worker threads");
  app.add_option("--set", overrides, "override a config key, key=value");

  std::string toy_dir;
  std::uint64_t toy_seed = 7;
  auto* make_toy = app.add_subcommand("make-toy", "write the synthetic domain-shift benchmark and a config");
  make_toy->add_option("--out", toy_dir, "output directory")->required();
  make_toy->add_option("--toy-seed", toy_seed, "generator seed");

  auto* build_lm = app.add_subcommand("build-lm", "fit the vocabulary, count LM, and context encoder");
  auto* build_ds = app.add_subcommand("build-datastore", "encode the datastore corpus");

  std::string stack_text = "vanilla";
  auto* build_index = app.add_subcommand("build-index", "train an IVF index over a stack's datastore");
  build_index->add_option("--stack", stack_text, "vanilla, gm, dr, or all");

  std::string method;
  std::optional<double> retain, kmeans_ratio;
  std::optional<std::size_t> gm_k, kmeans_top_m;
  std::optional<std::uint64_t> stage_seed;
  std::string prune_target = "gm";
  auto* prune = app.add_subcommand("prune", "prune the vanilla datastore");
  prune->add_option("--method", method, "random, kmeans, gm, or rank");
  prune->add_option("--retain", retain, "retention fraction (gm: target when --gm-k is 0)");
  prune->add_option("--gm-k", gm_k, "greedy-merge neighbors K");
  prune->add_option("--kmeans-top-m", kmeans_top_m, "tokens clustered by target-aware k-means");
  prune->add_option("--kmeans-ratio", kmeans_ratio, "centroids per record");
  prune->add_option("--seed", stage_seed, "stage seed");
  prune->add_option("--stack", prune_target, "stack to write (gm)");

  std::optional<std::size_t> dim;
  std::string rotate;
  std::string reduce_target = "dr";
  auto* reduce = app.add_subcommand("reduce", "PCA-reduce a datastore");
  reduce->add_option("--dim", dim, "output dimension");
  reduce->add_option("--rotate", rotate, "on or off")->check(CLI::IsMember({"on", "off"}));
  reduce->add_option("--seed", stage_seed, "stage seed");
  reduce->add_option("--stack", reduce_target, "dr (from vanilla) or all (from gm)");

  auto* train = app.add_subcommand("train-adaptor", "train the retrieval adaptor on validation data");
  train->add_option("--stack", stack_text, "vanilla or all");

  auto* tune = app.add_subcommand("tune-lambda", "grid-search the interpolation weight on validation data");
  tune->add_option("--stack", stack_text, "vanilla, gm, dr, or all");

  std::vector<std::string> modes;
  std::string split = "test";
  auto* eval = app.add_subcommand("eval", "perplexity and speed of one or more modes");
  eval->add_option("--mode", modes, "nlm, knnlm, knnlm+AR, +GM, +DR, +All")->delimiter(',');
  eval->add_option("--split", split, "valid or test");

  int reps = 0;
  auto* bench = app.add_subcommand("bench", "median tokens/s over repetitions after a warmup pass");
  bench->add_option("--modes", modes, "comma-separated modes")->delimiter(',');
  bench->add_option("--reps", reps, "repetitions (default bench_reps)");

  std::uint64_t mask_seed = 0;
  auto* ablate = app.add_subcommand("ablate", "learned/random mask x learned/constant weight grid");
  ablate->add_option("--stack", stack_text, "vanilla or all");
  ablate->add_option("--mask-seed", mask_seed, "random-mask seed");

  bool select = false;
  auto* compose = app.add_subcommand("compose", "build the combined stack: GM, then DR, index, and AR");
  compose->add_flag("--select", select, "pick the most aggressive settings within 0.1 ppl of vanilla");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigExit;
  }

  try {
    if (*make_toy) {
      write_toy(toy_dir, toy_seed);
      return 0;
    }
    if (config_path.empty()) throw ConfigError("--config is required");
    PipelineConfig cfg = load_config(config_path);
    for (const auto& kv : overrides) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got \"" + kv + "\"");
      cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (cfg.threads < 1) throw ConfigError("threads must be >= 1");
    Experiment ex(cfg);

    if (*build_lm) {
      ex.build_lm();
      nlohmann::ordered_json j;
      j["stage"] = "build-lm";
      j["vocab_size"] = ex.vocab().size();
      j["order"] = ex.model().lm.order();
      j["encoder_dim"] = ex.model().encoder.dim();
      j["config_hash"] = cfg.config_hash();
      std::cout << j.dump() << "\n";
    } else if (*build_ds) {
      const auto stats = ex.build_datastore();
      nlohmann::ordered_json j;
      j["stage"] = "build-datastore";
      j["count"] = stats.count;
      j["dim"] = stats.dim;
      j["total_weight"] = stats.total_weight;
      j["bytes"] = stats.bytes;
      j["distinct_values"] = stats.value_histogram.size();
      std::cout << j.dump() << "\n";
    } else if (*build_index) {
      const Stack s = parse_stack(stack_text);
      ex.build_index(s);
      nlohmann::ordered_json j;
      j["stage"] = "build-index";
      j["stack"] = stack_name(s);
      j["nlist"] = ex.index(s).nlist;
      j["count"] = ex.index(s).size();
      j["pq_m"] = ex.index(s).pq ? ex.index(s).pq->m : 0;
      std::cout << j.dump() << "\n";
    } else if (*prune) {
      const auto report =
          ex.prune(method.empty() ? cfg.prune_method : method, retain.value_or(cfg.prune_retain),
                   gm_k ? *gm_k : (retain ? 0 : cfg.gm_k),
                   kmeans_top_m.value_or(cfg.kmeans_top_m), kmeans_ratio.value_or(cfg.kmeans_ratio),
                   stage_seed.value_or(cfg.seed), Stack::kVanilla, parse_stack(prune_target));
      std::cout << report.to_json() << "\n";
      print_table({"method", "input", "output", "retention", "seconds"},
                  {{report.method, std::to_string(report.input_count), std::to_string(report.output_count),
                    fmt(report.retention), fmt(report.seconds, 2)}});
    } else if (*reduce) {
      const auto report = ex.reduce(dim.value_or(cfg.dr_dim), rotate.empty() ? cfg.dr_rotate : rotate == "on",
                                    stage_seed.value_or(cfg.seed), parse_stack(reduce_target));
      std::cout << report.to_json() << "\n";
    } else if (*train) {
      const Stack s = parse_stack(stack_text);
      const auto log = ex.train_adaptor(s);
      nlohmann::ordered_json j;
      j["stage"] = "train-adaptor";
      j["stack"] = stack_name(s);
      j["train_examples"] = log.train_examples;
      j["heldout_examples"] = log.heldout_examples;
      j["best_epoch"] = log.best_epoch;
      j["train_loss"] = log.train_loss;
      j["heldout_ppl"] = log.heldout_ppl;
      j["threshold"] = ex.adaptor(s).threshold;
      std::cout << j.dump() << "\n";
      std::vector<std::vector<std::string>> rows;
      for (std::size_t e = 0; e < log.train_loss.size(); ++e) {
        rows.push_back({std::to_string(e + 1), fmt(log.train_loss[e], 4), fmt(log.heldout_ppl[e])});
      }
      print_table({"epoch", "train_loss", "heldout_ppl"}, rows);
    } else if (*tune) {
      const Stack s = parse_stack(stack_text);
      nlohmann::ordered_json j;
      j["stage"] = "tune-lambda";
      j["stack"] = stack_name(s);
      j["lambda"] = ex.tune_lambda(s);
      std::cout << j.dump() << "\n";
    } else if (*eval) {
      if (modes.empty()) modes = {"nlm", "knnlm"};
      std::vector<std::vector<std::string>> rows;
      for (const auto& m : modes) {
        const auto r = ex.eval(parse_mode(m), split);
        std::cout << r.to_json() << "\n";
        rows.push_back(report_row(r));
      }
      print_table(kReportHeader, rows);
    } else if (*bench) {
      if (modes.empty()) modes = {"nlm", "knnlm+All", "knnlm+DR", "knnlm"};
      std::vector<EvalMode> parsed;
      for (const auto& m : modes) parsed.push_back(parse_mode(m));
      const auto rows = ex.bench(parsed, reps > 0 ? reps : cfg.bench_reps);
      std::vector<std::vector<std::string>> table;
      for (const auto& r : rows) {
        std::cout << r.report.to_json() << "\n";
        table.push_back(report_row(r.report));
      }
      print_table(kReportHeader, table);
    } else if (*ablate) {
      const auto cells = ex.ablate(parse_stack(stack_text), mask_seed);
      std::vector<std::vector<std::string>> rows;
      for (const auto& c : cells) {
        std::cout << c.to_json() << "\n";
        rows.push_back({fmt(c.prune_fraction, 2), c.label(), fmt(c.perplexity), fmt(c.retrieval_fraction)});
      }
      print_table({"pruned", "variant", "ppl", "retrieved"}, rows);
    } else if (*compose) {
      AllSettings settings{cfg.ar_prune_fraction, cfg.prune_retain, cfg.dr_dim};
      if (select) {
        const std::vector<double> ar{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7};
        const std::vector<double> gm{0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
        const std::vector<std::size_t> dr{8, 16, 24, 32, 48};
        settings = ex.select_all_settings(ar, gm, dr);
      }
      ex.compose_all(settings);
      nlohmann::ordered_json j;
      j["stage"] = "compose";
      j["ar_prune_fraction"] = settings.ar_prune_fraction;
      j["gm_retention"] = settings.gm_retention;
      j["dr_dim"] = settings.dr_dim;
      j["records"] = ex.datastore(Stack::kAll).size();
      std::cout << j.dump() << "\n";
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const InvalidInput& e) {
    std::cerr << "configuration error: " << e.what() << "\n";
    return kConfigExit;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kFormatExit;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
