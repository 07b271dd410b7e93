#include "knnlm/config.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "knnlm/adaptor.hpp"
#include "knnlm/common.hpp"

namespace knnlm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const char* first = value.data();
  const char* last = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(first, last, out);
  if (ec != std::errc() || ptr != last) throw ConfigError("bad value \"" + value + "\" for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "1" || value == "on" || value == "true" || value == "yes") return true;
  if (value == "0" || value == "off" || value == "false" || value == "no") return false;
  throw ConfigError("bad boolean \"" + value + "\" for " + key);
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(PipelineConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const PipelineConfig&)> get;
  bool is_path = false;
};

template <typename T>
Field number(T PipelineConfig::*member) {
  return {[member](PipelineConfig& c, const std::string& k, const std::string& v) {
            c.*member = parse_number<T>(k, v);
          },
          [member](const PipelineConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return format_double(c.*member);
            } else {
              return std::to_string(c.*member);
            }
          }};
}

Field path(std::string PipelineConfig::*member) {
  return {[member](PipelineConfig& c, const std::string&, const std::string& v) { c.*member = v; },
          [member](const PipelineConfig& c) { return c.*member; }, true};
}

Field flag(bool PipelineConfig::*member) {
  return {[member](PipelineConfig& c, const std::string& k, const std::string& v) { c.*member = parse_bool(k, v); },
          [member](const PipelineConfig& c) { return std::string(c.*member ? "1" : "0"); }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> table = [] {
    std::map<std::string, Field> f;
    f["lm_corpus"] = path(&PipelineConfig::lm_corpus);
    f["datastore_corpus"] = path(&PipelineConfig::datastore_corpus);
    f["valid_corpus"] = path(&PipelineConfig::valid_corpus);
    f["test_corpus"] = path(&PipelineConfig::test_corpus);
    f["vocab"] = path(&PipelineConfig::vocab);
    f["lm"] = path(&PipelineConfig::lm);
    f["datastore"] = path(&PipelineConfig::datastore);
    f["index"] = path(&PipelineConfig::index);
    f["adaptor"] = path(&PipelineConfig::adaptor);
    f["gm_datastore"] = path(&PipelineConfig::gm_datastore);
    f["gm_index"] = path(&PipelineConfig::gm_index);
    f["dr_datastore"] = path(&PipelineConfig::dr_datastore);
    f["dr_index"] = path(&PipelineConfig::dr_index);
    f["all_datastore"] = path(&PipelineConfig::all_datastore);
    f["all_index"] = path(&PipelineConfig::all_index);
    f["all_adaptor"] = path(&PipelineConfig::all_adaptor);

    f["lm_order"] = number(&PipelineConfig::lm_order);
    f["lm_smoothing"] = number(&PipelineConfig::lm_smoothing);
    f["encoder_dim"] = number(&PipelineConfig::encoder_dim);
    f["encoder_decay"] = number(&PipelineConfig::encoder_decay);
    f["encoder_window"] = number(&PipelineConfig::encoder_window);

    f["k"] = number(&PipelineConfig::k);
    f["lambda"] = {[](PipelineConfig& c, const std::string& k, const std::string& v) {
                     if (v == "auto" || v.empty()) {
                       c.lambda.reset();
                     } else {
                       c.lambda = parse_number<double>(k, v);
                     }
                   },
                   [](const PipelineConfig& c) { return c.lambda ? format_double(*c.lambda) : std::string("auto"); }};
    f["distance_exponent"] = number(&PipelineConfig::distance_exponent);
    f["nlist"] = number(&PipelineConfig::nlist);
    f["nprobe"] = number(&PipelineConfig::nprobe);
    f["ivf_iters"] = number(&PipelineConfig::ivf_iters);
    f["ivf_train_per_list"] = number(&PipelineConfig::ivf_train_per_list);
    f["pq_m"] = number(&PipelineConfig::pq_m);
    f["pq_bits"] = number(&PipelineConfig::pq_bits);
    f["half_keys"] = flag(&PipelineConfig::half_keys);

    f["ar_prune_fraction"] = number(&PipelineConfig::ar_prune_fraction);
    f["adaptor_l1"] = number(&PipelineConfig::adaptor_l1);
    f["adaptor_lr"] = number(&PipelineConfig::adaptor_lr);
    f["adaptor_epochs"] = number(&PipelineConfig::adaptor_epochs);
    f["adaptor_patience"] = number(&PipelineConfig::adaptor_patience);
    f["adaptor_batch"] = number(&PipelineConfig::adaptor_batch);
    f["adaptor_hidden_layers"] = number(&PipelineConfig::adaptor_hidden_layers);
    f["adaptor_hidden_units"] = number(&PipelineConfig::adaptor_hidden_units);
    f["adaptor_dropout"] = number(&PipelineConfig::adaptor_dropout);
    f["adaptor_holdout"] = number(&PipelineConfig::adaptor_holdout);
    f["adaptor_features"] = {[](PipelineConfig& c, const std::string&, const std::string& v) {
                               try {
                                 c.adaptor_features = parse_feature_mask(v);
                               } catch (const InvalidInput& e) {
                                 throw ConfigError(e.what());
                               }
                             },
                             [](const PipelineConfig& c) { return feature_mask_name(c.adaptor_features); }};

    f["prune_method"] = {[](PipelineConfig& c, const std::string&, const std::string& v) {
                           if (v != "random" && v != "kmeans" && v != "gm" && v != "rank") {
                             throw ConfigError("prune_method must be random, kmeans, gm, or rank");
                           }
                           c.prune_method = v;
                         },
                         [](const PipelineConfig& c) { return c.prune_method; }};
    f["prune_retain"] = number(&PipelineConfig::prune_retain);
    f["gm_k"] = number(&PipelineConfig::gm_k);
    f["gm_nprobe"] = number(&PipelineConfig::gm_nprobe);
    f["kmeans_top_m"] = number(&PipelineConfig::kmeans_top_m);
    f["kmeans_ratio"] = number(&PipelineConfig::kmeans_ratio);
    f["rank_k"] = number(&PipelineConfig::rank_k);

    f["dr_dim"] = number(&PipelineConfig::dr_dim);
    f["dr_rotate"] = flag(&PipelineConfig::dr_rotate);
    f["dr_sample_cap"] = number(&PipelineConfig::dr_sample_cap);

    f["ablation_fractions"] = {[](PipelineConfig& c, const std::string& k, const std::string& v) {
                                 std::vector<double> out;
                                 std::stringstream in(v);
                                 for (std::string part; std::getline(in, part, ',');) {
                                   out.push_back(parse_number<double>(k, trim(part)));
                                 }
                                 if (out.empty()) throw ConfigError("ablation_fractions is empty");
                                 c.ablation_fractions = out;
                               },
                               [](const PipelineConfig& c) {
                                 std::string s;
                                 for (double x : c.ablation_fractions) s += (s.empty() ? "" : ",") + format_double(x);
                                 return s;
                               }};
    f["bench_reps"] = number(&PipelineConfig::bench_reps);
    f["seed"] = number(&PipelineConfig::seed);
    f["threads"] = number(&PipelineConfig::threads);
    return f;
  }();
  return table;
}

}  // namespace

void PipelineConfig::set(const std::string& key, const std::string& value) {
  const auto& table = fields();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key \"" + key + "\"");
  it->second.set(*this, key, value);
}

std::string PipelineConfig::get(const std::string& key) const {
  const auto& table = fields();
  auto it = table.find(key);
  if (it == table.end()) throw ConfigError("unknown config key \"" + key + "\"");
  return it->second.get(*this);
}

const std::vector<std::string>& PipelineConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const auto& [k, f] : fields()) out.push_back(k);
    return out;
  }();
  return names;
}

std::string PipelineConfig::canonical() const {
  std::string out;
  for (const auto& [k, f] : fields()) out += k + "=" + f.get(*this) + "\n";
  return out;
}

std::string PipelineConfig::config_hash() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : canonical()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

PipelineConfig parse_config(const std::string& text, const std::string& base_dir) {
  PipelineConfig cfg;
  std::istringstream in(text);
  std::size_t lineno = 0;
  for (std::string line; std::getline(in, line);) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(lineno) + ": expected key=value");
    const std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    auto it = fields().find(key);
    if (it != fields().end() && it->second.is_path && !value.empty() && !base_dir.empty() &&
        std::filesystem::path(value).is_relative()) {
      value = (std::filesystem::path(base_dir) / value).lexically_normal().string();
    }
    cfg.set(key, value);
  }
  return cfg;
}

PipelineConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config(buf.str(), std::filesystem::path(path).parent_path().string());
}

}  // namespace knnlm
