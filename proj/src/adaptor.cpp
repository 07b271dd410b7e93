#include "knnlm/adaptor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "knnlm/pruning.hpp"

namespace knnlm {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstWeights = Eigen::Map<const RowMat>;
using MutWeights = Eigen::Map<RowMat>;
using ConstBias = Eigen::Map<const Eigen::VectorXd>;
using MutBias = Eigen::Map<Eigen::VectorXd>;


struct FeatureName {
  const char* name;
  std::uint32_t bit;
};
constexpr FeatureName kFeatureNames[] = {{"ctx", kFeatureCtx},
                                         {"conf", kFeatureConf},
                                         {"ent", kFeatureEnt},
                                         {"log_freq", kFeatureLogFreq},
                                         {"log_fert", kFeatureLogFert}};

}  // namespace

std::uint32_t parse_feature_mask(const std::string& text) {
  if (text == "all") return kAllFeatures;
  if (text == "no-log-freq") return kFeaturesNoLogFreq;
  std::uint32_t mask = 0;
  std::stringstream in(text);
  for (std::string part; std::getline(in, part, '+');) {
    bool found = false;
    for (const auto& f : kFeatureNames) {
      if (part == f.name) {
        mask |= f.bit;
        found = true;
      }
    }
    if (!found) throw InvalidInput("unknown adaptor feature \"" + part + "\"");
  }
  if (mask == 0) throw InvalidInput("adaptor feature mask is empty");
  return mask;
}

std::string feature_mask_name(std::uint32_t mask) {
  if (mask == kAllFeatures) return "all";
  if (mask == kFeaturesNoLogFreq) return "no-log-freq";
  std::string out;
  for (const auto& f : kFeatureNames) {
    if (mask & f.bit) out += (out.empty() ? "" : "+") + std::string(f.name);
  }
  return out;
}

std::array<double, kScalarFeatures> FeatureVector::scalars() const {
  return {conf,        ent,         log_freq[0], log_freq[1], log_freq[2],
          log_freq[3], log_fert[0], log_fert[1], log_fert[2], log_fert[3]};
}

FeatureVector extract_features(const DenseDist& p_nlm, std::span<const float> ctx, const SuffixTables& tables,
                               std::span<const TokenId> history) {
  FeatureVector f;
  f.ctx.assign(ctx.begin(), ctx.end());
  f.conf = confidence(p_nlm);
  f.ent = entropy(p_nlm);
  for (int n = 1; n <= SuffixTables::kMaxOrder; ++n) {
    const auto e = tables.lookup(history, n);
    f.log_freq[n - 1] = std::log(static_cast<double>(e.freq) + 1.0);
    f.log_fert[n - 1] = std::log(static_cast<double>(e.fert) + 1.0);
  }
  return f;
}

FeatureStats FeatureStats::fit(std::span<const FeatureVector> features) {
  FeatureStats s;
  if (features.empty()) return s;
  const double n = static_cast<double>(features.size());
  for (const auto& f : features) {
    const auto v = f.scalars();
    for (std::size_t j = 0; j < kScalarFeatures; ++j) s.mean[j] += v[j] / n;
  }
  std::array<double, kScalarFeatures> var{};
  for (const auto& f : features) {
    const auto v = f.scalars();
    for (std::size_t j = 0; j < kScalarFeatures; ++j) var[j] += (v[j] - s.mean[j]) * (v[j] - s.mean[j]) / n;
  }
  for (std::size_t j = 0; j < kScalarFeatures; ++j) {
    const double sd = std::sqrt(var[j]);
    s.stddev[j] = sd > 1e-9 ? sd : 1.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// AdaptorNet

double AdaptorNet::Output::lambda() const { return std::exp(log_lambda); }

AdaptorNet::AdaptorNet(const AdaptorArch& arch, std::uint64_t seed) : arch_(arch) {
  if (arch.hidden_units == 0) throw InvalidInput("adaptor needs at least one hidden unit");
  if (!(arch.dropout >= 0.0 && arch.dropout < 1.0)) throw InvalidInput("dropout must be in [0, 1)");
  if ((arch.mask & ~kAllFeatures) != 0 || arch.mask == 0) throw InvalidInput("bad adaptor feature mask");
  if ((arch.mask & kFeatureCtx) && arch.ctx_dim == 0) throw InvalidInput("context feature needs ctx_dim > 0");
  embed_dim_ = arch.embed_dim != 0 ? arch.embed_dim : std::max<std::size_t>(4, arch.ctx_dim / kScalarFeatures);

  if (arch.mask & kFeatureConf) active_.push_back(0);
  if (arch.mask & kFeatureEnt) active_.push_back(1);
  if (arch.mask & kFeatureLogFreq) {
    for (std::size_t j = 2; j < 6; ++j) active_.push_back(j);
  }
  if (arch.mask & kFeatureLogFert) {
    for (std::size_t j = 6; j < 10; ++j) active_.push_back(j);
  }

  std::size_t offset = 0;
  auto add = [&](std::size_t in, std::size_t out) {
    Linear l{in, out, offset, offset + in * out};
    offset += in * out + out;
    return l;
  };
  for (std::size_t a = 0; a < active_.size(); ++a) {
    embed_layers_.push_back(add(1, embed_dim_));
    embed_layers_.push_back(add(embed_dim_, embed_dim_));
  }
  const std::size_t input_width = ((arch.mask & kFeatureCtx) ? arch.ctx_dim : 0) + active_.size() * embed_dim_;
  trunk_layers_.push_back(add(input_width, arch.hidden_units));
  for (std::size_t h = 0; h < arch.hidden_layers; ++h) trunk_layers_.push_back(add(arch.hidden_units, arch.hidden_units));
  trunk_layers_.push_back(add(arch.hidden_units, 2));

  params_.resize(offset);
  std::mt19937_64 rng(seed);
  auto init = [&](const Linear& l) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(l.in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < l.in * l.out + l.out; ++i) params_[l.weight_offset + i] = u(rng);
  };
  for (const auto& l : embed_layers_) init(l);
  for (const auto& l : trunk_layers_) init(l);
}

std::vector<double> AdaptorNet::standardized_scalars(const FeatureVector& f) const {
  const auto raw = f.scalars();
  std::vector<double> out;
  out.reserve(active_.size());
  for (std::size_t j : active_) out.push_back((raw[j] - stats_.mean[j]) / stats_.stddev[j]);
  return out;
}

struct AdaptorNet::Cache {
  std::vector<Eigen::MatrixXd> scalar_in;  // per active scalar, 1 x B
  std::vector<Eigen::MatrixXd> embed_pre;  // per active scalar, m x B
  std::vector<Eigen::MatrixXd> acts;       // acts[0] is the trunk input
  std::vector<Eigen::MatrixXd> pre;        // pre-activation of each ReLU layer
  std::vector<Eigen::MatrixXd> masks;      // dropout scales, empty in eval mode
  Eigen::MatrixXd logits;                  // 2 x B
};

void AdaptorNet::run(std::span<const FeatureVector* const> batch, std::mt19937_64* rng, Cache& cache) const {
  const auto b = static_cast<Eigen::Index>(batch.size());
  const bool use_ctx = (arch_.mask & kFeatureCtx) != 0;
  const auto ctx_rows = static_cast<Eigen::Index>(use_ctx ? arch_.ctx_dim : 0);
  const auto m = static_cast<Eigen::Index>(embed_dim_);

  Eigen::MatrixXd input(static_cast<Eigen::Index>(trunk_layers_.front().in), b);
  cache.scalar_in.assign(active_.size(), Eigen::MatrixXd(1, b));
  for (Eigen::Index c = 0; c < b; ++c) {
    const FeatureVector& f = *batch[static_cast<std::size_t>(c)];
    if (use_ctx) {
      if (f.ctx.size() != arch_.ctx_dim) throw InvalidInput("context feature has wrong dimension");
      for (Eigen::Index r = 0; r < ctx_rows; ++r) {
        const double v = f.ctx[static_cast<std::size_t>(r)];
        if (!std::isfinite(v)) throw InvalidInput("adaptor features must be finite");
        input(r, c) = v;
      }
    }
    const auto s = standardized_scalars(f);
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (!std::isfinite(s[a])) throw InvalidInput("adaptor features must be finite");
      cache.scalar_in[a](0, c) = s[a];
    }
  }

  cache.embed_pre.resize(active_.size());
  for (std::size_t a = 0; a < active_.size(); ++a) {
    const Linear& l1 = embed_layers_[2 * a];
    const Linear& l2 = embed_layers_[2 * a + 1];
    const ConstWeights w1(params_.data() + l1.weight_offset, m, 1);
    const ConstBias b1(params_.data() + l1.bias_offset, m);
    const ConstWeights w2(params_.data() + l2.weight_offset, m, m);
    const ConstBias b2(params_.data() + l2.bias_offset, m);
    cache.embed_pre[a] = (w1 * cache.scalar_in[a]).colwise() + b1;
    const Eigen::MatrixXd hidden = cache.embed_pre[a].cwiseMax(0.0);
    input.middleRows(ctx_rows + static_cast<Eigen::Index>(a) * m, m) = (w2 * hidden).colwise() + b2;
  }

  const std::size_t relu_layers = trunk_layers_.size() - 1;
  cache.acts.assign(1, std::move(input));
  cache.pre.clear();
  cache.masks.clear();
  const bool dropout = rng != nullptr && arch_.dropout > 0.0;
  std::bernoulli_distribution keep(1.0 - arch_.dropout);
  const double scale = 1.0 / (1.0 - arch_.dropout);
  for (std::size_t li = 0; li < relu_layers; ++li) {
    const Linear& l = trunk_layers_[li];
    const ConstWeights w(params_.data() + l.weight_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
    const ConstBias bias(params_.data() + l.bias_offset, static_cast<Eigen::Index>(l.out));
    cache.pre.push_back((w * cache.acts.back()).colwise() + bias);
    Eigen::MatrixXd act = cache.pre.back().cwiseMax(0.0);
    if (dropout) {
      Eigen::MatrixXd mask(act.rows(), act.cols());
      for (Eigen::Index c = 0; c < mask.cols(); ++c) {
        for (Eigen::Index r = 0; r < mask.rows(); ++r) mask(r, c) = keep(*rng) ? scale : 0.0;
      }
      act = act.cwiseProduct(mask);
      cache.masks.push_back(std::move(mask));
    }
    cache.acts.push_back(std::move(act));
  }
  const Linear& out = trunk_layers_.back();
  const ConstWeights w(params_.data() + out.weight_offset, 2, static_cast<Eigen::Index>(out.in));
  const ConstBias bias(params_.data() + out.bias_offset, 2);
  cache.logits = (w * cache.acts.back()).colwise() + bias;
}

namespace {

AdaptorNet::Output log_softmax2(double z0, double z1) {
  const double hi = std::max(z0, z1);
  const double lse = hi + std::log(std::exp(z0 - hi) + std::exp(z1 - hi));
  return {z0 - lse, z1 - lse};
}

}  // namespace

std::vector<AdaptorNet::Output> AdaptorNet::forward_batch(std::span<const FeatureVector* const> batch,
                                                          std::mt19937_64* rng) const {
  std::vector<Output> out;
  if (batch.empty()) return out;
  Cache cache;
  run(batch, rng, cache);
  out.reserve(batch.size());
  for (Eigen::Index c = 0; c < cache.logits.cols(); ++c) out.push_back(log_softmax2(cache.logits(0, c), cache.logits(1, c)));
  return out;
}

AdaptorNet::Output AdaptorNet::forward(const FeatureVector& features, std::mt19937_64* rng) const {
  const FeatureVector* one[] = {&features};
  return forward_batch(one, rng).front();
}

double AdaptorNet::loss_and_grad(std::span<const FeatureVector* const> batch, std::span<const double> p_knn,
                                 std::span<const double> p_nlm, double l1, std::vector<double>* grad,
                                 std::mt19937_64* rng) const {
  if (batch.size() != p_knn.size() || batch.size() != p_nlm.size()) throw InvalidInput("batch size mismatch");
  if (batch.empty()) throw InvalidInput("empty adaptor batch");
  Cache cache;
  run(batch, rng, cache);

  const auto b = static_cast<Eigen::Index>(batch.size());
  const double inv_b = 1.0 / static_cast<double>(b);
  double loss = 0.0;
  Eigen::MatrixXd d_logits(2, b);
  for (Eigen::Index c = 0; c < b; ++c) {
    const auto i = static_cast<std::size_t>(c);
    if (!(p_knn[i] >= 0.0 && p_knn[i] <= 1.0) || !(p_nlm[i] > 0.0 && p_nlm[i] <= 1.0)) {
      throw InvalidInput("target probabilities must satisfy 0 <= p_knn <= 1 and 0 < p_nlm <= 1");
    }
    const Output o = log_softmax2(cache.logits(0, c), cache.logits(1, c));
    const double lam = std::exp(o.log_lambda);
    const double rest = std::exp(o.log_one_minus_lambda);
    const double mix = lam * p_knn[i] + rest * p_nlm[i];
    loss += (-std::log(mix) + l1 * lam) * inv_b;
    const double d_lambda = (-(p_knn[i] - p_nlm[i]) / mix + l1) * inv_b;
    d_logits(0, c) = d_lambda * lam * rest;
    d_logits(1, c) = -d_logits(0, c);
  }
  if (grad == nullptr) return loss;

  grad->assign(params_.size(), 0.0);
  auto accumulate = [&](const Linear& l, const Eigen::MatrixXd& d_out, const Eigen::MatrixXd& act_in) {
    MutWeights gw(grad->data() + l.weight_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
    MutBias gb(grad->data() + l.bias_offset, static_cast<Eigen::Index>(l.out));
    gw.noalias() += d_out * act_in.transpose();
    gb += d_out.rowwise().sum();
  };
  auto weights = [&](const Linear& l) {
    return ConstWeights(params_.data() + l.weight_offset, static_cast<Eigen::Index>(l.out), static_cast<Eigen::Index>(l.in));
  };

  const std::size_t relu_layers = trunk_layers_.size() - 1;
  Eigen::MatrixXd d_z = d_logits;
  accumulate(trunk_layers_.back(), d_z, cache.acts.back());
  Eigen::MatrixXd d_act = weights(trunk_layers_.back()).transpose() * d_z;
  for (std::size_t li = relu_layers; li-- > 0;) {
    if (!cache.masks.empty()) d_act = d_act.cwiseProduct(cache.masks[li]);
    d_z = d_act.cwiseProduct((cache.pre[li].array() > 0.0).cast<double>().matrix());
    accumulate(trunk_layers_[li], d_z, cache.acts[li]);
    d_act = weights(trunk_layers_[li]).transpose() * d_z;
  }

  const auto ctx_rows = static_cast<Eigen::Index>((arch_.mask & kFeatureCtx) ? arch_.ctx_dim : 0);
  const auto m = static_cast<Eigen::Index>(embed_dim_);
  for (std::size_t a = 0; a < active_.size(); ++a) {
    const Linear& l1 = embed_layers_[2 * a];
    const Linear& l2 = embed_layers_[2 * a + 1];
    const Eigen::MatrixXd d_embed = d_act.middleRows(ctx_rows + static_cast<Eigen::Index>(a) * m, m);
    const Eigen::MatrixXd hidden = cache.embed_pre[a].cwiseMax(0.0);
    accumulate(l2, d_embed, hidden);
    const Eigen::MatrixXd d_hidden = weights(l2).transpose() * d_embed;
    const Eigen::MatrixXd d_pre = d_hidden.cwiseProduct((cache.embed_pre[a].array() > 0.0).cast<double>().matrix());
    accumulate(l1, d_pre, cache.scalar_in[a]);
  }
  return loss;
}

void AdaptorNet::round_to_float() {
  for (auto& p : params_) p = static_cast<double>(static_cast<float>(p));
}

LossGrad adaptor_loss_and_grad(const AdaptorNet& net, std::span<const AdaptorExample> batch, double l1) {
  std::vector<const FeatureVector*> feats;
  std::vector<double> pk, pn;
  for (const auto& ex : batch) {
    feats.push_back(&ex.features);
    pk.push_back(ex.p_knn);
    pn.push_back(ex.p_nlm);
  }
  LossGrad out;
  out.loss = net.loss_and_grad(feats, pk, pn, l1, &out.grad);
  return out;
}

// ---------------------------------------------------------------------------
// Training and gating

double select_lambda_threshold(std::span<const double> lambdas, double prune_fraction) {
  if (!(prune_fraction >= 0.0 && prune_fraction < 1.0)) throw InvalidInput("prune fraction must be in [0, 1)");
  if (prune_fraction == 0.0 || lambdas.empty()) return 0.0;
  std::vector<double> sorted(lambdas.begin(), lambdas.end());
  std::sort(sorted.begin(), sorted.end());
  return sorted[retain_count(prune_fraction, sorted.size()) - 1];
}

double gated_perplexity(std::span<const double> lambdas, std::span<const double> p_knn,
                        std::span<const double> p_nlm, double threshold) {
  if (lambdas.empty()) return 1.0;
  double nll = 0.0;
  for (std::size_t i = 0; i < lambdas.size(); ++i) {
    const double p = lambdas[i] <= threshold ? p_nlm[i] : interpolate_token(p_knn[i], p_nlm[i], lambdas[i]);
    nll -= p > 0.0 ? std::max(std::log(p), kLogProbFloor) : kLogProbFloor;
  }
  return std::exp(nll / static_cast<double>(lambdas.size()));
}

namespace {

std::vector<double> lambdas_of(const AdaptorNet& net, std::span<const AdaptorExample> data,
                               std::span<const std::size_t> rows) {
  std::vector<double> out;
  out.reserve(rows.size());
  constexpr std::size_t kChunk = 1024;
  std::vector<const FeatureVector*> feats;
  for (std::size_t lo = 0; lo < rows.size(); lo += kChunk) {
    feats.clear();
    for (std::size_t i = lo; i < std::min(rows.size(), lo + kChunk); ++i) feats.push_back(&data[rows[i]].features);
    for (const auto& o : net.forward_batch(feats)) out.push_back(o.lambda());
  }
  return out;
}

}  // namespace

TrainedAdaptor train_adaptor(std::span<const AdaptorExample> dataset, const AdaptorTrainConfig& config) {
  if (dataset.empty()) throw InvalidInput("adaptor training set is empty");
  if (!(config.l1 >= 0.0)) throw InvalidInput("L1 coefficient must be >= 0");
  if (!(config.holdout_fraction > 0.0 && config.holdout_fraction < 1.0)) {
    throw InvalidInput("held-out fraction must be in (0, 1)");
  }
  if (config.batch_size == 0) throw InvalidInput("batch size must be positive");

  std::mt19937_64 rng(config.seed);
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::size_t> heldout, train;
  if (dataset.size() < 2) {
    heldout = train = order;
  } else {
    const std::size_t h = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::llround(config.holdout_fraction * static_cast<double>(dataset.size()))), 1,
        dataset.size() - 1);
    heldout.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(h));
    train.assign(order.begin() + static_cast<std::ptrdiff_t>(h), order.end());
    std::sort(heldout.begin(), heldout.end());
    std::sort(train.begin(), train.end());
  }

  std::vector<FeatureVector> train_features;
  train_features.reserve(train.size());
  for (auto i : train) train_features.push_back(dataset[i].features);
  AdaptorNet net(config.arch, config.seed + 1);
  net.stats() = FeatureStats::fit(train_features);

  std::vector<double> heldout_pk, heldout_pn;
  for (auto i : heldout) {
    heldout_pk.push_back(dataset[i].p_knn);
    heldout_pn.push_back(dataset[i].p_nlm);
  }
  auto heldout_ppl = [&](const AdaptorNet& candidate) {
    const auto lam = lambdas_of(candidate, dataset, heldout);
    return gated_perplexity(lam, heldout_pk, heldout_pn, select_lambda_threshold(lam, config.select_prune_fraction));
  };
  auto train_objective = [&](const AdaptorNet& candidate) {
    double total = 0.0;
    constexpr std::size_t kChunk = 1024;
    std::vector<const FeatureVector*> feats;
    std::vector<double> pk, pn;
    for (std::size_t lo = 0; lo < train.size(); lo += kChunk) {
      feats.clear();
      pk.clear();
      pn.clear();
      for (std::size_t i = lo; i < std::min(train.size(), lo + kChunk); ++i) {
        feats.push_back(&dataset[train[i]].features);
        pk.push_back(dataset[train[i]].p_knn);
        pn.push_back(dataset[train[i]].p_nlm);
      }
      total += candidate.loss_and_grad(feats, pk, pn, config.l1, nullptr) * static_cast<double>(feats.size());
    }
    return total / static_cast<double>(train.size());
  };

  AdaptorTrainLog log;
  log.train_examples = train.size();
  log.heldout_examples = heldout.size();

  // Adam state.
  const std::size_t np = net.parameter_count();
  std::vector<double> m1(np, 0.0), m2(np, 0.0), grad;
  constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
  std::uint64_t step = 0;

  std::vector<double> best_params(net.parameters().begin(), net.parameters().end());
  double best_ppl = std::numeric_limits<double>::infinity();
  int since_best = 0;
  std::vector<const FeatureVector*> feats;
  std::vector<double> pk, pn;
  for (int epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(train.begin(), train.end(), rng);
    for (std::size_t lo = 0; lo < train.size(); lo += config.batch_size) {
      feats.clear();
      pk.clear();
      pn.clear();
      for (std::size_t i = lo; i < std::min(train.size(), lo + config.batch_size); ++i) {
        feats.push_back(&dataset[train[i]].features);
        pk.push_back(dataset[train[i]].p_knn);
        pn.push_back(dataset[train[i]].p_nlm);
      }
      net.loss_and_grad(feats, pk, pn, config.l1, &grad, &rng);
      ++step;
      const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(step));
      auto params = net.parameters();
      for (std::size_t j = 0; j < np; ++j) {
        m1[j] = kBeta1 * m1[j] + (1.0 - kBeta1) * grad[j];
        m2[j] = kBeta2 * m2[j] + (1.0 - kBeta2) * grad[j] * grad[j];
        params[j] -= config.learning_rate * (m1[j] / c1) / (std::sqrt(m2[j] / c2) + kEps);
      }
    }
    log.train_loss.push_back(train_objective(net));
    const double ppl = heldout_ppl(net);
    log.heldout_ppl.push_back(ppl);
    if (ppl < best_ppl) {
      best_ppl = ppl;
      log.best_epoch = epoch;
      best_params.assign(net.parameters().begin(), net.parameters().end());
      since_best = 0;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  std::copy(best_params.begin(), best_params.end(), net.parameters().begin());
  net.round_to_float();

  TrainedAdaptor out{std::move(net), 0.0, config.select_prune_fraction, {}, heldout_pk, heldout_pn, std::move(log)};
  out.heldout_lambdas = lambdas_of(out.net, dataset, heldout);
  out.threshold = select_lambda_threshold(out.heldout_lambdas, config.select_prune_fraction);
  return out;
}

AdaptivePrediction adaptive_predict(const AdaptorNet& net, double threshold, const LmStep& step,
                                    const FeatureVector& features, const Retriever& retriever, std::size_t k) {
  AdaptivePrediction out;
  out.lambda = net.forward(features).lambda();
  if (out.lambda <= threshold) {
    out.distribution = step.p_nlm;
    return out;
  }
  out.retrieved = true;
  const auto hits = retriever.search(step.ctx, k);
  out.distribution = interpolate(weighted_knn_distribution(hits), step.p_nlm, out.lambda);
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoint

void TrainedAdaptor::save(const std::string& path) const {
  const auto& a = net.arch();
  io::Writer out;
  out.put_magic("KNNA");
  out.put<std::uint32_t>(1);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(a.ctx_dim));
  out.put<std::uint32_t>(a.mask);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(net.embed_dim()));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(a.hidden_layers));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(a.hidden_units));
  out.put<double>(a.dropout);
  out.put<std::uint64_t>(net.parameter_count());
  for (double p : net.parameters()) out.put<float>(static_cast<float>(p));
  out.put_span<double>(net.stats().mean);
  out.put_span<double>(net.stats().stddev);
  out.put<double>(threshold);
  out.put<double>(prune_fraction);
  out.put<std::uint64_t>(heldout_lambdas.size());
  out.put_span<double>(heldout_lambdas);
  out.put_span<double>(heldout_p_knn);
  out.put_span<double>(heldout_p_nlm);
  io::write_file(path, out.bytes());
}

TrainedAdaptor TrainedAdaptor::load(const std::string& path) {
  const auto bytes = io::read_file(path);
  io::Reader in(bytes);
  in.expect_magic("KNNA");
  if (in.get<std::uint32_t>() != 1) in.fail("unsupported adaptor version");
  AdaptorArch arch;
  arch.ctx_dim = in.get<std::uint32_t>();
  arch.mask = in.get<std::uint32_t>();
  arch.embed_dim = in.get<std::uint32_t>();
  arch.hidden_layers = in.get<std::uint32_t>();
  arch.hidden_units = in.get<std::uint32_t>();
  arch.dropout = in.get<double>();
  std::optional<AdaptorNet> net;
  try {
    net.emplace(arch, 0);
  } catch (const InvalidInput& e) {
    in.fail(std::string("bad adaptor architecture: ") + e.what());
  }
  if (in.get<std::uint64_t>() != net->parameter_count()) in.fail("parameter count does not match architecture");
  const auto params = in.get_vector<float>(net->parameter_count());
  std::copy(params.begin(), params.end(), net->parameters().begin());
  const auto mean = in.get_vector<double>(kScalarFeatures);
  const auto sd = in.get_vector<double>(kScalarFeatures);
  std::copy(mean.begin(), mean.end(), net->stats().mean.begin());
  std::copy(sd.begin(), sd.end(), net->stats().stddev.begin());
  TrainedAdaptor out{std::move(*net), 0.0, 0.0, {}, {}, {}, {}};
  out.threshold = in.get<double>();
  out.prune_fraction = in.get<double>();
  const auto h = in.get<std::uint64_t>();
  out.heldout_lambdas = in.get_vector<double>(h);
  out.heldout_p_knn = in.get_vector<double>(h);
  out.heldout_p_nlm = in.get_vector<double>(h);
  if (!in.at_end()) in.fail("trailing bytes after adaptor checkpoint");
  return out;
}

}  // namespace knnlm
