#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "knnlm/adaptor.hpp"
#include "checks.hpp"
#include "oracles.hpp"

using namespace knnlm;

namespace {

using checks::random_features;
using checks::tiny_arch;

// Plain-loop forward pass straight from the parameter layout.
std::pair<double, double> oracle_forward(const AdaptorNet& net, const FeatureVector& f) {
  const auto p = net.parameters();
  auto linear = [&](const AdaptorNet::Linear& l, const std::vector<double>& x) {
    std::vector<double> y(l.out);
    for (std::size_t o = 0; o < l.out; ++o) {
      double s = p[l.bias_offset + o];
      for (std::size_t i = 0; i < l.in; ++i) s += p[l.weight_offset + o * l.in + i] * x[i];
      y[o] = s;
    }
    return y;
  };
  auto relu = [](std::vector<double> v) {
    for (auto& x : v) x = std::max(0.0, x);
    return v;
  };
  std::vector<double> input;
  if (net.arch().mask & kFeatureCtx) input.assign(f.ctx.begin(), f.ctx.end());
  const auto raw = f.scalars();
  const auto& active = net.active_scalars();
  for (std::size_t a = 0; a < active.size(); ++a) {
    const std::size_t j = active[a];
    const double s = (raw[j] - net.stats().mean[j]) / net.stats().stddev[j];
    const auto e = linear(net.embed_layers()[2 * a + 1], relu(linear(net.embed_layers()[2 * a], {s})));
    input.insert(input.end(), e.begin(), e.end());
  }
  const auto& trunk = net.trunk_layers();
  std::vector<double> h = input;
  for (std::size_t l = 0; l + 1 < trunk.size(); ++l) h = relu(linear(trunk[l], h));
  const auto z = linear(trunk.back(), h);
  const double hi = std::max(z[0], z[1]);
  const double lse = hi + std::log(std::exp(z[0] - hi) + std::exp(z[1] - hi));
  return {z[0] - lse, z[1] - lse};
}

}  // namespace

TEST(AdaptorNet, ForwardMatchesLayerByLayerOracle) {
  std::mt19937_64 rng(71);
  for (std::uint32_t mask : {kAllFeatures, kFeaturesNoLogFreq, std::uint32_t(kFeatureConf | kFeatureEnt)}) {
    AdaptorNet net(tiny_arch(mask), 3);
    net.stats().mean[1] = 0.7;
    net.stats().stddev[1] = 1.3;
    for (int i = 0; i < 5; ++i) {
      const auto f = random_features(8, rng);
      const auto out = net.forward(f);
      const auto [ll, l1m] = oracle_forward(net, f);
      EXPECT_NEAR(out.log_lambda, ll, 1e-12);
      EXPECT_NEAR(out.log_one_minus_lambda, l1m, 1e-12);
      EXPECT_NEAR(out.lambda() + std::exp(out.log_one_minus_lambda), 1.0, 1e-12);
    }
  }
}

TEST(AdaptorNet, GradientsMatchCentralDifferences) {
  for (std::uint64_t seed = 1; seed <= 20; ++seed) {
    const auto g = checks::check_adaptor_gradients(seed);
    EXPECT_LT(g.max_relative_error, 1e-4) << "seed " << seed;
    EXPECT_LT(g.max_absolute_error, 1e-10) << "seed " << seed;
    EXPECT_GE(g.smooth * 20, g.parameters * 19) << "seed " << seed;
    EXPECT_GT(g.compared, g.parameters / 2) << "seed " << seed;
  }
}

TEST(AdaptorNet, LossMatchesObjectiveOracle) {
  std::mt19937_64 rng(73);
  AdaptorNet net(tiny_arch(), 6);
  std::vector<FeatureVector> feats;
  for (int i = 0; i < 3; ++i) feats.push_back(random_features(8, rng));
  std::vector<const FeatureVector*> batch{&feats[0], &feats[1], &feats[2]};
  const std::vector<double> pk{0.5, 0.1, 0.9}, pn{0.2, 0.3, 0.05};
  double want = 0.0;
  for (int i = 0; i < 3; ++i) {
    const double lam = std::exp(oracle_forward(net, feats[i]).first);
    want += -std::log(lam * pk[i] + (1 - lam) * pn[i]) + 0.1 * lam;
  }
  EXPECT_NEAR(net.loss_and_grad(batch, pk, pn, 0.1, nullptr), want / 3.0, 1e-12);
}

TEST(AdaptorNet, DropoutOnlyWithRng) {
  std::mt19937_64 rng(74);
  AdaptorNet net(tiny_arch(), 7);
  const auto f = random_features(8, rng);
  EXPECT_EQ(net.forward(f).log_lambda, net.forward(f).log_lambda);
  std::mt19937_64 drop(1);
  bool differs = false;
  for (int i = 0; i < 10 && !differs; ++i) differs = net.forward(f, &drop).log_lambda != net.forward(f).log_lambda;
  EXPECT_TRUE(differs);
}

TEST(AdaptorNet, RejectsBadArchitecture) {
  auto a = tiny_arch();
  a.mask = 0;
  EXPECT_THROW(AdaptorNet(a, 1), InvalidInput);
  a = tiny_arch();
  a.dropout = 1.0;
  EXPECT_THROW(AdaptorNet(a, 1), InvalidInput);
}

TEST(FeatureMask, ParsesNamesAndShorthands) {
  EXPECT_EQ(parse_feature_mask("all"), kAllFeatures);
  EXPECT_EQ(parse_feature_mask("no-log-freq"), kFeaturesNoLogFreq);
  EXPECT_EQ(parse_feature_mask("ctx+conf"), std::uint32_t(kFeatureCtx | kFeatureConf));
  EXPECT_EQ(feature_mask_name(kFeatureCtx | kFeatureEnt), "ctx+ent");
  EXPECT_THROW(parse_feature_mask("ctx+bogus"), InvalidInput);
}

TEST(Threshold, QuantileOfLambdas) {
  const std::vector<double> lam{0.9, 0.1, 0.5, 0.3, 0.7};
  EXPECT_EQ(select_lambda_threshold(lam, 0.0), 0.0);
  EXPECT_EQ(select_lambda_threshold(lam, 0.2), 0.1);
  EXPECT_EQ(select_lambda_threshold(lam, 0.5), 0.5);
  EXPECT_THROW(select_lambda_threshold(lam, 1.0), InvalidInput);
}

TEST(Threshold, GatedPerplexityEndpoints) {
  const std::vector<double> lam{0.2, 0.6}, pk{0.5, 0.4}, pn{0.1, 0.2};
  const double full = std::exp(-(std::log(0.2 * 0.5 + 0.8 * 0.1) + std::log(0.6 * 0.4 + 0.4 * 0.2)) / 2);
  EXPECT_NEAR(gated_perplexity(lam, pk, pn, 0.0), full, 1e-12);
  EXPECT_NEAR(gated_perplexity(lam, pk, pn, 1.0), std::exp(-(std::log(0.1) + std::log(0.2)) / 2), 1e-12);
  EXPECT_NEAR(gated_perplexity(lam, pk, pn, 0.2),
              std::exp(-(std::log(0.1) + std::log(0.6 * 0.4 + 0.4 * 0.2)) / 2), 1e-12);
}

TEST(TrainedAdaptor, CheckpointRoundTripsExactly) {
  std::mt19937_64 rng(75);
  AdaptorNet net(tiny_arch(), 8);
  net.round_to_float();
  net.stats().mean[3] = 0.25;
  TrainedAdaptor a{net, 0.4, 0.5, {0.1, 0.4, 0.9}, {0.2, 0.3, 0.4}, {0.5, 0.6, 0.7}, {}};
  const auto path = (std::filesystem::temp_directory_path() / "knnlm_adaptor_roundtrip.knna").string();
  a.save(path);
  const auto b = TrainedAdaptor::load(path);
  std::filesystem::remove(path);
  EXPECT_EQ(b.threshold, a.threshold);
  EXPECT_EQ(b.heldout_lambdas, a.heldout_lambdas);
  EXPECT_EQ(b.heldout_p_knn, a.heldout_p_knn);
  EXPECT_EQ(b.heldout_p_nlm, a.heldout_p_nlm);
  const auto f = random_features(8, rng);
  EXPECT_EQ(b.net.forward(f).log_lambda, a.net.forward(f).log_lambda);
}

TEST(TrainedAdaptor, LearnsWhenRetrievalHelps) {
  // The kNN side is right exactly when conf is low; the adaptor should learn
  // a larger lambda there.
  std::mt19937_64 rng(76);
  std::vector<AdaptorExample> data;
  for (int i = 0; i < 2000; ++i) {
    AdaptorExample ex;
    ex.features = random_features(4, rng);
    const bool knn_good = ex.features.conf < 0.2;
    ex.p_knn = knn_good ? 0.8 : 0.01;
    ex.p_nlm = knn_good ? 0.05 : 0.3;
    data.push_back(ex);
  }
  AdaptorTrainConfig tc;
  tc.arch.ctx_dim = 4;
  tc.arch.hidden_layers = 1;
  tc.arch.hidden_units = 16;
  tc.learning_rate = 3e-3;
  tc.epochs = 15;
  tc.batch_size = 64;
  tc.seed = 2;
  const auto trained = train_adaptor(data, tc);
  double good = 0.0, bad = 0.0;
  int n_good = 0, n_bad = 0;
  for (const auto& ex : data) {
    const double lam = trained.net.forward(ex.features).lambda();
    if (ex.features.conf < 0.2) good += lam, ++n_good;
    else bad += lam, ++n_bad;
  }
  EXPECT_GT(good / n_good, bad / n_bad + 0.3);
  EXPECT_EQ(trained.heldout_lambdas.size(), trained.log.heldout_examples);
}
