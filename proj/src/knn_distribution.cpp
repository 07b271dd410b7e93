#include "knnlm/knn_distribution.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "knnlm/ann_index.hpp"

namespace knnlm {

double SparseDist::prob(TokenId token) const {
  auto it = std::lower_bound(entries.begin(), entries.end(), token,
                             [](const auto& e, TokenId t) { return e.first < t; });
  return (it != entries.end() && it->first == token) ? it->second : 0.0;
}

double SparseDist::total() const {
  double s = 0.0;
  for (const auto& [t, p] : entries) s += p;
  return s;
}

namespace {

SparseDist aggregate(std::span<const NeighborHit> hits, bool use_weights) {
  if (hits.empty()) throw InvalidInput("kNN distribution needs at least one neighbor");
  double shift = std::numeric_limits<double>::infinity();
  for (const auto& h : hits) {
    if (!std::isfinite(h.distance)) throw InvalidInput("neighbor distance must be finite");
    if (use_weights && !(h.weight >= 0.0f)) throw InvalidInput("neighbor weights must be non-negative");
    if (!use_weights || h.weight > 0.0f) shift = std::min(shift, h.distance);
  }
  if (!std::isfinite(shift)) throw InvalidInput("all neighbor weights are zero");

  // exp(-(d - d_min)) keeps the largest term at weight * 1.
  std::vector<std::pair<TokenId, double>> mass;
  mass.reserve(hits.size());
  for (const auto& h : hits) {
    const double w = use_weights ? static_cast<double>(h.weight) : 1.0;
    if (w > 0.0) mass.emplace_back(h.value, w * std::exp(-(h.distance - shift)));
  }
  std::sort(mass.begin(), mass.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  SparseDist out;
  double norm = 0.0;
  for (const auto& [tok, m] : mass) {
    if (!out.entries.empty() && out.entries.back().first == tok) {
      out.entries.back().second += m;
    } else {
      out.entries.emplace_back(tok, m);
    }
    norm += m;
  }
  for (auto& [tok, p] : out.entries) p /= norm;
  std::erase_if(out.entries, [](const auto& e) { return !(e.second > 0.0); });
  return out;
}

}  // namespace

SparseDist knn_distribution(std::span<const NeighborHit> hits) { return aggregate(hits, false); }

SparseDist weighted_knn_distribution(std::span<const NeighborHit> hits) { return aggregate(hits, true); }

DenseDist interpolate(const SparseDist& p_knn, const DenseDist& p_nlm, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidInput("interpolation weight must lie in [0, 1]");
  DenseDist out(p_nlm.size());
  const double keep = 1.0 - lambda;
  for (std::size_t i = 0; i < p_nlm.size(); ++i) out[i] = keep * p_nlm[i];
  for (const auto& [tok, p] : p_knn.entries) {
    if (tok >= out.size()) throw InvalidInput("kNN token outside vocabulary");
    out[tok] += lambda * p;
  }
  return out;
}

double interpolate_token(double p_knn, double p_nlm, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw InvalidInput("interpolation weight must lie in [0, 1]");
  return lambda * p_knn + (1.0 - lambda) * p_nlm;
}

}  // namespace knnlm
