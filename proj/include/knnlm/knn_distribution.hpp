#pragma once

#include <span>
#include <utility>
#include <vector>

#include "knnlm/common.hpp"

namespace knnlm {

struct NeighborHit;

/// Log-probabilities below this are clamped when accumulating perplexity, so a
/// target with zero mixture probability (lambda = 1, unretrieved) stays finite.
inline constexpr double kLogProbFloor = -50.0;

/// Probability vector over the full vocabulary.
using DenseDist = std::vector<double>;

/// kNN next-token distribution restricted to retrieved tokens. Entries are
/// sorted by token id and every probability is strictly positive.
struct SparseDist {
  std::vector<std::pair<TokenId, double>> entries;

  /// Probability of `token`, zero when it was not retrieved.
  double prob(TokenId token) const;
  double total() const;
};

/// p(y) proportional to the summed exp(-distance) of hits whose value is y.
SparseDist knn_distribution(std::span<const NeighborHit> hits);

/// Same as knn_distribution but each hit contributes weight * exp(-distance).
/// Reduces to knn_distribution when all weights are 1.
SparseDist weighted_knn_distribution(std::span<const NeighborHit> hits);

/// lambda * p_knn + (1 - lambda) * p_nlm over the whole vocabulary.
DenseDist interpolate(const SparseDist& p_knn, const DenseDist& p_nlm, double lambda);

/// Mixture probability of a single token, without materializing the dense vector.
double interpolate_token(double p_knn, double p_nlm, double lambda);

}  // namespace knnlm
