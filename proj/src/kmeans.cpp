#include "knnlm/kmeans.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <limits>
#include <numeric>
#include <random>

#include "knnlm/common.hpp"

namespace knnlm {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double sq_dist(const float* a, const float* b, std::size_t dim) {
  double acc = 0.0;
  for (std::size_t i = 0; i < dim; ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return acc;
}

std::vector<float> seed_plus_plus(std::span<const float> points, std::size_t n, std::size_t dim, std::size_t k,
                                  std::mt19937_64& rng) {
  std::vector<float> centroids;
  centroids.reserve(k * dim);
  std::vector<bool> chosen(n, false);
  auto take = [&](std::size_t i) {
    chosen[i] = true;
    centroids.insert(centroids.end(), points.begin() + i * dim, points.begin() + (i + 1) * dim);
  };

  take(std::uniform_int_distribution<std::size_t>(0, n - 1)(rng));
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(&points[i * dim], centroids.data(), dim);

  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n;
    if (total > 0.0) {
      double target = unit(rng) * total;
      for (std::size_t i = 0; i < n; ++i) {
        if (d2[i] <= 0.0) continue;
        pick = i;
        target -= d2[i];
        if (target < 0.0) break;
      }
    } else {
      // Fewer distinct points than clusters: duplicate the first unused point.
      for (std::size_t i = 0; i < n && pick == n; ++i) {
        if (!chosen[i]) pick = i;
      }
    }
    take(pick);
    const float* fresh = centroids.data() + c * dim;
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(&points[i * dim], fresh, dim));
  }
  return centroids;
}

}  // namespace

void assign_nearest(std::span<const float> points, std::size_t n, std::span<const float> centroids,
                    std::size_t k, std::size_t dim, std::vector<std::uint32_t>& assignment,
                    std::vector<double>& distance) {
  assignment.assign(n, 0);
  distance.assign(n, 0.0);
  RowMatrix cents(k, dim);
  for (std::size_t c = 0; c < k; ++c) {
    for (std::size_t j = 0; j < dim; ++j) cents(c, j) = centroids[c * dim + j];
  }
  const Eigen::VectorXd cent_norms = cents.rowwise().squaredNorm();

  constexpr std::size_t kBlock = 1024;
  RowMatrix block;
  for (std::size_t lo = 0; lo < n; lo += kBlock) {
    const std::size_t rows = std::min(kBlock, n - lo);
    block.resize(rows, dim);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t j = 0; j < dim; ++j) block(r, j) = points[(lo + r) * dim + j];
    }
    // ||x - c||^2 = ||x||^2 - 2 x.c + ||c||^2; the ||x||^2 term does not affect argmin.
    const RowMatrix cross = block * cents.transpose();
    for (std::size_t r = 0; r < rows; ++r) {
      std::uint32_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double d = cent_norms[c] - 2.0 * cross(r, c);
        if (d < best_d) {
          best_d = d;
          best = static_cast<std::uint32_t>(c);
        }
      }
      assignment[lo + r] = best;
      distance[lo + r] = sq_dist(&points[(lo + r) * dim], &centroids[best * dim], dim);
    }
  }
}

KMeansResult kmeans(std::span<const float> points, std::size_t n, std::size_t dim, std::size_t k,
                    const KMeansOptions& options) {
  if (k == 0) throw InvalidInput("k-means needs at least one cluster");
  if (k > n) throw InvalidInput("k-means cluster count exceeds number of points");
  if (points.size() != n * dim) throw InvalidInput("k-means point buffer has wrong size");

  std::mt19937_64 rng(options.seed);
  KMeansResult res;
  res.k = k;
  res.dim = dim;
  res.centroids = seed_plus_plus(points, n, dim, k, rng);

  std::vector<std::uint32_t> assignment;
  std::vector<double> distance;
  std::vector<double> sums(k * dim);
  res.sizes.assign(k, 0);

  for (int iter = 0; iter < options.max_iters; ++iter) {
    std::vector<std::uint32_t> previous = std::move(assignment);
    assign_nearest(points, n, res.centroids, k, dim, assignment, distance);
    res.iterations = iter + 1;
    if (assignment == previous) {
      res.converged = true;
      break;
    }

    std::fill(res.sizes.begin(), res.sizes.end(), 0);
    for (std::size_t i = 0; i < n; ++i) ++res.sizes[assignment[i]];

    for (std::size_t empty = 0; empty < k; ++empty) {
      if (res.sizes[empty] != 0) continue;
      const auto largest = static_cast<std::size_t>(
          std::max_element(res.sizes.begin(), res.sizes.end()) - res.sizes.begin());
      std::size_t far = n;
      double far_d = -1.0;
      for (std::size_t i = 0; i < n; ++i) {
        if (assignment[i] == largest && distance[i] > far_d) {
          far_d = distance[i];
          far = i;
        }
      }
      assignment[far] = static_cast<std::uint32_t>(empty);
      distance[far] = 0.0;
      --res.sizes[largest];
      ++res.sizes[empty];
    }

    std::fill(sums.begin(), sums.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      double* s = &sums[assignment[i] * dim];
      for (std::size_t j = 0; j < dim; ++j) s[j] += points[i * dim + j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t j = 0; j < dim; ++j) {
        res.centroids[c * dim + j] = static_cast<float>(sums[c * dim + j] / static_cast<double>(res.sizes[c]));
      }
    }
  }

  if (!res.converged) assign_nearest(points, n, res.centroids, k, dim, assignment, distance);
  res.assignment = std::move(assignment);
  std::fill(res.sizes.begin(), res.sizes.end(), 0);
  for (auto a : res.assignment) ++res.sizes[a];
  return res;
}

std::vector<std::size_t> sample_rows(std::size_t n, std::size_t cap, std::uint64_t seed) {
  std::vector<std::size_t> rows(n);
  std::iota(rows.begin(), rows.end(), 0);
  if (cap >= n) return rows;
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `cap` slots become a uniform sample.
  for (std::size_t i = 0; i < cap; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(rows[i], rows[pick(rng)]);
  }
  rows.resize(cap);
  std::sort(rows.begin(), rows.end());
  return rows;
}

}  // namespace knnlm
