#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace knnlm {

struct KMeansOptions {
  int max_iters = 25;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  std::size_t k = 0;
  std::size_t dim = 0;
  std::vector<float> centroids;           // k x dim, row-major
  std::vector<std::uint32_t> assignment;  // argmin centroid per point
  std::vector<std::size_t> sizes;
  int iterations = 0;
  bool converged = false;
};

/// Lloyd's algorithm with k-means++ seeding over `n` row-major points.
/// Stops at an assignment fixpoint or after max_iters; an empty cluster is
/// re-seeded with the point of the largest cluster farthest from its centroid.
/// The returned assignment is always argmin with respect to the returned
/// centroids. Requires 1 <= k <= n.
KMeansResult kmeans(std::span<const float> points, std::size_t n, std::size_t dim, std::size_t k,
                    const KMeansOptions& options);

/// Nearest centroid (ties to the lower index) for every point, plus the squared distance.
void assign_nearest(std::span<const float> points, std::size_t n, std::span<const float> centroids,
                    std::size_t k, std::size_t dim, std::vector<std::uint32_t>& assignment,
                    std::vector<double>& distance);

/// Deterministic uniform sample of min(cap, n) distinct row indices, sorted.
std::vector<std::size_t> sample_rows(std::size_t n, std::size_t cap, std::uint64_t seed);

}  // namespace knnlm
