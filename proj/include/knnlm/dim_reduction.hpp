#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "knnlm/datastore.hpp"
#include "knnlm/pca_transform.hpp"

namespace knnlm {

/// Top-`d_out` eigenvectors of the sample covariance of at most `sample_cap`
/// uniformly sampled rows. Components are sorted by decreasing eigenvalue and
/// signed so that each row's largest-magnitude entry is positive. No rotation.
PcaTransform fit_pca(std::span<const float> keys, std::size_t n, std::size_t dim, std::size_t d_out,
                     std::size_t sample_cap, std::uint64_t seed);

/// Haar-style random orthogonal matrix (row-major, dim x dim) with determinant +1,
/// from the QR factorization of a seeded Gaussian matrix.
std::vector<double> random_rotation(std::size_t dim, std::uint64_t seed);

/// Copy of `t` with a random rotation applied after the projection.
PcaTransform with_rotation(PcaTransform t, std::uint64_t seed);

/// New datastore whose keys are `t` applied to the old keys; the transform is
/// attached so queries get the same treatment.
Datastore reduce_datastore(const Datastore& ds, const PcaTransform& t);

}  // namespace knnlm
