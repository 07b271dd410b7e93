#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "knnlm/binary_io.hpp"

namespace knnlm {

/// Affine map y = rotation * components * (x - mean). Stored with the reduced
/// datastore so that queries are always transformed the same way as keys.
struct PcaTransform {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> mean;        // in_dim
  std::vector<double> components;  // out_dim x in_dim, row-major, orthonormal rows
  std::vector<double> rotation;    // out_dim x out_dim, or empty when disabled
  std::vector<double> explained;   // variance fraction per component

  bool has_rotation() const { return !rotation.empty(); }

  void apply_into(std::span<const float> x, std::span<float> out) const;
  std::vector<float> apply(std::span<const float> x) const;
  /// Row-major batch of vectors, in_dim each.
  std::vector<float> apply_batch(std::span<const float> rows) const;

  /// Serialized as a "KNNT" section.
  void serialize(io::Writer& out) const;
  static PcaTransform deserialize(io::Reader& in);
};

}  // namespace knnlm
