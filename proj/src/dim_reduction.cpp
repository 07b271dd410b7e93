#include "knnlm/dim_reduction.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <random>

#include "knnlm/kmeans.hpp"

namespace knnlm {

void PcaTransform::apply_into(std::span<const float> x, std::span<float> out) const {
  if (x.size() != in_dim) throw InvalidInput("transform input has wrong dimension");
  if (out.size() != out_dim) throw InvalidInput("transform output has wrong dimension");
  std::vector<double> centered(in_dim);
  for (std::size_t j = 0; j < in_dim; ++j) centered[j] = static_cast<double>(x[j]) - mean[j];
  std::vector<double> proj(out_dim, 0.0);
  for (std::size_t r = 0; r < out_dim; ++r) {
    const double* row = components.data() + r * in_dim;
    double acc = 0.0;
    for (std::size_t j = 0; j < in_dim; ++j) acc += row[j] * centered[j];
    proj[r] = acc;
  }
  if (has_rotation()) {
    for (std::size_t r = 0; r < out_dim; ++r) {
      const double* row = rotation.data() + r * out_dim;
      double acc = 0.0;
      for (std::size_t j = 0; j < out_dim; ++j) acc += row[j] * proj[j];
      out[r] = static_cast<float>(acc);
    }
  } else {
    for (std::size_t r = 0; r < out_dim; ++r) out[r] = static_cast<float>(proj[r]);
  }
}

std::vector<float> PcaTransform::apply(std::span<const float> x) const {
  std::vector<float> out(out_dim);
  apply_into(x, out);
  return out;
}

std::vector<float> PcaTransform::apply_batch(std::span<const float> rows) const {
  if (rows.size() % in_dim != 0) throw InvalidInput("transform batch is not a whole number of rows");
  const std::size_t n = rows.size() / in_dim;
  std::vector<float> out(n * out_dim);
  for (std::size_t i = 0; i < n; ++i) {
    apply_into(rows.subspan(i * in_dim, in_dim), std::span<float>(out.data() + i * out_dim, out_dim));
  }
  return out;
}

void PcaTransform::serialize(io::Writer& out) const {
  out.put_magic("KNNT");
  out.put<std::uint32_t>(1);
  out.put<std::uint32_t>(static_cast<std::uint32_t>(in_dim));
  out.put<std::uint32_t>(static_cast<std::uint32_t>(out_dim));
  out.put<std::uint32_t>(has_rotation() ? 1u : 0u);
  out.put_span<double>(mean);
  out.put_span<double>(components);
  if (has_rotation()) out.put_span<double>(rotation);
  out.put_span<double>(explained);
}

PcaTransform PcaTransform::deserialize(io::Reader& in) {
  in.expect_magic("KNNT");
  if (in.get<std::uint32_t>() != 1) in.fail("unsupported transform version");
  PcaTransform t;
  t.in_dim = in.get<std::uint32_t>();
  t.out_dim = in.get<std::uint32_t>();
  const auto rotated = in.get<std::uint32_t>();
  if (t.in_dim == 0 || t.out_dim == 0 || t.out_dim > t.in_dim || rotated > 1) in.fail("bad transform header");
  t.mean = in.get_vector<double>(t.in_dim);
  t.components = in.get_vector<double>(t.out_dim * t.in_dim);
  if (rotated) t.rotation = in.get_vector<double>(t.out_dim * t.out_dim);
  t.explained = in.get_vector<double>(t.out_dim);
  return t;
}

PcaTransform fit_pca(std::span<const float> keys, std::size_t n, std::size_t dim, std::size_t d_out,
                     std::size_t sample_cap, std::uint64_t seed) {
  if (d_out == 0 || d_out > dim) throw InvalidInput("reduced dimension must be in [1, dim]");
  if (keys.size() != n * dim) throw InvalidInput("key matrix has wrong size");
  const auto rows = sample_rows(n, sample_cap, seed);
  if (rows.size() < d_out + 1) {
    throw InvalidInput("PCA needs at least d_out + 1 samples, got " + std::to_string(rows.size()));
  }

  Eigen::MatrixXd x(rows.size(), dim);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    for (std::size_t j = 0; j < dim; ++j) x(r, j) = keys[rows[r] * dim + j];
  }
  const Eigen::RowVectorXd mu = x.colwise().mean();
  x.rowwise() -= mu;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(rows.size() - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(cov);
  if (eig.info() != Eigen::Success) throw InvalidInput("covariance eigendecomposition failed");

  PcaTransform t;
  t.in_dim = dim;
  t.out_dim = d_out;
  t.mean.assign(mu.data(), mu.data() + dim);
  const double total = std::max(cov.trace(), 0.0);
  for (std::size_t r = 0; r < d_out; ++r) {
    // Eigen returns eigenvalues in increasing order.
    const auto col = static_cast<Eigen::Index>(dim - 1 - r);
    Eigen::VectorXd v = eig.eigenvectors().col(col);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v[arg] < 0) v = -v;
    t.components.insert(t.components.end(), v.data(), v.data() + dim);
    const double lambda = std::max(eig.eigenvalues()[col], 0.0);
    t.explained.push_back(total > 0.0 ? lambda / total : 0.0);
  }
  return t;
}

std::vector<double> random_rotation(std::size_t dim, std::uint64_t seed) {
  if (dim == 0) throw InvalidInput("rotation dimension must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Eigen::MatrixXd g(dim, dim);
  for (Eigen::Index r = 0; r < g.rows(); ++r) {
    for (Eigen::Index c = 0; c < g.cols(); ++c) g(r, c) = gauss(rng);
  }
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  if (q.determinant() < 0) q.col(0) = -q.col(0);

  std::vector<double> out(dim * dim);
  for (std::size_t i = 0; i < dim; ++i) {
    for (std::size_t j = 0; j < dim; ++j) out[i * dim + j] = q(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j));
  }
  return out;
}

PcaTransform with_rotation(PcaTransform t, std::uint64_t seed) {
  t.rotation = random_rotation(t.out_dim, seed);
  return t;
}

Datastore reduce_datastore(const Datastore& ds, const PcaTransform& t) {
  if (ds.transform()) throw InvalidInput("datastore keys are already reduced");
  if (t.in_dim != ds.dim()) throw InvalidInput("transform input dimension does not match datastore");
  auto keys = t.apply_batch(ds.keys());
  std::string note = "pca d_out=" + std::to_string(t.out_dim) + (t.has_rotation() ? " rotated" : "");
  return Datastore(t.out_dim, std::move(keys), ds.values(), ds.weights(), ds.provenance() + "\n" + note, t);
}

}  // namespace knnlm
