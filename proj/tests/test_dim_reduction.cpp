#include <gtest/gtest.h>

#include <random>

#include "knnlm/ann_index.hpp"
#include "knnlm/dim_reduction.hpp"
#include "oracles.hpp"

using namespace knnlm;

namespace {

// Rows with a decaying per-coordinate scale in a randomly rotated basis.
std::vector<float> anisotropic_rows(std::size_t n, std::size_t dim, std::mt19937_64& rng) {
  const auto basis = random_rotation(dim, 99);
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<float> rows(n * dim);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> z(dim);
    for (std::size_t j = 0; j < dim; ++j) z[j] = g(rng) * std::pow(0.8, double(j)) + (j == 0 ? 3.0 : 0.0);
    for (std::size_t a = 0; a < dim; ++a) {
      double s = 0.0;
      for (std::size_t b = 0; b < dim; ++b) s += basis[a * dim + b] * z[b];
      rows[i * dim + a] = float(s);
    }
  }
  return rows;
}

double orthogonality_error(const std::vector<double>& m, std::size_t rows, std::size_t cols) {
  double worst = 0.0;
  for (std::size_t a = 0; a < rows; ++a) {
    for (std::size_t b = 0; b < rows; ++b) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += m[a * cols + j] * m[b * cols + j];
      worst = std::max(worst, std::abs(dot - (a == b ? 1.0 : 0.0)));
    }
  }
  return worst;
}

}  // namespace

TEST(Pca, ProjectionVarianceMatchesEigensolverOracle) {
  std::mt19937_64 rng(61);
  for (std::size_t dim : {4, 16, 32}) {
    const std::size_t n = 500, d_out = dim / 4;
    const auto rows = anisotropic_rows(n, dim, rng);
    const auto t = fit_pca(rows, n, dim, d_out, n, 1);
    const auto eig = oracle::jacobi_eigenvalues(oracle::covariance(rows, n, dim), dim);
    const auto projected = t.apply_batch(rows);
    const auto proj_cov = oracle::covariance(projected, n, d_out);
    for (std::size_t c = 0; c < d_out; ++c) EXPECT_NEAR(proj_cov[c * d_out + c], eig[c], 1e-6 * (1.0 + eig[c]));
    double total = 0.0;
    for (double e : eig) total += e;
    for (std::size_t c = 0; c < d_out; ++c) EXPECT_NEAR(t.explained[c], eig[c] / total, 1e-6);
  }
}

TEST(Pca, ComponentsAreOrthonormalAndSigned) {
  std::mt19937_64 rng(62);
  const auto rows = anisotropic_rows(300, 12, rng);
  const auto t = fit_pca(rows, 300, 12, 6, 300, 1);
  EXPECT_LT(orthogonality_error(t.components, 6, 12), 1e-9);
  for (std::size_t c = 0; c < 6; ++c) {
    const auto row = std::span<const double>(t.components).subspan(c * 12, 12);
    const auto big = std::max_element(row.begin(), row.end(), [](double a, double b) { return std::abs(a) < std::abs(b); });
    EXPECT_GT(*big, 0.0);
  }
  for (std::size_t c = 1; c < 6; ++c) EXPECT_LE(t.explained[c], t.explained[c - 1]);
}

TEST(Pca, LineDataHasOneComponent) {
  std::vector<float> rows;
  for (int i = 0; i < 50; ++i) {
    const float s = float(i) * 0.1f - 2.5f;
    rows.insert(rows.end(), {1.0f + 2.0f * s, -1.0f * s, 0.5f + 2.0f * s});
  }
  const auto t = fit_pca(rows, 50, 3, 1, 50, 1);
  EXPECT_NEAR(t.explained[0], 1.0, 1e-9);
  EXPECT_NEAR(t.components[0], 2.0 / 3.0, 1e-6);
  EXPECT_NEAR(t.components[1], -1.0 / 3.0, 1e-6);
  EXPECT_NEAR(t.components[2], 2.0 / 3.0, 1e-6);
}

TEST(Pca, FullRankTransformPreservesRankings) {
  std::mt19937_64 rng(63);
  const auto ds = oracle::random_store(400, 16, 10, rng);
  for (bool rotate : {false, true}) {
    auto t = fit_pca(ds.keys(), ds.size(), 16, 16, 1000, 1);
    if (rotate) t = with_rotation(std::move(t), 5);
    const auto reduced = reduce_datastore(ds, t);
    FlatRetriever r(reduced);
    for (int q = 0; q < 20; ++q) {
      const auto query = oracle::random_store(1, 16, 10, rng).keys();
      const auto a = flat_search(ds, query, 10);
      const auto b = r.search(query, 10);
      ASSERT_EQ(a.size(), b.size());
      for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].id, b[i].id);
        EXPECT_NEAR(a[i].distance, b[i].distance, 1e-4 * std::max(1.0, a[i].distance));
      }
    }
  }
}

TEST(Pca, MeanMapsToZeroAndBatchMatchesSingle) {
  std::mt19937_64 rng(64);
  const auto rows = anisotropic_rows(100, 8, rng);
  const auto t = with_rotation(fit_pca(rows, 100, 8, 3, 100, 1), 2);
  std::vector<float> mean(t.mean.begin(), t.mean.end());
  for (float y : t.apply(mean)) EXPECT_NEAR(y, 0.0f, 1e-5f);
  const auto batch = t.apply_batch(rows);
  for (std::size_t i = 0; i < 100; ++i) {
    const auto single = t.apply(std::span<const float>(rows).subspan(i * 8, 8));
    for (std::size_t j = 0; j < 3; ++j) EXPECT_EQ(batch[i * 3 + j], single[j]);
  }
  EXPECT_THROW(t.apply(std::vector<float>(7, 0.0f)), InvalidInput);
}

TEST(Pca, ReconstructionBeatsRandomBases) {
  std::mt19937_64 rng(65);
  const std::size_t n = 200, dim = 10, d_out = 3;
  const auto rows = anisotropic_rows(n, dim, rng);
  const auto t = fit_pca(rows, n, dim, d_out, n, 1);
  auto error_for = [&](const std::vector<double>& basis) {
    double err = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> c(dim);
      for (std::size_t j = 0; j < dim; ++j) c[j] = rows[i * dim + j] - t.mean[j];
      std::vector<double> rec(dim, 0.0);
      for (std::size_t a = 0; a < d_out; ++a) {
        double y = 0.0;
        for (std::size_t j = 0; j < dim; ++j) y += basis[a * dim + j] * c[j];
        for (std::size_t j = 0; j < dim; ++j) rec[j] += y * basis[a * dim + j];
      }
      for (std::size_t j = 0; j < dim; ++j) err += (rec[j] - c[j]) * (rec[j] - c[j]);
    }
    return err;
  };
  const double pca_err = error_for(t.components);
  for (std::uint64_t s = 0; s < 10; ++s) {
    auto q = random_rotation(dim, 100 + s);
    q.resize(d_out * dim);
    EXPECT_LE(pca_err, error_for(q));
  }
}

TEST(Pca, RejectsTooFewSamples) {
  std::vector<float> rows(3 * 4, 1.0f);
  EXPECT_THROW(fit_pca(rows, 3, 4, 3, 10, 1), InvalidInput);
  EXPECT_THROW(fit_pca(rows, 3, 4, 5, 10, 1), InvalidInput);
}

TEST(RandomRotation, OrthogonalWithUnitDeterminantAndSeeded) {
  for (std::size_t dim : {1, 2, 7, 32}) {
    const auto r = random_rotation(dim, 3);
    EXPECT_LT(orthogonality_error(r, dim, dim), 1e-6);
    std::vector<double> lu = r;
    double det = 1.0;
    for (std::size_t c = 0; c < dim; ++c) {
      std::size_t p = c;
      for (std::size_t i = c + 1; i < dim; ++i)
        if (std::abs(lu[i * dim + c]) > std::abs(lu[p * dim + c])) p = i;
      if (p != c) {
        for (std::size_t j = 0; j < dim; ++j) std::swap(lu[p * dim + j], lu[c * dim + j]);
        det = -det;
      }
      det *= lu[c * dim + c];
      for (std::size_t i = c + 1; i < dim; ++i) {
        const double f = lu[i * dim + c] / lu[c * dim + c];
        for (std::size_t j = c; j < dim; ++j) lu[i * dim + j] -= f * lu[c * dim + j];
      }
    }
    EXPECT_NEAR(det, 1.0, 1e-9);
    EXPECT_EQ(r, random_rotation(dim, 3));
  }
  EXPECT_NE(random_rotation(8, 1), random_rotation(8, 2));
}

TEST(RandomRotation, PreservesNorms) {
  const std::size_t dim = 16;
  const auto r = random_rotation(dim, 4);
  std::mt19937_64 rng(66);
  std::normal_distribution<double> g;
  std::vector<double> x(dim);
  double before = 0.0, after = 0.0;
  for (auto& v : x) v = g(rng), before += v * v;
  for (std::size_t a = 0; a < dim; ++a) {
    double y = 0.0;
    for (std::size_t b = 0; b < dim; ++b) y += r[a * dim + b] * x[b];
    after += y * y;
  }
  EXPECT_NEAR(after, before, 1e-6 * before);
}

TEST(ReduceDatastore, KeepsValuesAndAttachesTransform) {
  std::mt19937_64 rng(67);
  const auto ds = oracle::random_store(100, 8, 5, rng);
  const auto t = fit_pca(ds.keys(), ds.size(), 8, 3, 100, 1);
  const auto reduced = reduce_datastore(ds, t);
  EXPECT_EQ(reduced.dim(), 3u);
  EXPECT_EQ(reduced.values(), ds.values());
  ASSERT_TRUE(reduced.transform().has_value());
  EXPECT_THROW(reduce_datastore(reduced, t), InvalidInput);
}
