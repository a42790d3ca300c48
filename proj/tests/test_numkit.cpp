#include <gtest/gtest.h>

#include <cmath>

#include "fda/numkit.hpp"

using fda::Matrix;

namespace {

double max_abs_diff(const Matrix& a, const Matrix& b) { return fda::max_abs(a - b); }

Matrix gram_identity_gap(const Matrix& q, bool columns) {
  Matrix g = columns ? fda::matmul(q, q, true, false) : fda::matmul(q, q, false, true);
  return g - Matrix::identity(g.rows());
}

void expect_valid_svd(const Matrix& m) {
  const fda::SvdResult f = fda::svd(m);
  ASSERT_EQ(f.s.size(), std::min(m.rows(), m.cols()));
  for (std::size_t k = 0; k < f.s.size(); ++k) {
    EXPECT_GE(f.s[k], 0.0);
    if (k) EXPECT_LE(f.s[k], f.s[k - 1]);
  }
  const double rel = fda::frobenius_norm(f.reconstruct() - m) / std::max(1.0, fda::frobenius_norm(m));
  EXPECT_LE(rel, 1e-10) << m.shape_str();
  EXPECT_LE(fda::max_abs(gram_identity_gap(f.u, true)), 1e-10);
  EXPECT_LE(fda::max_abs(gram_identity_gap(f.vt, false)), 1e-10);
}

double ls_objective(const Matrix& a, const std::vector<double>& x, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double r = -b[i];
    for (std::size_t j = 0; j < a.cols(); ++j) r += a(i, j) * x[j];
    s += r * r;
  }
  return s;
}

}  // namespace

TEST(CosDist, IdentityAndAntipodal) {
  const Matrix a = Matrix::from_rows({{1.5, -2.0}, {0.25, 3.0}});
  EXPECT_NEAR(fda::cos_dist(a, a), 0.0, 1e-15);
  EXPECT_NEAR(fda::cos_dist(a, -a), 2.0, 1e-15);
}

TEST(CosDist, HandComputedValue) {
  // <a,b> = 1, |a| = 1, |b| = sqrt(2).
  const Matrix a = Matrix::from_rows({{1, 0}, {0, 0}});
  const Matrix b = Matrix::from_rows({{1, 1}, {0, 0}});
  EXPECT_NEAR(fda::cos_dist(a, b), 1.0 - 1.0 / std::sqrt(2.0), 1e-15);
}

TEST(CosDist, Errors) {
  const Matrix z(2, 2);
  const Matrix a = Matrix::identity(2);
  try {
    (void)fda::cos_dist(a, z);
    FAIL();
  } catch (const fda::Error& e) {
    EXPECT_EQ(e.code(), fda::ErrorCode::ZeroNorm);
  }
  try {
    (void)fda::cos_dist(a, Matrix(2, 3, 1.0));
    FAIL();
  } catch (const fda::Error& e) {
    EXPECT_EQ(e.code(), fda::ErrorCode::ShapeMismatch);
  }
}

TEST(CosDist, PositiveScaleInvariance) {
  fda::RngStream rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    const Matrix a = fda::gaussian_matrix(rng, 3, 4);
    const Matrix b = fda::gaussian_matrix(rng, 3, 4);
    const double alpha = std::exp(6.0 * (rng.uniform() - 0.5));
    const double beta = std::exp(6.0 * (rng.uniform() - 0.5));
    const double d = fda::cos_dist(a, b);
    EXPECT_GE(d, 0.0);
    EXPECT_LE(d, 2.0);
    EXPECT_NEAR(fda::cos_dist(a * alpha, b * beta), d, 1e-13);
  }
}

TEST(Svd, SmallExamples) {
  EXPECT_EQ(fda::svd(Matrix::identity(2)).s, (std::vector<double>{1.0, 1.0}));
  const auto d = fda::svd(Matrix::from_rows({{3, 0}, {0, 0}}));
  EXPECT_NEAR(d.s[0], 3.0, 1e-15);
  EXPECT_NEAR(d.s[1], 0.0, 1e-15);
  expect_valid_svd(Matrix::from_rows({{3, 0}, {0, 0}}));
}

TEST(Svd, MatchesGramEigenvalues) {
  // Oracle: eigenvalues of the symmetric 2x2 M^T M in closed form.
  const Matrix m = Matrix::from_rows({{0, 2}, {1, 0}});
  const Matrix g = fda::matmul(m, m, true, false);
  const double tr = g(0, 0) + g(1, 1);
  const double det = g(0, 0) * g(1, 1) - g(0, 1) * g(1, 0);
  const double disc = std::sqrt(tr * tr / 4 - det);
  const double l1 = tr / 2 + disc, l2 = tr / 2 - disc;
  const auto f = fda::svd(m);
  EXPECT_NEAR(f.s[0], std::sqrt(l1), 1e-14);
  EXPECT_NEAR(f.s[1], std::sqrt(l2), 1e-14);
  EXPECT_NEAR(f.s[0], 2.0, 1e-14);
  EXPECT_NEAR(f.s[1], 1.0, 1e-14);
}

TEST(Svd, RandomShapesReconstructAndStayOrthonormal) {
  fda::RngStream rng(5);
  for (auto [r, c] : std::vector<std::pair<std::size_t, std::size_t>>{
           {1, 1}, {1, 7}, {7, 1}, {5, 3}, {3, 5}, {16, 16}, {40, 13}, {13, 64}, {96, 96}}) {
    expect_valid_svd(fda::gaussian_matrix(rng, r, c));
  }
}

TEST(Svd, LargeRandom256) { 
  fda::RngStream rng(6);
  expect_valid_svd(fda::gaussian_matrix(rng, 256, 256));
}

TEST(Svd, RankDeficientStillOrthonormal) {
  fda::RngStream rng(8);
  const Matrix a = fda::gaussian_matrix(rng, 9, 2);
  const Matrix b = fda::gaussian_matrix(rng, 2, 6);
  const Matrix low = fda::matmul(a, b);  // rank 2, 9x6
  expect_valid_svd(low);
  const auto f = fda::svd(low);
  for (std::size_t k = 2; k < f.s.size(); ++k) EXPECT_LE(f.s[k], 1e-12 * f.s[0]);
  expect_valid_svd(Matrix(4, 3));
}

TEST(Svd, TruncationKeepsRankOne) {
  fda::RngStream rng(9);
  const Matrix u = fda::gaussian_matrix(rng, 6, 1);
  const Matrix v = fda::gaussian_matrix(rng, 1, 4);
  const Matrix r1 = fda::matmul(u, v);
  EXPECT_LE(max_abs_diff(fda::truncated_reconstruction(fda::svd(r1), 1), r1), 1e-12);
}

TEST(Nnls, Examples) {
  const Matrix i2 = Matrix::identity(2);
  const auto x1 = fda::nnls(i2, std::vector<double>{2, 3});
  EXPECT_NEAR(x1[0], 2.0, 1e-14);
  EXPECT_NEAR(x1[1], 3.0, 1e-14);
  const auto x0 = fda::nnls(i2, std::vector<double>{0, 0});
  EXPECT_EQ(x0, (std::vector<double>{0, 0}));
}

TEST(Nnls, GridSearchOracle) {
  // Brute-force the non-negative quadrant on a grid around the expected optimum.
  const Matrix i2 = Matrix::identity(2);
  const std::vector<double> b{1, -1};
  double best = 1e300;
  std::vector<double> arg{0, 0};
  for (int i = 0; i <= 400; ++i)
    for (int j = 0; j <= 400; ++j) {
      const std::vector<double> x{i * 0.005, j * 0.005};
      const double f = ls_objective(i2, x, b);
      if (f < best) {
        best = f;
        arg = x;
      }
    }
  EXPECT_DOUBLE_EQ(arg[0], 1.0);
  EXPECT_DOUBLE_EQ(arg[1], 0.0);
  const auto x = fda::nnls(i2, b);
  EXPECT_NEAR(x[0], arg[0], 1e-14);
  EXPECT_NEAR(x[1], arg[1], 1e-14);
}

TEST(Nnls, DimensionMismatch) {
  try {
    (void)fda::nnls(Matrix::identity(3), std::vector<double>{1, 2});
    FAIL();
  } catch (const fda::Error& e) {
    EXPECT_EQ(e.code(), fda::ErrorCode::DimensionMismatch);
  }
}

TEST(Nnls, KktAndClampedLeastSquaresBound) {
  fda::RngStream rng(21);
  for (int trial = 0; trial < 60; ++trial) {
    const std::size_t m = 5 + rng.uniform_index(30);
    const std::size_t n = 1 + rng.uniform_index(std::min<std::size_t>(m, 20));
    const Matrix a = fda::gaussian_matrix(rng, m, n);
    std::vector<double> b(m);
    for (double& v : b) v = rng.normal();
    const auto x = fda::nnls(a, b);

    std::vector<double> atb(n, 0.0), grad(n, 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double r = -b[i];
      for (std::size_t j = 0; j < n; ++j) r += a(i, j) * x[j];
      for (std::size_t j = 0; j < n; ++j) {
        grad[j] += a(i, j) * r;
        atb[j] += a(i, j) * b[i];
      }
    }
    double scale = 0.0;
    for (double v : atb) scale = std::max(scale, std::abs(v));
    const double tol = 1e-8 * scale;
    for (std::size_t j = 0; j < n; ++j) {
      ASSERT_GE(x[j], 0.0);
      if (x[j] > 0.0) {
        EXPECT_LE(std::abs(grad[j]), tol) << "trial " << trial;
      } else {
        EXPECT_GE(grad[j], -tol) << "trial " << trial;
      }
    }

    auto clamp = fda::least_squares(a, b);
    for (double& v : clamp) v = std::max(v, 0.0);
    EXPECT_LE(ls_objective(a, x, b), ls_objective(a, clamp, b) + 1e-12);
  }
}

TEST(Nnls, CollinearColumns) {
  fda::RngStream rng(22);
  Matrix a = fda::gaussian_matrix(rng, 20, 6);
  for (std::size_t i = 0; i < 20; ++i) {
    a(i, 3) = 2.0 * a(i, 1);
    a(i, 5) = a(i, 0) + a(i, 2);
  }
  std::vector<double> b(20);
  for (double& v : b) v = rng.normal();
  const auto x = fda::nnls(a, b);
  for (double v : x) EXPECT_GE(v, 0.0);
}

TEST(Gaussian, DeterministicPerSeed) {
  fda::RngStream r1(1234), r2(1234);
  EXPECT_EQ(fda::gaussian_matrix(r1, 4, 5), fda::gaussian_matrix(r2, 4, 5));
  fda::RngStream r3(7);
  const Matrix one = fda::gaussian_matrix(r3, 1, 1);
  EXPECT_TRUE(std::isfinite(one(0, 0)));
}

TEST(Gaussian, StandardNormalMoments) {
  fda::RngStream rng(99);
  const Matrix g = fda::gaussian_matrix(rng, 1000, 100);
  double mean = fda::sum(g) / g.size();
  double var = 0.0;
  for (double v : g.values()) var += (v - mean) * (v - mean);
  var /= static_cast<double>(g.size() - 1);
  EXPECT_NEAR(mean, 0.0, 0.02);
  EXPECT_NEAR(var, 1.0, 0.03);
}

TEST(Rng, MatchesReferenceXoshiro256StarStar) {
  // Reference values from an independent implementation (splitmix64 seeding, seed 0).
  fda::RngStream rng(0);
  EXPECT_EQ(rng.next_u64(), 0x99ec5f36cb75f2b4ULL);
  EXPECT_EQ(rng.next_u64(), 0xbf6e1f784956452aULL);
  EXPECT_EQ(rng.next_u64(), 0x1a5f849d4933e6e0ULL);
}

TEST(Rng, UniformIndexInRange) {
  fda::RngStream rng(3);
  std::vector<int> counts(7, 0);
  for (int i = 0; i < 7000; ++i) ++counts[rng.uniform_index(7)];
  for (int c : counts) EXPECT_NEAR(c, 1000, 150);
}

TEST(Svd, DuplicatedRowConverges) {
  fda::RngStream rng(41);
  Matrix a = fda::gaussian_matrix(rng, 4, 4);
  for (std::size_t c = 0; c < 4; ++c) a(3, c) = a(2, c);
  const auto f = fda::svd(a);
  EXPECT_LE(f.s[3], 1e-14 * f.s[0]);
  Matrix diff = f.reconstruct();
  diff -= a;
  EXPECT_LE(fda::frobenius_norm(diff), 1e-13 * fda::frobenius_norm(a));
}
