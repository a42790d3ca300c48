#pragma once

// Single-anchor dynamics of a square linear layer under the literal matching
// objective, with the spectral quantities used to analyse them.

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fda/csv.hpp"
#include "fda/error.hpp"
#include "fda/numkit/linalg.hpp"
#include "fda/numkit/matrix.hpp"

namespace fda::lab {

struct LinearTrajectory {
  std::vector<std::vector<double>> x;  // x_0 .. x_T
  std::vector<double> beta;            // beta_0 .. beta_{T-1}
  std::vector<double> sigma;
  std::vector<double> gamma;           // -eta * beta_t
  double eta = 0.0;
  Matrix delta_w;
};

/// dW = Q L' U^T with U the eigenvectors of dW^T dW (columns), L = L'^2.
struct SpectralDecomposition {
  Matrix u;
  std::vector<double> lambda;
  Matrix q;
  std::vector<double> lambda_prime;
  Matrix alpha;  // (Q L')_{j,i}

  std::size_t dim() const { return lambda.size(); }

  /// c^i = u_i^T x for every i.
  std::vector<double> coefficients(std::span<const double> x) const {
    require(x.size() == u.rows(), ErrorCode::ShapeMismatch, "coefficients: dimension");
    std::vector<double> c(u.cols(), 0.0);
    for (std::size_t i = 0; i < u.cols(); ++i)
      for (std::size_t r = 0; r < u.rows(); ++r) c[i] += u(r, i) * x[r];
    return c;
  }
};

inline SpectralDecomposition decompose(const Matrix& delta_w) {
  require(delta_w.rows() == delta_w.cols(), ErrorCode::ShapeMismatch, "linear lab needs a square dW");
  const SvdResult s = svd(delta_w);
  SpectralDecomposition d;
  d.u = s.vt.transpose();
  d.q = s.u;
  d.lambda_prime = s.s;
  for (double v : s.s) d.lambda.push_back(v * v);
  d.alpha = Matrix(d.q.rows(), d.q.cols());
  for (std::size_t j = 0; j < d.q.rows(); ++j)
    for (std::size_t i = 0; i < d.q.cols(); ++i) d.alpha(j, i) = d.q(j, i) * s.s[i];
  return d;
}

/// Iterate x_{t+1} = x_t + eta beta_t dW^T dW x_t (plus eta sigma_t x_t when
/// `keep_sigma_term`), recording the step scalars.
inline LinearTrajectory simulate_dynamics(const Matrix& delta_w, std::span<const double> x0, double eta,
                                          std::size_t steps, bool keep_sigma_term = false) {
  require(delta_w.rows() == delta_w.cols() && delta_w.cols() == x0.size(), ErrorCode::ShapeMismatch,
          "simulate_dynamics: dW must be square and match x0");
  require(norm2(x0) > 0.0, ErrorCode::DegenerateStart, "x0 must be nonzero");
  const SvdResult s = svd(delta_w);
  require(s.s.back() > 1e-12 * s.s.front(), ErrorCode::RankDeficient, "dW is not full rank");

  const Matrix gram = matmul(delta_w, delta_w, true, false);
  const double fro = frobenius_norm(delta_w);
  LinearTrajectory tr;
  tr.eta = eta;
  tr.delta_w = delta_w;
  tr.x.emplace_back(x0.begin(), x0.end());
  for (std::size_t t = 0; t < steps; ++t) {
    const Matrix xt = Matrix::column(tr.x.back());
    const double nx = frobenius_norm(xt);
    const double ndwx = frobenius_norm(matmul(delta_w, xt));
    require(nx > 0.0 && ndwx > 0.0, ErrorCode::DegenerateAnchor, "trajectory reached a degenerate point");
    const double beta = -1.0 / (fro * ndwx * nx);
    const double sigma = ndwx / (fro * nx * nx * nx);
    const Matrix gx = matmul(gram, xt);
    std::vector<double> next(xt.size());
    for (std::size_t i = 0; i < next.size(); ++i)
      next[i] = xt[i] + eta * beta * gx[i] + (keep_sigma_term ? eta * sigma * xt[i] : 0.0);
    tr.beta.push_back(beta);
    tr.sigma.push_back(sigma);
    tr.gamma.push_back(-eta * beta);
    tr.x.push_back(std::move(next));
  }
  return tr;
}

/// c_t^i = c_0^i prod_{j<t} (1 - gamma_j lambda_i) for t = 0..gammas.size().
/// Row t of the result holds (c_t^1 .. c_t^d).
inline Matrix predicted_coefficients(const SpectralDecomposition& dec, std::span<const double> x0,
                                     std::span<const double> gammas) {
  for (double g : gammas) require(g > 0.0, ErrorCode::InvalidArgument, "gamma sequence must be positive");
  require(norm2(x0) > 0.0, ErrorCode::DegenerateStart, "x0 must be nonzero");
  const std::vector<double> c0 = dec.coefficients(x0);
  Matrix c(gammas.size() + 1, c0.size());
  for (std::size_t i = 0; i < c0.size(); ++i) {
    double v = c0[i];
    c(0, i) = v;
    for (std::size_t t = 0; t < gammas.size(); ++t) {
      v *= 1.0 - gammas[t] * dec.lambda[i];
      c(t + 1, i) = v;
    }
  }
  return c;
}

/// Coefficients u_i^T x_t along a simulated trajectory, same layout as
/// predicted_coefficients.
inline Matrix observed_coefficients(const SpectralDecomposition& dec, const LinearTrajectory& tr) {
  Matrix c(tr.x.size(), dec.dim());
  for (std::size_t t = 0; t < tr.x.size(); ++t) {
    const auto row = dec.coefficients(tr.x[t]);
    for (std::size_t i = 0; i < row.size(); ++i) c(t, i) = row[i];
  }
  return c;
}

/// sqrt(head) / sqrt(head + tail) with head = sum_{i<=k} alpha_i^2 and
/// tail = sum_{i>k} c0_i^2 (k is 1-based).
inline double similarity_upper_bound(std::span<const double> alpha_row, std::span<const double> c0, std::size_t k) {
  require(alpha_row.size() == c0.size(), ErrorCode::ShapeMismatch, "bound: alpha and c0 lengths differ");
  require(k >= 1 && k <= c0.size(), ErrorCode::InvalidK, "k must be in [1, d]");
  double head = 0.0, tail = 0.0;
  for (std::size_t i = 0; i < k; ++i) head += alpha_row[i] * alpha_row[i];
  for (std::size_t i = k; i < c0.size(); ++i) tail += c0[i] * c0[i];
  require(head + tail > 0.0, ErrorCode::InvalidArgument, "bound: zero denominator");
  return std::sqrt(head) / std::sqrt(head + tail);
}

inline double similarity_upper_bound(const SpectralDecomposition& dec, std::size_t j, std::span<const double> c0,
                                     std::size_t k) {
  require(j < dec.alpha.rows(), ErrorCode::InvalidArgument, "row index out of range");
  return similarity_upper_bound(dec.alpha.row(j), c0, k);
}

/// sum_{i>k} (u_i^T x)^2, k 1-based with 1 <= k < d.
inline double tail_energy(std::span<const double> x, const SpectralDecomposition& dec, std::size_t k) {
  require(k >= 1 && k < dec.dim(), ErrorCode::InvalidK, "k must be in [1, d)");
  const auto c = dec.coefficients(x);
  double e = 0.0;
  for (std::size_t i = k; i < c.size(); ++i) e += c[i] * c[i];
  return e;
}

inline void write_trajectory_csv(const std::string& path, const Matrix& observed, const Matrix& predicted) {
  require(observed.same_shape(predicted), ErrorCode::ShapeMismatch, "trajectory csv: shapes differ");
  CsvWriter w(path, {"t", "i", "c", "predicted_c"});
  for (std::size_t t = 0; t < observed.rows(); ++t)
    for (std::size_t i = 0; i < observed.cols(); ++i) w.row({t, i + 1, observed(t, i), predicted(t, i)});
}

/// Square matrix with singular values s_i = i^{-p/2} (so eigenvalues of
/// dW^T dW decay like i^{-p}) and Haar-random singular vectors.
template <typename Rng>
Matrix long_tailed_matrix(Rng& rng, std::size_t d, double p, double scale = 1.0) {
  const Matrix a = random_orthogonal(rng, d);
  const Matrix b = random_orthogonal(rng, d);
  Matrix s(d, d);
  for (std::size_t i = 0; i < d; ++i) s(i, i) = scale * std::pow(static_cast<double>(i + 1), -0.5 * p);
  return matmul(matmul(a, s), b, false, true);
}

}  // namespace fda::lab
