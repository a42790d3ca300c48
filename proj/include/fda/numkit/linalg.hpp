#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "fda/numkit/matrix.hpp"

namespace fda {

struct SvdResult {
  Matrix u;               ///< rows x r, orthonormal columns
  std::vector<double> s;  ///< r = min(rows, cols) values, non-increasing
  Matrix vt;              ///< r x cols, orthonormal rows

  Matrix reconstruct() const {
    Matrix us = u;
    for (std::size_t i = 0; i < us.rows(); ++i)
      for (std::size_t j = 0; j < us.cols(); ++j) us(i, j) *= s[j];
    return matmul(us, vt);
  }
};

struct SvdOptions {
  int max_sweeps = 60;
};

namespace detail {

inline double dot_n(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

/// Extend `cols` (each length n, orthonormal) with unit vectors until there are `want`.
inline void complete_orthonormal(std::vector<std::vector<double>>& cols, std::size_t n, std::size_t want) {
  for (std::size_t e = 0; cols.size() < want && e < n; ++e) {
    std::vector<double> v(n, 0.0);
    v[e] = 1.0;
    for (int pass = 0; pass < 2; ++pass)
      for (const auto& c : cols) {
        const double d = dot_n(c.data(), v.data(), n);
        for (std::size_t i = 0; i < n; ++i) v[i] -= d * c[i];
      }
    const double nv = norm2(v);
    if (nv < 1e-8) continue;
    for (double& x : v) x /= nv;
    cols.push_back(std::move(v));
  }
}

/// One-sided (Hestenes) Jacobi for a tall matrix (rows >= cols).
inline SvdResult jacobi_svd_tall(const Matrix& a, const SvdOptions& opt) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  // Column-major working copies so rotations touch contiguous memory.
  std::vector<std::vector<double>> u(n, std::vector<double>(m));
  std::vector<std::vector<double>> v(n, std::vector<double>(n, 0.0));
  for (std::size_t j = 0; j < n; ++j) {
    for (std::size_t i = 0; i < m; ++i) u[j][i] = a(i, j);
    v[j][j] = 1.0;
  }
  const double tol = std::numeric_limits<double>::epsilon() * static_cast<double>(m);
  // Columns below eps * ||A||_F are rounding noise; rotating them never settles.
  double fro2 = 0.0;
  for (const auto& c : u) fro2 += dot_n(c.data(), c.data(), m);
  const double tiny = fro2 * std::numeric_limits<double>::epsilon() * std::numeric_limits<double>::epsilon();
  bool converged = false;
  for (int sweep = 0; sweep < opt.max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* up = u[p].data();
        double* uq = u[q].data();
        const double alpha = dot_n(up, up, m);
        const double beta = dot_n(uq, uq, m);
        const double gamma = dot_n(up, uq, m);
        if (alpha <= tiny || beta <= tiny) continue;
        if (std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = up[i];
          const double y = uq[i];
          up[i] = c * x - s * y;
          uq[i] = s * x + c * y;
        }
        double* vp = v[p].data();
        double* vq = v[q].data();
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i];
          const double y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
  }
  if (!converged) fail(ErrorCode::ConvergenceFailure, "Jacobi SVD did not converge");

  std::vector<double> sv(n);
  for (std::size_t j = 0; j < n; ++j) sv[j] = norm2(u[j]);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sv[x] > sv[y]; });

  const double smax = n ? sv[order[0]] : 0.0;
  const double rank_tol = smax * std::numeric_limits<double>::epsilon() * static_cast<double>(std::max(m, n));
  std::vector<std::vector<double>> ucols;
  SvdResult r;
  r.s.resize(n);
  r.vt = Matrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    r.s[k] = sv[j];
    for (std::size_t i = 0; i < n; ++i) r.vt(k, i) = v[j][i];
    if (sv[j] > rank_tol && sv[j] > 0.0) {
      std::vector<double> col = u[j];
      for (double& x : col) x /= sv[j];
      ucols.push_back(std::move(col));
    }
  }
  // Zero singular values: any orthonormal completion is a valid left basis.
  complete_orthonormal(ucols, m, n);
  r.u = Matrix(m, n);
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t i = 0; i < m; ++i) r.u(i, k) = ucols[k][i];
  return r;
}

}  // namespace detail

/// Thin SVD via one-sided Jacobi rotations.
inline SvdResult svd(const Matrix& m, const SvdOptions& opt = {}) {
  require(m.rows() >= 1 && m.cols() >= 1, ErrorCode::ShapeMismatch, "svd of empty matrix");
  require(m.all_finite(), ErrorCode::InvalidArgument, "svd input not finite");
  if (m.rows() >= m.cols()) return detail::jacobi_svd_tall(m, opt);
  SvdResult t = detail::jacobi_svd_tall(m.transpose(), opt);
  SvdResult r;
  r.u = t.vt.transpose();
  r.s = std::move(t.s);
  r.vt = t.u.transpose();
  return r;
}

/// Best rank-k approximation from the leading singular triplets.
inline Matrix truncated_reconstruction(const SvdResult& f, std::size_t k) {
  k = std::min(k, f.s.size());
  Matrix out(f.u.rows(), f.vt.cols());
  for (std::size_t r = 0; r < k; ++r) {
    const double s = f.s[r];
    if (s == 0.0) continue;
    for (std::size_t i = 0; i < out.rows(); ++i) {
      const double ui = f.u(i, r) * s;
      for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += ui * f.vt(r, j);
    }
  }
  return out;
}

/// Least squares min |A x - b| by Householder QR (A tall, cols <= rows).
/// Columns whose pivot collapses below `rank_tol * |R|max` get coefficient 0.
inline std::vector<double> least_squares(const Matrix& a, std::span<const double> b, double rank_tol = 1e-13) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  require(b.size() == m, ErrorCode::DimensionMismatch, "least_squares rhs length");
  // Column-major copy.
  std::vector<std::vector<double>> q(n, std::vector<double>(m));
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t i = 0; i < m; ++i) q[j][i] = a(i, j);
  std::vector<double> rhs(b.begin(), b.end());
  std::vector<double> rdiag(n, 0.0);
  const std::size_t steps = std::min(m, n);
  for (std::size_t k = 0; k < steps; ++k) {
    double* col = q[k].data();
    double nrm = 0.0;
    for (std::size_t i = k; i < m; ++i) nrm = std::hypot(nrm, col[i]);
    if (nrm == 0.0) {
      rdiag[k] = 0.0;
      continue;
    }
    if (col[k] < 0) nrm = -nrm;
    for (std::size_t i = k; i < m; ++i) col[i] /= nrm;
    col[k] += 1.0;
    for (std::size_t j = k + 1; j < n; ++j) {
      double* cj = q[j].data();
      double s = 0.0;
      for (std::size_t i = k; i < m; ++i) s += col[i] * cj[i];
      s = -s / col[k];
      for (std::size_t i = k; i < m; ++i) cj[i] += s * col[i];
    }
    double s = 0.0;
    for (std::size_t i = k; i < m; ++i) s += col[i] * rhs[i];
    s = -s / col[k];
    for (std::size_t i = k; i < m; ++i) rhs[i] += s * col[i];
    rdiag[k] = -nrm;
  }
  double rmax = 0.0;
  for (double d : rdiag) rmax = std::max(rmax, std::abs(d));
  std::vector<double> x(n, 0.0);
  for (std::size_t kk = steps; kk-- > 0;) {
    if (std::abs(rdiag[kk]) <= rank_tol * rmax || rdiag[kk] == 0.0) {
      x[kk] = 0.0;
      continue;
    }
    double s = rhs[kk];
    for (std::size_t j = kk + 1; j < steps; ++j) s -= q[j][kk] * x[j];
    x[kk] = s / rdiag[kk];
  }
  return x;
}

struct NnlsOptions {
  int max_iterations = 0;  ///< 0 selects 3 * cols
};

/// Non-negative least squares min |A x - b|, x >= 0 (Lawson-Hanson active set).
inline std::vector<double> nnls(const Matrix& a, std::span<const double> b, const NnlsOptions& opt = {}) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  require(b.size() == m, ErrorCode::DimensionMismatch,
          "nnls: A has " + std::to_string(m) + " rows, b has " + std::to_string(b.size()));
  std::vector<double> x(n, 0.0);
  if (n == 0) return x;

  auto dual = [&](const std::vector<double>& xs) {
    std::vector<double> r(b.begin(), b.end());
    for (std::size_t i = 0; i < m; ++i) {
      double ax = 0.0;
      for (std::size_t j = 0; j < n; ++j) ax += a(i, j) * xs[j];
      r[i] -= ax;
    }
    std::vector<double> w(n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) w[j] += a(i, j) * r[i];
    return w;
  };

  std::vector<double> atb = dual(x);
  double scale = 0.0;
  for (double v : atb) scale = std::max(scale, std::abs(v));
  const double tol = 1e-11 * scale;
  if (scale == 0.0) return x;

  std::vector<bool> passive(n, false);
  std::vector<bool> blocked(n, false);
  std::vector<double> w = atb;
  const int max_outer = opt.max_iterations > 0 ? opt.max_iterations : static_cast<int>(3 * n + 10);

  auto solve_passive = [&](std::vector<double>& z) {
    std::vector<std::size_t> idx;
    for (std::size_t j = 0; j < n; ++j)
      if (passive[j]) idx.push_back(j);
    z.assign(n, 0.0);
    if (idx.empty()) return;
    const Matrix ap = gather_cols(a, idx);
    const std::vector<double> zp = least_squares(ap, b);
    for (std::size_t k = 0; k < idx.size(); ++k) z[idx[k]] = zp[k];
  };

  for (int outer = 0; outer < max_outer; ++outer) {
    std::size_t best = n;
    double wmax = tol;
    for (std::size_t j = 0; j < n; ++j)
      if (!passive[j] && !blocked[j] && w[j] > wmax) {
        wmax = w[j];
        best = j;
      }
    if (best == n) break;
    passive[best] = true;

    std::vector<double> z;
    for (int inner = 0; inner <= static_cast<int>(n) + 1; ++inner) {
      solve_passive(z);
      bool feasible = true;
      for (std::size_t j = 0; j < n; ++j)
        if (passive[j] && z[j] <= 0.0) feasible = false;
      if (feasible) break;
      double alpha = 1.0;
      for (std::size_t j = 0; j < n; ++j)
        if (passive[j] && z[j] <= 0.0) {
          const double denom = x[j] - z[j];
          if (denom > 0.0) alpha = std::min(alpha, x[j] / denom);
        }
      for (std::size_t j = 0; j < n; ++j) x[j] += alpha * (z[j] - x[j]);
      for (std::size_t j = 0; j < n; ++j)
        if (passive[j] && x[j] <= 1e-15 * (1.0 + std::abs(z[j]))) {
          passive[j] = false;
          x[j] = 0.0;
        }
    }
    // A column that re-enters with a non-positive coefficient is numerically
    // dependent on the passive set; block it to prevent cycling.
    if (!passive[best]) blocked[best] = true;
    for (std::size_t j = 0; j < n; ++j) x[j] = passive[j] ? std::max(z[j], 0.0) : 0.0;
    w = dual(x);
    for (std::size_t j = 0; j < n; ++j)
      if (blocked[j] && w[j] <= tol) blocked[j] = false;
  }
  return x;
}

}  // namespace fda
