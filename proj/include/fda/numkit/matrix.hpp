#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fda/error.hpp"

namespace fda {

/// Dense row-major binary64 matrix. Column vectors are n x 1 matrices.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
      : rows_(rows), cols_(cols), data_(std::move(data)) {
    require(data_.size() == rows_ * cols_, ErrorCode::ShapeMismatch,
            "data length " + std::to_string(data_.size()) + " != rows*cols");
  }

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r ? rows.begin()->size() : 0;
    Matrix m(r, c);
    std::size_t i = 0;
    for (const auto& row : rows) {
      require(row.size() == c, ErrorCode::ShapeMismatch, "ragged initializer");
      std::copy(row.begin(), row.end(), m.data_.begin() + static_cast<std::ptrdiff_t>(i * c));
      ++i;
    }
    return m;
  }

  static Matrix column(std::span<const double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v.begin(), v.end()));
  }
  static Matrix column(std::initializer_list<double> v) {
    return Matrix(v.size(), 1, std::vector<double>(v));
  }
  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }
  static Matrix diag(std::span<const double> d) {
    Matrix m(d.size(), d.size());
    for (std::size_t i = 0; i < d.size(); ++i) m(i, i) = d[i];
    return m;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  bool same_shape(const Matrix& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  double& operator[](std::size_t k) { return data_[k]; }
  double operator[](std::size_t k) const { return data_[k]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  std::span<const double> row(std::size_t i) const {
    return std::span<const double>(data_).subspan(i * cols_, cols_);
  }
  std::vector<double> col(std::size_t j) const {
    std::vector<double> out(rows_);
    for (std::size_t i = 0; i < rows_; ++i) out[i] = (*this)(i, j);
    return out;
  }
  void set_col(std::size_t j, std::span<const double> v) {
    require(v.size() == rows_, ErrorCode::ShapeMismatch, "set_col length");
    for (std::size_t i = 0; i < rows_; ++i) (*this)(i, j) = v[i];
  }

  Matrix transpose() const {
    Matrix t(cols_, rows_);
    for (std::size_t i = 0; i < rows_; ++i)
      for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
    return t;
  }

  Matrix& operator+=(const Matrix& o) {
    check_same(o, "+=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] += o.data_[k];
    return *this;
  }
  Matrix& operator-=(const Matrix& o) {
    check_same(o, "-=");
    for (std::size_t k = 0; k < data_.size(); ++k) data_[k] -= o.data_[k];
    return *this;
  }
  Matrix& operator*=(double s) {
    for (double& v : data_) v *= s;
    return *this;
  }

  friend Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
  friend Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
  friend Matrix operator*(Matrix a, double s) { return a *= s; }
  friend Matrix operator*(double s, Matrix a) { return a *= s; }
  friend Matrix operator-(Matrix a) { return a *= -1.0; }

  /// Elementwise (bitwise for finite values) equality.
  friend bool operator==(const Matrix& a, const Matrix& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  std::string shape_str() const { return std::to_string(rows_) + "x" + std::to_string(cols_); }

 private:
  void check_same(const Matrix& o, const char* op) const {
    require(same_shape(o), ErrorCode::ShapeMismatch,
            std::string(op) + ": " + shape_str() + " vs " + o.shape_str());
  }

  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

inline std::ostream& operator<<(std::ostream& os, const Matrix& m) {
  os << "[";
  for (std::size_t i = 0; i < m.rows(); ++i) {
    os << (i ? "; " : "");
    for (std::size_t j = 0; j < m.cols(); ++j) os << (j ? ", " : "") << m(i, j);
  }
  return os << "]";
}

/// C = op(A) * op(B) written into `out` (resized as needed).
namespace detail {

// c += a0 b0 + a1 b1 + a2 b2 + a3 b3 over n entries, b rows `stride` apart.
inline void axpy4(double* __restrict c, std::size_t n, double a0, double a1, double a2, double a3,
                  const double* __restrict b, std::size_t stride) {
  const double* b1 = b + stride;
  const double* b2 = b1 + stride;
  const double* b3 = b2 + stride;
  for (std::size_t j = 0; j < n; ++j) c[j] += a0 * b[j] + a1 * b1[j] + a2 * b2[j] + a3 * b3[j];
}

inline void axpy1(double* __restrict c, std::size_t n, double a, const double* __restrict b) {
  for (std::size_t j = 0; j < n; ++j) c[j] += a * b[j];
}

}  // namespace detail

inline void matmul_into(const Matrix& a, const Matrix& b, bool ta, bool tb, Matrix& out) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t ka = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  require(ka == kb, ErrorCode::ShapeMismatch,
          "matmul inner dims " + a.shape_str() + (ta ? "^T" : "") + " * " + b.shape_str() +
              (tb ? "^T" : ""));
  if (out.rows() != m || out.cols() != n) out = Matrix(m, n);
  auto c = out.values();
  const auto av = a.values();
  const auto bv = b.values();
  const std::size_t ac = a.cols();
  const std::size_t bc = b.cols();
  if (!ta && !tb) {
    std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c.data() + i * n;
      const double* ai = av.data() + i * ac;
      std::size_t k = 0;
      for (; k + 4 <= ka; k += 4)
        detail::axpy4(ci, n, ai[k], ai[k + 1], ai[k + 2], ai[k + 3], bv.data() + k * bc, bc);
      for (; k < ka; ++k) detail::axpy1(ci, n, ai[k], bv.data() + k * bc);
    }
  } else if (!ta && tb) {
    for (std::size_t i = 0; i < m; ++i) {
      const double* ai = av.data() + i * ac;
      for (std::size_t j = 0; j < n; ++j) {
        const double* bj = bv.data() + j * bc;
        double s = 0.0;
        for (std::size_t k = 0; k < ka; ++k) s += ai[k] * bj[k];
        c[i * n + j] = s;
      }
    }
  } else if (ta && !tb) {
    std::fill(c.begin(), c.end(), 0.0);
    for (std::size_t i = 0; i < m; ++i) {
      double* ci = c.data() + i * n;
      std::size_t k = 0;
      for (; k + 4 <= ka; k += 4)
        detail::axpy4(ci, n, av[k * ac + i], av[(k + 1) * ac + i], av[(k + 2) * ac + i], av[(k + 3) * ac + i],
                      bv.data() + k * bc, bc);
      for (; k < ka; ++k) detail::axpy1(ci, n, av[k * ac + i], bv.data() + k * bc);
    }
  } else {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t k = 0; k < ka; ++k) s += av[k * ac + i] * bv[j * bc + k];
        c[i * n + j] = s;
      }
  }
}

inline Matrix matmul(const Matrix& a, const Matrix& b, bool ta = false, bool tb = false) {
  Matrix out;
  matmul_into(a, b, ta, tb, out);
  return out;
}

inline Matrix hadamard(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "hadamard " + a.shape_str() + " vs " + b.shape_str());
  Matrix out(a.rows(), a.cols());
  for (std::size_t k = 0; k < a.size(); ++k) out[k] = a[k] * b[k];
  return out;
}

inline double inner(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "inner length");
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
  return s;
}

inline double inner(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "inner " + a.shape_str() + " vs " + b.shape_str());
  return inner(a.values(), b.values());
}

inline double norm2(std::span<const double> v) {
  // Scaled accumulation keeps tiny/huge inputs from under/overflowing.
  double scale = 0.0;
  for (double x : v) scale = std::max(scale, std::abs(x));
  if (scale == 0.0 || !std::isfinite(scale)) return scale;
  double s = 0.0;
  for (double x : v) {
    const double y = x / scale;
    s += y * y;
  }
  return scale * std::sqrt(s);
}

inline double frobenius_norm(const Matrix& m) { return norm2(m.values()); }

inline double max_abs(const Matrix& m) {
  double r = 0.0;
  for (double v : m.values()) r = std::max(r, std::abs(v));
  return r;
}

inline double sum(const Matrix& m) {
  double s = 0.0;
  for (double v : m.values()) s += v;
  return s;
}

/// Stack the columns of several matrices side by side (same row count).
inline Matrix hconcat(std::span<const Matrix> parts) {
  require(!parts.empty(), ErrorCode::ShapeMismatch, "hconcat of nothing");
  const std::size_t r = parts.front().rows();
  std::size_t c = 0;
  for (const auto& p : parts) {
    require(p.rows() == r, ErrorCode::ShapeMismatch, "hconcat row mismatch");
    c += p.cols();
  }
  Matrix out(r, c);
  std::size_t off = 0;
  for (const auto& p : parts) {
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) out(i, off + j) = p(i, j);
    off += p.cols();
  }
  return out;
}

/// Columns `idx` of m, in the given order.
inline Matrix gather_cols(const Matrix& m, std::span<const std::size_t> idx) {
  Matrix out(m.rows(), idx.size());
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < idx.size(); ++j) out(i, j) = m(i, idx[j]);
  return out;
}

/// Cosine distance between vectorized inputs: 1 - <vec a, vec b> / (|a|_F |b|_F).
inline double cos_dist(std::span<const double> a, std::span<const double> b) {
  require(a.size() == b.size(), ErrorCode::ShapeMismatch, "cos_dist length");
  const double na = norm2(a);
  const double nb = norm2(b);
  require(na >= 1e-300 && nb >= 1e-300, ErrorCode::ZeroNorm, "cos_dist input has zero norm");
  // Normalise first so the inner product cannot overflow.
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) s += (a[k] / na) * (b[k] / nb);
  return 1.0 - std::clamp(s, -1.0, 1.0);
}

inline double cos_dist(const Matrix& a, const Matrix& b) {
  require(a.same_shape(b), ErrorCode::ShapeMismatch, "cos_dist " + a.shape_str() + " vs " + b.shape_str());
  return cos_dist(a.values(), b.values());
}

}  // namespace fda
