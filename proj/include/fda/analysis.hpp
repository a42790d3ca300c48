#pragma once

// Measurements on anchors: singular spectra, subspace overlap with reference
// features, and how much of an adaptation step lies in the cone of sampled
// fine-tuning updates.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "fda/construct.hpp"
#include "fda/csv.hpp"
#include "fda/netmodel.hpp"
#include "fda/numkit/linalg.hpp"

namespace fda {

struct SpectralReport {
  std::vector<double> singular_values;
  std::vector<double> normalized;
  double tail_energy_ratio = 0.0;
};

/// Number of leading entries treated as the head: ceil(fraction * r), at least 1.
inline std::size_t head_count(double fraction, std::size_t r) {
  const auto k = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(r) - 1e-12));
  return std::clamp<std::size_t>(k, 1, r);
}

/// Spectrum of a d x n anchor matrix (anchors as columns).
inline SpectralReport spectral_report(const Matrix& x) {
  require(!x.empty() && max_abs(x) > 0.0, ErrorCode::ZeroMatrix, "spectral_report: anchor matrix is zero");
  const SvdResult s = svd(x);
  SpectralReport rep;
  rep.singular_values = s.s;
  const double top = s.s.front();
  double total = 0.0, tail = 0.0;
  const std::size_t cut = head_count(0.2, s.s.size());
  for (std::size_t j = 0; j < s.s.size(); ++j) {
    rep.normalized.push_back(s.s[j] / top);
    total += s.s[j] * s.s[j];
    if (j >= cut) tail += s.s[j] * s.s[j];
  }
  rep.tail_energy_ratio = tail / total;
  return rep;
}

inline SpectralReport spectral_report(const AnchorSet& a) { return spectral_report(a.x); }

namespace detail {

/// Top-k right singular vectors of m (rows are samples), as a k x d matrix.
inline Matrix top_right_singular(const Matrix& m, std::size_t k) {
  const std::size_t d = m.cols();
  Matrix tall = m;
  if (m.rows() < d) {
    // Zero rows leave the right singular vectors unchanged and give svd a full d x d basis.
    tall = Matrix(d, d);
    for (std::size_t i = 0; i < m.rows(); ++i)
      for (std::size_t j = 0; j < d; ++j) tall(i, j) = m(i, j);
  }
  const SvdResult s = svd(tall);
  Matrix v(k, d);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < d; ++j) v(i, j) = s.vt(i, j);
  return v;
}

}  // namespace detail

/// tr(P_a P_b) / k with P the projector onto the top-k right singular vectors
/// of each matrix, k = ceil(fraction * d). Rows are samples, columns the shared
/// d-dimensional space.
inline double subspace_similarity(const Matrix& a, const Matrix& b, double fraction) {
  require(a.cols() == b.cols(), ErrorCode::ShapeMismatch, "subspace_similarity: column dimensions differ");
  require(fraction > 0.0 && fraction <= 1.0, ErrorCode::InvalidArgument, "fraction must be in (0, 1]");
  require(max_abs(a) > 0.0 && max_abs(b) > 0.0, ErrorCode::ZeroMatrix, "subspace_similarity: zero matrix");
  const std::size_t k = head_count(fraction, a.cols());
  const Matrix va = detail::top_right_singular(a, k);
  const Matrix vb = detail::top_right_singular(b, k);
  // tr(Va^T Va Vb^T Vb) = ||Va Vb^T||_F^2
  const Matrix cross = matmul(va, vb, false, true);
  const double f = frobenius_norm(cross);
  return std::clamp(f * f / static_cast<double>(k), 0.0, 1.0);
}

/// Sampled fine-tuning update vectors for one task and block.
struct UpdateConeSample {
  std::vector<std::vector<double>> vectors;

  void validate() const {
    require(!vectors.empty(), ErrorCode::ZeroMatrix, "update cone is empty");
    bool nonzero = false;
    for (const auto& v : vectors) {
      require(v.size() == vectors.front().size(), ErrorCode::ShapeMismatch, "update vectors differ in length");
      nonzero = nonzero || norm2(v) > 0.0;
    }
    require(nonzero, ErrorCode::ZeroMatrix, "all sampled update vectors are zero");
  }
};

/// ||A alpha|| / ||direction|| with alpha >= 0 minimising ||direction - A alpha||,
/// A having the cone vectors as columns.
inline double projection_energy_ratio(std::span<const double> direction, const UpdateConeSample& cone) {
  cone.validate();
  require(direction.size() == cone.vectors.front().size(), ErrorCode::DimensionMismatch,
          "direction length does not match the cone");
  const double nd = norm2(direction);
  require(nd > 0.0, ErrorCode::ZeroDirection, "adaptation direction is zero");
  Matrix a(direction.size(), cone.vectors.size());
  for (std::size_t j = 0; j < cone.vectors.size(); ++j) a.set_col(j, cone.vectors[j]);
  const std::vector<double> alpha = nnls(a, direction);
  const Matrix proj = matmul(a, Matrix::column(alpha));
  return frobenius_norm(proj) / nd;
}

/// Parameters of one block concatenated in storage order.
inline std::vector<double> flatten_block(const Block& b) {
  std::vector<double> out;
  for (const auto& p : b.params) out.insert(out.end(), p.values().begin(), p.values().end());
  return out;
}

/// Flattened theta_after^(l) - theta_before^(l).
inline std::vector<double> fda_adaptation_direction(const Checkpoint& before, const Checkpoint& after, std::size_t l) {
  require_same_architecture(before, after);
  require(l < before.blocks.size(), ErrorCode::InvalidArgument, "block index out of range");
  std::vector<double> a = flatten_block(after.blocks[l]);
  const std::vector<double> b = flatten_block(before.blocks[l]);
  for (std::size_t k = 0; k < a.size(); ++k) a[k] -= b[k];
  return a;
}

struct SpectrumRow {
  std::size_t step;
  SpectralReport report;
};

struct TraceRow {
  std::size_t step;
  std::size_t block;
  std::size_t task;
  double value;
};

inline void write_spectra_csv(const std::string& path, std::span<const SpectrumRow> rows) {
  CsvWriter w(path, {"step", "j", "normalized_sv"});
  for (const auto& r : rows)
    for (std::size_t j = 0; j < r.report.normalized.size(); ++j) w.row({r.step, j + 1, r.report.normalized[j]});
}

inline void write_trace_csv(const std::string& path, std::string_view value_name, std::span<const TraceRow> rows) {
  CsvWriter w(path, {"step", "block", "task", value_name});
  for (const auto& r : rows) w.row({r.step, r.block, r.task, r.value});
}

}  // namespace fda
