#pragma once

// Block forward passes and distances as differentiable expressions.

#include <span>
#include <string>
#include <vector>

#include "fda/difftape.hpp"
#include "fda/netmodel/block.hpp"

namespace fda::graph {

using tape::Expr;

/// Smoothing width of the L1 distance, |d| ~ d tanh(d / eps).
inline constexpr double kL1Smoothing = 1e-6;

inline std::vector<Expr> param_variables(const Block& blk, const std::string& prefix) {
  std::vector<Expr> out;
  for (std::size_t p = 0; p < blk.params.size(); ++p)
    out.push_back(tape::variable(prefix + std::to_string(p), blk.params[p].rows(), blk.params[p].cols()));
  return out;
}

inline std::vector<Expr> param_constants(const Block& blk) {
  std::vector<Expr> out;
  for (const auto& p : blk.params) out.push_back(tape::constant(p));
  return out;
}

/// Bind the variables made by param_variables(blk, prefix) to blk's values.
inline void bind_params(tape::Binding& b, const Block& blk, const std::string& prefix) {
  for (std::size_t p = 0; p < blk.params.size(); ++p) b.set(prefix + std::to_string(p), blk.params[p]);
}

/// Block output for the columns of x. Biases broadcast through b * 1^T.
inline Expr block_output(BlockKind kind, Activation act, std::span<const Expr> params, const Expr& x) {
  const Expr row = tape::ones(1, x.cols());
  if (kind == BlockKind::Affine) return tape::matmul(params[0], x) + tape::matmul(params[1], row);
  const Expr pre = tape::matmul(params[0], x) + tape::matmul(params[1], row);
  return tape::matmul(params[2], tape::activation(pre, act)) + tape::matmul(params[3], row);
}

/// Sum over columns of Dist(y0_j, yi_j).
inline Expr dist_sum(DistKind kind, const Expr& y0, const Expr& yi) {
  switch (kind) {
    case DistKind::L2: {
      const Expr d = y0 - yi;
      return tape::scale(tape::inner(d, d), 0.5);
    }
    case DistKind::L1: {
      const Expr d = y0 - yi;
      return tape::sum(tape::hadamard(d, tape::tanh(tape::scale(d, 1.0 / kL1Smoothing))));
    }
    case DistKind::Cosine: {
      const Expr dots = tape::matmul(tape::ones(1, y0.rows()), tape::hadamard(y0, yi));
      const Expr cosines = tape::safe_divide(dots, tape::hadamard(tape::vector_norm(y0), tape::vector_norm(yi)));
      return tape::scalar(static_cast<double>(y0.cols())) - tape::sum(cosines);
    }
  }
  fail(ErrorCode::InvalidArgument, "unknown distance");
}

/// Euclidean norm of the concatenation of several matrices.
inline Expr concat_norm(std::span<const Expr> parts) {
  if (parts.size() == 1) return tape::frobenius_norm(parts[0]);
  Expr stacked;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    Matrix e(1, parts.size());
    e(0, p) = 1.0;
    const Expr term = tape::matmul(tape::frobenius_norm(parts[p]), tape::constant(std::move(e)));
    stacked = stacked ? stacked + term : term;
  }
  return tape::frobenius_norm(stacked);
}

/// Inner product of two concatenations.
inline Expr concat_inner(std::span<const Expr> a, std::span<const Expr> b) {
  require(a.size() == b.size() && !a.empty(), ErrorCode::ShapeMismatch, "concat_inner part count");
  Expr s = tape::inner(a[0], b[0]);
  for (std::size_t p = 1; p < a.size(); ++p) s = s + tape::inner(a[p], b[p]);
  return s;
}

}  // namespace fda::graph
