#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fda/activation.hpp"
#include "fda/error.hpp"
#include "fda/numkit/matrix.hpp"

namespace fda {

enum class BlockKind : std::uint8_t { Affine = 0, Ffn = 1 };
enum class DistKind : std::uint8_t { Cosine, L1, L2 };

inline std::string_view to_string(DistKind k) {
  switch (k) {
    case DistKind::Cosine: return "cosine";
    case DistKind::L1: return "l1";
    case DistKind::L2: return "l2";
  }
  return "?";
}

inline DistKind parse_dist(std::string_view s) {
  if (s == "cosine") return DistKind::Cosine;
  if (s == "l1") return DistKind::L1;
  if (s == "l2") return DistKind::L2;
  fail(ErrorCode::ConfigInvalid, "unknown distance '" + std::string(s) + "'");
}

/// One layer-wise unit of the network.
///
/// Affine: params = {W (q x d), b (q x 1)}, output Wx + b. Its activation tag
/// is applied by the network *after* the block, so the block's own output
/// (what anchors are matched on) stays affine.
/// Ffn: params = {W1 (h x d), b1 (h x 1), W2 (q x h), b2 (q x 1)},
/// output W2 act(W1 x + b1) + b2.
struct Block {
  BlockKind kind = BlockKind::Affine;
  Activation activation = Activation::None;
  std::vector<Matrix> params;

  static Block affine(Matrix w, Matrix b, Activation post = Activation::None) {
    Block blk{BlockKind::Affine, post, {std::move(w), std::move(b)}};
    blk.validate();
    return blk;
  }
  static Block ffn(Matrix w1, Matrix b1, Activation act, Matrix w2, Matrix b2) {
    Block blk{BlockKind::Ffn, act, {std::move(w1), std::move(b1), std::move(w2), std::move(b2)}};
    blk.validate();
    return blk;
  }

  std::size_t in_dim() const { return params[0].cols(); }
  std::size_t hidden_dim() const { return kind == BlockKind::Ffn ? params[0].rows() : 0; }
  std::size_t out_dim() const { return kind == BlockKind::Ffn ? params[2].rows() : params[0].rows(); }

  /// W for Affine, W1 for Ffn: the weight that sees the block input.
  const Matrix& input_weight() const { return params[0]; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params) n += p.size();
    return n;
  }

  void validate() const {
    auto bad = [](const std::string& m) { fail(ErrorCode::ShapeMismatch, "block: " + m); };
    if (kind == BlockKind::Affine) {
      if (params.size() != 2) bad("affine needs W and b");
      if (params[0].empty()) bad("empty W");
      if (params[1].rows() != params[0].rows() || params[1].cols() != 1) bad("b must be q x 1");
    } else {
      if (params.size() != 4) bad("ffn needs W1, b1, W2, b2");
      if (params[0].empty() || params[2].empty()) bad("empty weight");
      if (params[1].rows() != params[0].rows() || params[1].cols() != 1) bad("b1 must be h x 1");
      if (params[2].cols() != params[0].rows()) bad("W2 cols must equal hidden dim");
      if (params[3].rows() != params[2].rows() || params[3].cols() != 1) bad("b2 must be q x 1");
      if (activation == Activation::None) bad("ffn needs tanh or smooth-gelu");
    }
  }

  bool same_architecture(const Block& o) const {
    if (kind != o.kind || activation != o.activation || params.size() != o.params.size()) return false;
    for (std::size_t i = 0; i < params.size(); ++i)
      if (!params[i].same_shape(o.params[i])) return false;
    return true;
  }

  friend bool operator==(const Block& a, const Block& b) {
    return a.kind == b.kind && a.activation == b.activation && a.params == b.params;
  }
};

namespace detail {
inline void add_bias_cols(Matrix& y, const Matrix& b) {
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b(i, 0);
}
}  // namespace detail

/// Block output for every column of X (d x n -> q x n). No post-activation.
inline Matrix forward_block(const Block& blk, const Matrix& x) {
  require(x.rows() == blk.in_dim(), ErrorCode::ShapeMismatch,
          "block input " + x.shape_str() + " for in_dim " + std::to_string(blk.in_dim()));
  if (blk.kind == BlockKind::Affine) {
    Matrix y = matmul(blk.params[0], x);
    detail::add_bias_cols(y, blk.params[1]);
    return y;
  }
  Matrix h = matmul(blk.params[0], x);
  detail::add_bias_cols(h, blk.params[1]);
  for (double& v : h.values()) v = apply_activation(blk.activation, v);
  Matrix y = matmul(blk.params[2], h);
  detail::add_bias_cols(y, blk.params[3]);
  return y;
}

inline std::vector<double> forward_block(const Block& blk, std::span<const double> x) {
  const Matrix y = forward_block(blk, Matrix::column(x));
  return std::vector<double>(y.storage());
}

/// What flows from `blk` to the next block: the block output, followed by the
/// post-activation for Affine blocks.
inline Matrix block_transfer(const Block& blk, const Matrix& x) {
  Matrix y = forward_block(blk, x);
  if (blk.kind == BlockKind::Affine && blk.activation != Activation::None)
    for (double& v : y.values()) v = apply_activation(blk.activation, v);
  return y;
}

/// Inputs seen by each block when X is fed to the first (size = blocks + 1;
/// the last entry is the network output).
inline std::vector<Matrix> block_inputs(std::span<const Block> blocks, const Matrix& x) {
  std::vector<Matrix> acts{x};
  for (const Block& b : blocks) acts.push_back(block_transfer(b, acts.back()));
  return acts;
}

inline Matrix forward_network(std::span<const Block> blocks, const Matrix& x) {
  Matrix a = x;
  for (const Block& b : blocks) a = block_transfer(b, a);
  return a;
}

/// Distance between two output vectors. L2 carries the 1/2 factor.
inline double block_dist(DistKind kind, std::span<const double> y0, std::span<const double> y1) {
  require(y0.size() == y1.size(), ErrorCode::ShapeMismatch, "block_dist length");
  switch (kind) {
    case DistKind::Cosine: return cos_dist(y0, y1);
    case DistKind::L1: {
      double s = 0.0;
      for (std::size_t k = 0; k < y0.size(); ++k) s += std::abs(y0[k] - y1[k]);
      return s;
    }
    case DistKind::L2: {
      double s = 0.0;
      for (std::size_t k = 0; k < y0.size(); ++k) s += (y0[k] - y1[k]) * (y0[k] - y1[k]);
      return 0.5 * s;
    }
  }
  return 0.0;
}

/// Sum of per-column distances between two q x n output matrices.
inline double block_dist_sum(DistKind kind, const Matrix& y0, const Matrix& y1) {
  require(y0.same_shape(y1), ErrorCode::ShapeMismatch, "block_dist_sum " + y0.shape_str() + " vs " + y1.shape_str());
  double s = 0.0;
  for (std::size_t j = 0; j < y0.cols(); ++j) s += block_dist(kind, y0.col(j), y1.col(j));
  return s;
}

struct CheckpointMeta {
  std::string name;
  std::uint64_t seed = 0;
  std::string config_digest;
  friend bool operator==(const CheckpointMeta&, const CheckpointMeta&) = default;
};

struct Checkpoint {
  std::vector<Block> blocks;
  CheckpointMeta meta;

  void validate() const {
    require(!blocks.empty(), ErrorCode::ShapeMismatch, "checkpoint has no blocks");
    for (std::size_t l = 0; l < blocks.size(); ++l) {
      blocks[l].validate();
      if (l > 0)
        require(blocks[l].in_dim() == blocks[l - 1].out_dim(), ErrorCode::ShapeMismatch,
                "block " + std::to_string(l) + " input dim does not match previous output");
    }
  }

  bool same_architecture(const Checkpoint& o) const {
    if (blocks.size() != o.blocks.size()) return false;
    for (std::size_t l = 0; l < blocks.size(); ++l)
      if (!blocks[l].same_architecture(o.blocks[l])) return false;
    return true;
  }

  Matrix forward(const Matrix& x) const { return forward_network(blocks, x); }
};

/// Per-block parameter deltas, stored in the same layout as a checkpoint.
struct TaskVector {
  std::vector<Block> blocks;

  bool is_zero() const {
    for (const auto& b : blocks)
      for (const auto& p : b.params)
        for (double v : p.values())
          if (v != 0.0) return false;
    return true;
  }

  bool block_is_zero(std::size_t l) const {
    for (const auto& p : blocks.at(l).params)
      if (max_abs(p) != 0.0) return false;
    return true;
  }
};

inline void require_same_architecture(const Checkpoint& a, const Checkpoint& b) {
  require(a.same_architecture(b), ErrorCode::ArchitectureMismatch, "checkpoint architectures differ");
}

inline TaskVector task_vector(const Checkpoint& theta_i, const Checkpoint& theta_0) {
  require_same_architecture(theta_i, theta_0);
  TaskVector tv{theta_i.blocks};
  for (std::size_t l = 0; l < tv.blocks.size(); ++l)
    for (std::size_t p = 0; p < tv.blocks[l].params.size(); ++p) tv.blocks[l].params[p] -= theta_0.blocks[l].params[p];
  return tv;
}

/// theta_0 + scale * tau, elementwise.
inline Checkpoint apply_task_vector(const Checkpoint& theta_0, const TaskVector& tau, double scale = 1.0) {
  Checkpoint out = theta_0;
  require(tau.blocks.size() == out.blocks.size(), ErrorCode::ArchitectureMismatch, "task vector block count");
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    require(out.blocks[l].same_architecture(tau.blocks[l]), ErrorCode::ArchitectureMismatch,
            "task vector block " + std::to_string(l));
    for (std::size_t p = 0; p < out.blocks[l].params.size(); ++p) {
      auto dst = out.blocks[l].params[p].values();
      const auto src = tau.blocks[l].params[p].values();
      for (std::size_t k = 0; k < dst.size(); ++k) dst[k] += scale == 1.0 ? src[k] : scale * src[k];
    }
  }
  return out;
}

}  // namespace fda
