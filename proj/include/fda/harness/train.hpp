#pragma once

// Cross-entropy training of an encoder (a block stack) with an affine
// classification head, using hand-written backpropagation and Adam.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "fda/analysis.hpp"
#include "fda/netmodel.hpp"
#include "fda/numkit/random.hpp"
#include "fda/optim.hpp"

namespace fda {

struct TrainConfig {
  std::size_t epochs = 20;
  double lr = 1e-3;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;
  bool update_encoder = true;
  bool update_head = true;
  AdamHyper adam;

  void validate() const {
    require(lr >= 0.0, ErrorCode::ConfigInvalid, "train lr must be non-negative");
    require(batch_size > 0, ErrorCode::ConfigInvalid, "train batch size must be positive");
    require(update_encoder || update_head, ErrorCode::ConfigInvalid, "nothing to train");
  }
};

struct TrainResult {
  Checkpoint encoder;
  Block head;
  std::vector<double> loss_curve;  // mean cross-entropy per epoch, measured during the epoch
};

struct EvalResult {
  double accuracy = 0.0;
  double loss = 0.0;
};

/// Random encoder: Affine(in -> hidden) with tanh, then Ffn(hidden -> ffn -> hidden).
inline Checkpoint init_encoder(std::size_t in_dim, std::size_t hidden, std::size_t ffn_hidden, RngStream& rng) {
  auto w = [&](std::size_t r, std::size_t c) {
    Matrix m = gaussian_matrix(rng, r, c);
    m *= 1.0 / std::sqrt(static_cast<double>(c));
    return m;
  };
  Checkpoint c;
  c.blocks.push_back(Block::affine(w(hidden, in_dim), Matrix(hidden, 1), Activation::Tanh));
  c.blocks.push_back(Block::ffn(w(ffn_hidden, hidden), Matrix(ffn_hidden, 1), Activation::SmoothGelu,
                                w(hidden, ffn_hidden), Matrix(hidden, 1)));
  return c;
}

inline Block init_head(std::size_t in_dim, std::size_t classes, RngStream& rng) {
  Matrix w = gaussian_matrix(rng, classes, in_dim);
  w *= 1.0 / std::sqrt(static_cast<double>(in_dim));
  return Block::affine(std::move(w), Matrix(classes, 1));
}

namespace detail {

inline Matrix add_bias(Matrix y, const Matrix& b) {
  for (std::size_t i = 0; i < y.rows(); ++i)
    for (std::size_t j = 0; j < y.cols(); ++j) y(i, j) += b(i, 0);
  return y;
}

inline Matrix row_sums(const Matrix& m) {
  Matrix s(m.rows(), 1);
  for (std::size_t i = 0; i < m.rows(); ++i)
    for (std::size_t j = 0; j < m.cols(); ++j) s(i, 0) += m(i, j);
  return s;
}

inline Matrix apply_elementwise(const Matrix& m, Activation act) {
  Matrix out = m;
  for (double& v : out.values()) v = apply_activation(act, v);
  return out;
}

/// Pre-activations a block saw, enough to run it backwards.
struct BlockCache {
  Matrix input;
  Matrix pre;  // Affine: Wx+b; Ffn: W1x+b1
};

inline Matrix block_forward_cached(const Block& b, const Matrix& x, BlockCache& cache) {
  cache.input = x;
  cache.pre = add_bias(matmul(b.params[0], x), b.params[1]);
  if (b.kind == BlockKind::Affine) return apply_elementwise(cache.pre, b.activation);
  return add_bias(matmul(b.params[2], apply_elementwise(cache.pre, b.activation)), b.params[3]);
}

/// Given d(loss)/d(block transfer output), fill parameter gradients and return
/// d(loss)/d(input).
inline Matrix block_backward(const Block& b, const BlockCache& cache, const Matrix& d_out, std::vector<Matrix>& grads) {
  grads.assign(b.params.size(), Matrix());
  auto act_grad = [&](const Matrix& upstream) {
    Matrix d = upstream;
    for (std::size_t k = 0; k < d.size(); ++k) d[k] *= activation_derivative(b.activation, cache.pre[k]);
    return d;
  };
  if (b.kind == BlockKind::Affine) {
    const Matrix dz = act_grad(d_out);
    grads[0] = matmul(dz, cache.input, false, true);
    grads[1] = row_sums(dz);
    return matmul(b.params[0], dz, true, false);
  }
  const Matrix h = apply_elementwise(cache.pre, b.activation);
  grads[2] = matmul(d_out, h, false, true);
  grads[3] = row_sums(d_out);
  const Matrix da = act_grad(matmul(b.params[2], d_out, true, false));
  grads[0] = matmul(da, cache.input, false, true);
  grads[1] = row_sums(da);
  return matmul(b.params[0], da, true, false);
}

/// Column-wise softmax cross-entropy. Returns the summed loss and writes
/// d(sum loss)/d(logits) and the number of correct argmax predictions.
inline double softmax_xent(const Matrix& logits, std::span<const std::uint32_t> labels, Matrix* d_logits,
                           std::size_t* correct) {
  double total = 0.0;
  if (d_logits) *d_logits = Matrix(logits.rows(), logits.cols());
  for (std::size_t j = 0; j < logits.cols(); ++j) {
    double mx = logits(0, j);
    std::size_t arg = 0;
    for (std::size_t i = 1; i < logits.rows(); ++i)
      if (logits(i, j) > mx) {
        mx = logits(i, j);
        arg = i;
      }
    double z = 0.0;
    for (std::size_t i = 0; i < logits.rows(); ++i) z += std::exp(logits(i, j) - mx);
    total += std::log(z) + mx - logits(labels[j], j);
    if (correct && arg == labels[j]) ++*correct;
    if (d_logits)
      for (std::size_t i = 0; i < logits.rows(); ++i)
        (*d_logits)(i, j) = std::exp(logits(i, j) - mx) / z - (i == labels[j] ? 1.0 : 0.0);
  }
  return total;
}

}  // namespace detail

/// Mean cross-entropy and its gradients for one batch (x: in_dim x n).
struct BatchGradients {
  double loss = 0.0;
  std::vector<std::vector<Matrix>> encoder;  // per block
  std::vector<Matrix> head;
};

inline BatchGradients batch_gradients(const Checkpoint& enc, const Block& head, const Matrix& x,
                                      std::span<const std::uint32_t> labels) {
  require(labels.size() == x.cols(), ErrorCode::ShapeMismatch, "labels and inputs disagree");
  std::vector<detail::BlockCache> caches(enc.blocks.size());
  Matrix a = x;
  for (std::size_t l = 0; l < enc.blocks.size(); ++l) a = detail::block_forward_cached(enc.blocks[l], a, caches[l]);
  detail::BlockCache head_cache;
  const Matrix logits = detail::block_forward_cached(head, a, head_cache);
  Matrix d_logits;
  BatchGradients g;
  const double n = static_cast<double>(x.cols());
  g.loss = detail::softmax_xent(logits, labels, &d_logits, nullptr) / n;
  d_logits *= 1.0 / n;
  Matrix d = detail::block_backward(head, head_cache, d_logits, g.head);
  g.encoder.resize(enc.blocks.size());
  for (std::size_t l = enc.blocks.size(); l-- > 0;) d = detail::block_backward(enc.blocks[l], caches[l], d, g.encoder[l]);
  return g;
}

inline EvalResult evaluate(const Checkpoint& enc, const Block& head, const Matrix& x,
                           std::span<const std::uint32_t> labels) {
  require(labels.size() == x.cols() && !labels.empty(), ErrorCode::ShapeMismatch, "evaluation set is empty or ragged");
  const Matrix logits = forward_block(head, enc.forward(x));
  std::size_t correct = 0;
  const double loss = detail::softmax_xent(logits, labels, nullptr, &correct);
  const double n = static_cast<double>(labels.size());
  return {static_cast<double>(correct) / n, loss / n};
}

/// Observes every Adam update: (batch index, encoder before, encoder after).
using TrainObserver = std::function<void(std::size_t, const Checkpoint&, const Checkpoint&)>;

/// Mini-batch Adam on mean cross-entropy. Batches follow a per-epoch shuffle
/// drawn from `cfg.seed`.
inline TrainResult train(const Checkpoint& encoder, const Block& head, const Matrix& x,
                         std::span<const std::uint32_t> labels, const TrainConfig& cfg,
                         const TrainObserver& observe = {}) {
  cfg.validate();
  require(labels.size() == x.cols() && !labels.empty(), ErrorCode::ConfigInvalid, "training set is empty or ragged");
  require(x.rows() == encoder.blocks.front().in_dim(), ErrorCode::ShapeMismatch, "inputs do not match the encoder");
  for (auto l : labels) require(l < head.out_dim(), ErrorCode::ConfigInvalid, "label exceeds head classes");

  TrainResult res{encoder, head, {}};
  std::vector<AdamState> enc_state;
  for (const auto& b : res.encoder.blocks) enc_state.push_back(AdamState::like(b.params, cfg.adam));
  AdamState head_state = AdamState::like(res.head.params, cfg.adam);

  RngStream rng(derive_seed(cfg.seed, {0x7EA1}));
  std::vector<std::size_t> order(x.cols());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  const std::size_t batch = std::min(cfg.batch_size, order.size());
  std::size_t batch_index = 0;
  std::vector<std::uint32_t> y;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += batch) {
      const std::size_t width = std::min(batch, order.size() - begin);
      const std::span<const std::size_t> idx(order.data() + begin, width);
      y.clear();
      for (auto k : idx) y.push_back(labels[k]);
      const BatchGradients g = batch_gradients(res.encoder, res.head, gather_cols(x, idx), y);
      require(std::isfinite(g.loss), ErrorCode::ConvergenceFailure, "training loss is not finite");
      epoch_loss += g.loss;
      ++batches;
      const Checkpoint before = observe ? res.encoder : Checkpoint{};
      if (cfg.update_encoder)
        for (std::size_t l = 0; l < res.encoder.blocks.size(); ++l)
          adam_step(enc_state[l], res.encoder.blocks[l].params, g.encoder[l], cfg.lr);
      if (cfg.update_head) adam_step(head_state, res.head.params, g.head, cfg.lr);
      if (observe) observe(batch_index, before, res.encoder);
      ++batch_index;
    }
    res.loss_curve.push_back(epoch_loss / static_cast<double>(batches));
  }
  return res;
}

/// Per-block parameter deltas of `count` consecutive fine-tuning batches
/// (Adam, head frozen), starting from `encoder`. Entry l is block l's cone.
inline std::vector<UpdateConeSample> sample_update_vectors(const Checkpoint& encoder, const Block& head,
                                                           const Matrix& x, std::span<const std::uint32_t> labels,
                                                           std::size_t count, TrainConfig cfg) {
  require(count >= 1, ErrorCode::ConfigInvalid, "need at least one update vector");
  cfg.update_encoder = true;
  cfg.update_head = false;
  const std::size_t batch = std::min(cfg.batch_size, x.cols());
  const std::size_t per_epoch = (x.cols() + batch - 1) / batch;
  cfg.epochs = (count + per_epoch - 1) / per_epoch;
  std::vector<UpdateConeSample> cones(encoder.blocks.size());
  train(encoder, head, x, labels, cfg, [&](std::size_t k, const Checkpoint& before, const Checkpoint& after) {
    if (k >= count) return;
    for (std::size_t l = 0; l < cones.size(); ++l)
      cones[l].vectors.push_back(fda_adaptation_direction(before, after, l));
  });
  for (auto& c : cones) c.validate();
  return cones;
}

}  // namespace fda
