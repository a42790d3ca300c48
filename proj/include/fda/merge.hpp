#pragma once

// Parameter-space merging baselines and anchor-driven adaptation.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "fda/construct.hpp"
#include "fda/netmodel.hpp"
#include "fda/numkit/linalg.hpp"
#include "fda/numkit/random.hpp"
#include "fda/optim.hpp"

namespace fda {

struct MergeRecipe {
  enum class Kind { TA, TsvLike, Average };
  Kind kind = Kind::TA;
  double value = 0.3;  // lambda for TA, rank fraction for TsvLike

  static MergeRecipe ta(double lambda) {
    require(lambda > 0.0 && lambda <= 1.0, ErrorCode::ConfigInvalid, "TA lambda must be in (0, 1]");
    return {Kind::TA, lambda};
  }
  static MergeRecipe tsv(double fraction) {
    require(fraction > 0.0 && fraction <= 1.0, ErrorCode::ConfigInvalid, "rank fraction must be in (0, 1]");
    return {Kind::TsvLike, fraction};
  }
  static MergeRecipe average() { return {Kind::Average, 0.0}; }
};

namespace detail {

inline void require_taus_match(const Checkpoint& theta0, std::span<const TaskVector> taus) {
  for (const auto& t : taus) {
    require(t.blocks.size() == theta0.blocks.size(), ErrorCode::ArchitectureMismatch, "task vector block count");
    for (std::size_t l = 0; l < t.blocks.size(); ++l)
      require(t.blocks[l].same_architecture(theta0.blocks[l]), ErrorCode::ArchitectureMismatch,
              "task vector block " + std::to_string(l) + " does not match theta_0");
  }
}

/// Indices of weight matrices (as opposed to bias columns) in a block.
inline std::vector<std::size_t> weight_indices(const Block& b) {
  return b.kind == BlockKind::Affine ? std::vector<std::size_t>{0} : std::vector<std::size_t>{0, 2};
}

}  // namespace detail

/// theta_0 + lambda * sum_i tau_i.
inline Checkpoint merge_ta(const Checkpoint& theta0, std::span<const TaskVector> taus, double lambda) {
  detail::require_taus_match(theta0, taus);
  Checkpoint out = theta0;
  for (std::size_t l = 0; l < out.blocks.size(); ++l)
    for (std::size_t p = 0; p < out.blocks[l].params.size(); ++p) {
      Matrix sum(out.blocks[l].params[p].rows(), out.blocks[l].params[p].cols());
      for (const auto& t : taus) sum += t.blocks[l].params[p];
      out.blocks[l].params[p] += sum * lambda;
    }
  return out;
}

/// Each weight delta replaced by its rank-ceil(f * min(dims)) truncated SVD,
/// bias deltas kept as they are, then everything summed onto theta_0.
inline Checkpoint merge_tsv(const Checkpoint& theta0, std::span<const TaskVector> taus, double rank_fraction) {
  require(rank_fraction > 0.0 && rank_fraction <= 1.0, ErrorCode::ConfigInvalid, "rank fraction must be in (0, 1]");
  detail::require_taus_match(theta0, taus);
  Checkpoint out = theta0;
  for (std::size_t l = 0; l < out.blocks.size(); ++l) {
    const auto weights = detail::weight_indices(out.blocks[l]);
    for (std::size_t p = 0; p < out.blocks[l].params.size(); ++p) {
      const bool is_weight = std::find(weights.begin(), weights.end(), p) != weights.end();
      Matrix& dst = out.blocks[l].params[p];
      for (const auto& t : taus) {
        const Matrix& delta = t.blocks[l].params[p];
        if (!is_weight) {
          dst += delta;
          continue;
        }
        const std::size_t mn = std::min(delta.rows(), delta.cols());
        const auto k = static_cast<std::size_t>(std::ceil(rank_fraction * static_cast<double>(mn) - 1e-12));
        dst += truncated_reconstruction(svd(delta), std::max<std::size_t>(k, 1));
      }
    }
  }
  return out;
}

/// Uniform average of the fine-tuned models, theta_0 + mean(tau).
inline Checkpoint merge_average(const Checkpoint& theta0, std::span<const TaskVector> taus) {
  require(!taus.empty(), ErrorCode::InvalidArgument, "average of no task vectors");
  return merge_ta(theta0, taus, 1.0 / static_cast<double>(taus.size()));
}

inline Checkpoint merge(const Checkpoint& theta0, std::span<const TaskVector> taus, const MergeRecipe& r) {
  switch (r.kind) {
    case MergeRecipe::Kind::TA: return merge_ta(theta0, taus, r.value);
    case MergeRecipe::Kind::TsvLike: return merge_tsv(theta0, taus, r.value);
    case MergeRecipe::Kind::Average: return merge_average(theta0, taus);
  }
  fail(ErrorCode::InvalidArgument, "unknown merge recipe");
}

// ---- adaptation -----------------------------------------------------------

struct AdaptConfig {
  double lr = 1e-5;
  std::size_t batch_size = 128;
  std::size_t epochs = 100;
  DistKind dist = DistKind::Cosine;
  std::uint64_t seed = 0;
  AdamHyper adam;

  void validate() const {
    require(lr > 0.0, ErrorCode::ConfigInvalid, "adapt lr must be positive");
    require(batch_size > 0, ErrorCode::ConfigInvalid, "adapt batch size must be positive");
    require(epochs > 0, ErrorCode::ConfigInvalid, "adapt epochs must be positive");
  }
};

struct LossRecord {
  std::size_t block;
  std::size_t epoch;
  double loss;
};

struct AdaptResult {
  Checkpoint model;
  std::vector<LossRecord> trace;
};

/// Anchor sets keyed by (task, block); task ids index the target list.
class AnchorBank {
 public:
  AnchorBank() = default;
  explicit AnchorBank(std::vector<AnchorSet> sets) {
    for (auto& s : sets) add(std::move(s));
  }
  void add(AnchorSet s) { sets_[{s.task, s.block}] = std::move(s); }
  const AnchorSet* find(std::size_t task, std::size_t block) const {
    auto it = sets_.find({task, block});
    return it == sets_.end() ? nullptr : &it->second;
  }
  std::size_t size() const { return sets_.size(); }

 private:
  std::map<std::pair<std::size_t, std::size_t>, AnchorSet> sets_;
};

/// Layer-wise adaptation of one block. Starts from theta_init's block and
/// minimises sum_i sum_j Dist(phi(theta, x_ij), phi(theta_i, x_ij)) with
/// mini-batch Adam over the shuffled union of all tasks' anchors. Returns the
/// adapted block; appends one record per epoch (sum of the batch losses seen
/// during that epoch) to `trace`.
inline Block adapt_block(std::size_t l, const Checkpoint& theta_init, std::span<const Checkpoint> targets,
                         const AnchorBank& anchors, const AdaptConfig& cfg, std::vector<LossRecord>* trace = nullptr) {
  cfg.validate();
  const Block& start = theta_init.blocks.at(l);

  // Anchor union and the fixed target outputs phi(theta_i, x_ij).
  std::vector<Matrix> xs, ys;
  for (std::size_t i = 0; i < targets.size(); ++i) {
    const AnchorSet* a = anchors.find(i, l);
    if (!a) fail(ErrorCode::MissingAnchors, "no anchors for task " + std::to_string(i) + ", block " + std::to_string(l));
    require(a->x.rows() == start.in_dim(), ErrorCode::ShapeMismatch, "anchor dim does not match block input");
    xs.push_back(a->x);
    ys.push_back(forward_block(targets[i].blocks[l], a->x));
  }
  const Matrix x_all = hconcat(xs), y_all = hconcat(ys);
  const std::size_t total = x_all.cols();
  const std::size_t batch = std::min(cfg.batch_size, total);

  // One compiled loss/gradient program per distinct batch width.
  struct Compiled {
    std::vector<tape::Expr> roots;
    std::unique_ptr<tape::Program> prog;
  };
  std::map<std::size_t, Compiled> programs;
  auto program_for = [&](std::size_t width) -> tape::Program& {
    auto it = programs.find(width);
    if (it != programs.end()) return *it->second.prog;
    const auto theta = graph::param_variables(start, "p");
    const tape::Expr xv = tape::variable("X", start.in_dim(), width);
    const tape::Expr yv = tape::variable("Y", start.out_dim(), width);
    const tape::Expr loss = graph::dist_sum(cfg.dist, graph::block_output(start.kind, start.activation, theta, xv), yv);
    Compiled c;
    c.roots.push_back(loss);
    for (const auto& t : theta) c.roots.push_back(tape::gradient(loss, t));
    c.prog = std::make_unique<tape::Program>(c.roots);
    return *programs.emplace(width, std::move(c)).first->second.prog;
  };

  Block blk = start;
  AdamState st = AdamState::like(blk.params, cfg.adam);
  RngStream rng(derive_seed(cfg.seed, {0xADA9, static_cast<std::uint64_t>(l)}));
  std::vector<std::size_t> order(total);
  for (std::size_t k = 0; k < total; ++k) order[k] = k;
  tape::Binding binding;
  std::vector<Matrix> grads(blk.params.size());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    for (std::size_t begin = 0; begin < total; begin += batch) {
      const std::size_t width = std::min(batch, total - begin);
      const std::span<const std::size_t> idx(order.data() + begin, width);
      tape::Program& prog = program_for(width);
      graph::bind_params(binding, blk, "p");
      binding.set("X", gather_cols(x_all, idx));
      binding.set("Y", gather_cols(y_all, idx));
      prog.run(binding);
      const double loss = prog.scalar_value(0);
      require(std::isfinite(loss), ErrorCode::ConvergenceFailure, "adaptation loss is not finite");
      epoch_loss += loss;
      // Dist >= 0, so a batch loss within rounding of zero sits at the global
      // minimum. Its computed gradient is pure rounding noise, which Adam would
      // amplify (steps scale like g / eps), so it is replaced by zero.
      const bool at_floor = std::abs(loss) <= 4.0 * std::numeric_limits<double>::epsilon() * static_cast<double>(width);
      for (std::size_t p = 0; p < grads.size(); ++p) {
        grads[p] = prog.value(p + 1);
        if (at_floor) grads[p] *= 0.0;
      }
      adam_step(st, blk.params, grads, cfg.lr);
    }
    if (trace) trace->push_back({l, epoch, epoch_loss});
  }
  return blk;
}

/// Adapt every block of theta_init independently. From-pretrained mode passes
/// theta_0 as theta_init; refinement passes a merged checkpoint.
inline AdaptResult adapt(const Checkpoint& theta_init, const Checkpoint& theta0, std::span<const Checkpoint> targets,
                         const AnchorBank& anchors, const AdaptConfig& cfg) {
  require_same_architecture(theta_init, theta0);
  require(!targets.empty(), ErrorCode::InvalidArgument, "adapt needs at least one target");
  for (const auto& t : targets) require_same_architecture(t, theta0);
  AdaptResult res{theta_init, {}};
  for (std::size_t l = 0; l < theta_init.blocks.size(); ++l)
    res.model.blocks[l] = adapt_block(l, theta_init, targets, anchors, cfg, &res.trace);
  return res;
}

inline void write_loss_trace_csv(const std::string& path, std::span<const LossRecord> trace) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot write '" + path + "'");
  out << "block,epoch,loss\n" << std::setprecision(17);
  for (const auto& r : trace) out << r.block << ',' << r.epoch << ',' << r.loss << '\n';
  if (!out) fail(ErrorCode::Io, "write failed for '" + path + "'");
}

}  // namespace fda
