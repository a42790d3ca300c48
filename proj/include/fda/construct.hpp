#pragma once

// Anchor construction: initialise anchors in a block's input space and move
// them so that the parameter gradient they induce at theta_0 lines up with
// the block's task vector.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "fda/binio.hpp"
#include "fda/difftape.hpp"
#include "fda/netmodel.hpp"
#include "fda/numkit/random.hpp"
#include "fda/optim.hpp"

namespace fda {

enum class SignConvention : std::uint8_t { Literal = 0, Descent = 1 };

inline std::string_view to_string(SignConvention s) { return s == SignConvention::Literal ? "literal" : "descent"; }

inline SignConvention parse_sign(std::string_view s) {
  if (s == "literal") return SignConvention::Literal;
  if (s == "descent") return SignConvention::Descent;
  fail(ErrorCode::ConfigInvalid, "unknown sign convention '" + std::string(s) + "'");
}

struct InitScheme {
  enum class Kind : std::uint8_t { WeightRows = 0, ScaledGaussian = 1 };
  Kind kind = Kind::ScaledGaussian;
  double sigma = 0.01;

  static InitScheme weight_rows() { return {Kind::WeightRows, 0.0}; }
  static InitScheme scaled_gaussian(double sigma) {
    require(sigma > 0.0 && std::isfinite(sigma), ErrorCode::InvalidSigma,
            "sigma must be positive, got " + std::to_string(sigma));
    return {Kind::ScaledGaussian, sigma};
  }
  friend bool operator==(const InitScheme&, const InitScheme&) = default;
};

inline std::string to_string(const InitScheme& s) {
  return s.kind == InitScheme::Kind::WeightRows ? std::string("weight-rows")
                                                : "gaussian(" + std::to_string(s.sigma) + ")";
}

struct ConstructionConfig {
  std::size_t steps = 1200;
  double lr = 1e-2;
  AdamHyper adam;
  DistKind dist = DistKind::Cosine;
  SignConvention sign = SignConvention::Descent;
  std::size_t n_anchors = 64;
  InitScheme init = InitScheme::scaled_gaussian(0.01);
  /// Include bias deltas in the concatenated gradient/task-vector cosine.
  bool bias_in_objective = true;

  void validate() const {
    require(lr > 0.0, ErrorCode::ConfigInvalid, "construction lr must be positive");
    require(n_anchors >= 1, ErrorCode::ConfigInvalid, "need at least one anchor");
    if (init.kind == InitScheme::Kind::ScaledGaussian)
      require(init.sigma > 0.0, ErrorCode::InvalidSigma, "sigma must be positive");
  }
};

struct AnchorSet {
  std::uint32_t task = 0;
  std::uint32_t block = 0;
  Matrix x;  // d x n, one anchor per column
  InitScheme init;
  SignConvention sign = SignConvention::Descent;
  std::vector<double> loss_trace;
};

/// Called with (t, X_t) for t = 0..T, X_t being the anchors the loss at trace
/// entry t was measured on.
using AnchorObserver = std::function<void(std::size_t, const Matrix&)>;

/// d x n initial anchors for the block whose task-specific parameters are `block_i`.
inline Matrix init_anchors(const InitScheme& scheme, const Block& block_i, std::size_t n, RngStream& rng) {
  require(n >= 1, ErrorCode::InvalidArgument, "init_anchors: n must be >= 1");
  const Matrix& w = block_i.input_weight();
  const std::size_t d = w.cols();
  if (scheme.kind == InitScheme::Kind::WeightRows) {
    require(w.rows() >= 1, ErrorCode::ShapeMismatch, "weight has no rows to sample");
    Matrix x(d, n);
    for (std::size_t j = 0; j < n; ++j) {
      const std::size_t r = static_cast<std::size_t>(rng.uniform_index(w.rows()));
      for (std::size_t i = 0; i < d; ++i) x(i, j) = w(r, i);
    }
    return x;
  }
  require(scheme.sigma > 0.0, ErrorCode::InvalidSigma, "sigma must be positive");
  Matrix x = gaussian_matrix(rng, d, n);
  x *= scheme.sigma;
  return x;
}

namespace detail {

inline std::vector<std::size_t> objective_params(const Block& b, bool with_bias) {
  if (b.kind == BlockKind::Affine) return with_bias ? std::vector<std::size_t>{0, 1} : std::vector<std::size_t>{0};
  return with_bias ? std::vector<std::size_t>{0, 1, 2, 3} : std::vector<std::size_t>{0, 2};
}

inline void require_nonzero_outputs(const Block& b0, const Block& bi, const Matrix& x) {
  for (const Block* b : {&b0, &bi}) {
    const Matrix y = forward_block(*b, x);
    for (std::size_t j = 0; j < y.cols(); ++j)
      require(norm2(y.col(j)) > 1e-300, ErrorCode::ZeroNorm,
              "anchor " + std::to_string(j) + " maps to a zero output");
  }
}

}  // namespace detail

/// Gradient of sum_j Dist(phi(theta, x_j), phi(theta_i, x_j)) w.r.t. each
/// parameter of the block, evaluated at theta = theta_0.
inline std::vector<Matrix> induced_gradient(const Block& block0, const Block& block_i, const Matrix& x,
                                            DistKind dist) {
  require(block0.same_architecture(block_i), ErrorCode::ArchitectureMismatch, "induced_gradient: blocks differ");
  require(x.rows() == block0.in_dim(), ErrorCode::ShapeMismatch, "anchors do not match block input dim");
  if (dist == DistKind::Cosine) detail::require_nonzero_outputs(block0, block_i, x);
  const auto theta = graph::param_variables(block0, "p");
  const auto theta_i = graph::param_constants(block_i);
  const tape::Expr xe = tape::constant(x);
  const tape::Expr loss =
      graph::dist_sum(dist, graph::block_output(block0.kind, block0.activation, theta, xe),
                      graph::block_output(block0.kind, block0.activation, theta_i, xe));
  std::vector<tape::Expr> grads;
  for (const auto& t : theta) grads.push_back(tape::gradient(loss, t));
  tape::Program prog(grads);
  tape::Binding b;
  graph::bind_params(b, block0, "p");
  prog.run(b);
  std::vector<Matrix> out;
  for (std::size_t i = 0; i < grads.size(); ++i) out.push_back(prog.value(i));
  return out;
}

/// Cosine distance between the concatenated gradient (negated for descent)
/// and the concatenated task vector.
inline double matching_loss(std::span<const Matrix> g, std::span<const Matrix> tau, SignConvention sign) {
  require(g.size() == tau.size() && !g.empty(), ErrorCode::ShapeMismatch, "matching_loss: part counts differ");
  std::vector<double> gv, tv;
  for (std::size_t p = 0; p < g.size(); ++p) {
    require(g[p].same_shape(tau[p]), ErrorCode::ShapeMismatch, "matching_loss: shape of part " + std::to_string(p));
    gv.insert(gv.end(), g[p].values().begin(), g[p].values().end());
    tv.insert(tv.end(), tau[p].values().begin(), tau[p].values().end());
  }
  if (sign == SignConvention::Descent)
    for (double& v : gv) v = -v;
  return cos_dist(gv, tv);
}

/// The anchor-space objective of one (task, block) pair, compiled once and
/// evaluated with its anchor gradient at any X of the configured width.
class MatchingObjective {
 public:
  MatchingObjective(const Block& block0, const Block& block_i, std::size_t n, DistKind dist, SignConvention sign,
                    bool bias_in_objective = true)
      : block0_(block0), block_i_(block_i), dist_(dist) {
    require(block0.same_architecture(block_i), ErrorCode::ArchitectureMismatch, "matching objective: blocks differ");
    const auto which = detail::objective_params(block0, bias_in_objective);
    std::vector<tape::Expr> tau_parts;
    double tau_sq = 0.0;
    for (std::size_t p : which) {
      Matrix t = block_i.params[p] - block0.params[p];
      tau_sq += inner(t, t);
      tau_parts.push_back(tape::constant(std::move(t)));
    }
    require(tau_sq > 0.0, ErrorCode::ZeroTaskVector, "block task vector is zero");

    x_ = tape::variable("X", block0.in_dim(), n);
    const auto theta = graph::param_variables(block0, "p");
    const auto theta_i = graph::param_constants(block_i);
    const tape::Expr dist_e =
        graph::dist_sum(dist, graph::block_output(block0.kind, block0.activation, theta, x_),
                        graph::block_output(block0.kind, block0.activation, theta_i, x_));
    std::vector<tape::Expr> g;
    for (std::size_t p : which) g.push_back(tape::gradient(dist_e, theta[p]));
    const double s = sign == SignConvention::Descent ? -1.0 : 1.0;
    gnorm_ = graph::concat_norm(g);
    const tape::Expr cosine =
        tape::safe_divide(graph::concat_inner(g, tau_parts), tape::scale(gnorm_, std::sqrt(tau_sq)));
    loss_ = tape::scalar(1.0) - tape::scale(cosine, s);
    grad_ = tape::gradient(loss_, x_);
    prog_.emplace(std::vector<tape::Expr>{loss_, grad_, gnorm_});
    graph::bind_params(binding_, block0, "p");
  }

  std::size_t anchors() const { return x_.cols(); }
  std::size_t graph_size() const { return prog_->size(); }

  /// Loss at X; the anchor gradient is then available from `gradient()`.
  /// Returns nullopt when X is degenerate (zero output under cosine distance
  /// or a vanishing induced gradient).
  std::optional<double> evaluate(const Matrix& x) {
    if (dist_ == DistKind::Cosine && has_zero_output(x)) return std::nullopt;
    binding_.set("X", x);
    prog_->run(binding_);
    if (!(prog_->scalar_value(2) > 1e-300)) return std::nullopt;
    return prog_->scalar_value(0);
  }
  const Matrix& gradient() const { return prog_->value(1); }

  /// The loss expression, its anchor variable and a binding with X set, for
  /// finite-difference checks.
  const tape::Expr& loss_expr() const { return loss_; }
  const tape::Expr& anchor_variable() const { return x_; }
  tape::Binding binding_at(const Matrix& x) const {
    tape::Binding b = binding_;
    b.set("X", x);
    return b;
  }

 private:
  bool has_zero_output(const Matrix& x) const {
    for (const Block* b : {&block0_, &block_i_}) {
      const Matrix y = forward_block(*b, x);
      for (std::size_t j = 0; j < y.cols(); ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < y.rows(); ++i) s = std::max(s, std::abs(y(i, j)));
        if (s <= 1e-300) return true;
      }
    }
    return false;
  }

  Block block0_, block_i_;
  DistKind dist_;
  tape::Expr x_, loss_, grad_, gnorm_;
  std::optional<tape::Program> prog_;
  tape::Binding binding_;
};

namespace detail {

/// Evaluate, nudging X once by 1e-8 * (seeded unit vector per column) when it
/// is degenerate. A second failure is a ZeroNorm error.
inline double evaluate_or_nudge(MatchingObjective& obj, Matrix& x, RngStream& rng) {
  if (auto v = obj.evaluate(x)) return *v;
  for (std::size_t j = 0; j < x.cols(); ++j) {
    std::vector<double> u(x.rows());
    for (double& e : u) e = rng.normal();
    const double nu = norm2(u);
    for (std::size_t i = 0; i < x.rows(); ++i) x(i, j) += 1e-8 * u[i] / nu;
  }
  if (auto v = obj.evaluate(x)) return *v;
  fail(ErrorCode::ZeroNorm, "anchors stay degenerate after nudge");
}

inline AnchorSet optimise_anchors(MatchingObjective& obj, Matrix x, std::size_t steps, double lr,
                                  const AdamHyper& hyper, RngStream& rng, const AnchorObserver& observe = {}) {
  AnchorSet out;
  out.loss_trace.reserve(steps + 1);
  std::vector<Matrix> params{std::move(x)};
  AdamState st = AdamState::like(params, hyper);
  for (std::size_t t = 0; t <= steps; ++t) {
    const double loss = evaluate_or_nudge(obj, params[0], rng);
    require(std::isfinite(loss), ErrorCode::ConvergenceFailure, "matching loss is not finite");
    out.loss_trace.push_back(loss);
    if (observe) observe(t, params[0]);
    if (t == steps) break;
    const Matrix g = obj.gradient();
    adam_step(st, params, std::span<const Matrix>(&g, 1), lr);
  }
  out.x = std::move(params[0]);
  return out;
}

}  // namespace detail

/// Optimise anchors for block `l` of task `theta_i`. Draws the initialisation
/// (and any degeneracy nudges) from rng.
inline AnchorSet construct_fdas(const Checkpoint& theta0, const Checkpoint& theta_i, std::size_t l,
                                const ConstructionConfig& cfg, RngStream& rng, std::uint32_t task_id = 0,
                                const AnchorObserver& observe = {}) {
  cfg.validate();
  require_same_architecture(theta0, theta_i);
  require(l < theta0.blocks.size(), ErrorCode::InvalidArgument, "block index out of range");
  const Block& b0 = theta0.blocks[l];
  const Block& bi = theta_i.blocks[l];
  MatchingObjective obj(b0, bi, cfg.n_anchors, cfg.dist, cfg.sign, cfg.bias_in_objective);
  Matrix x = init_anchors(cfg.init, bi, cfg.n_anchors, rng);
  AnchorSet out = detail::optimise_anchors(obj, std::move(x), cfg.steps, cfg.lr, cfg.adam, rng, observe);
  out.task = task_id;
  out.block = static_cast<std::uint32_t>(l);
  out.init = cfg.init;
  out.sign = cfg.sign;
  return out;
}

/// Ascent direction of the literal objective for one anchor of a square,
/// bias-free affine block under L2: sigma x + beta dW^T dW x, dW = Wi - W0.
inline std::vector<double> closed_form_anchor_gradient(std::span<const double> x, const Matrix& w0,
                                                       const Matrix& wi) {
  require(w0.same_shape(wi) && w0.cols() == x.size(), ErrorCode::ShapeMismatch, "closed form: shapes");
  const Matrix dw = wi - w0;
  const Matrix xv = Matrix::column(x);
  const Matrix dwx = matmul(dw, xv);
  const double nx = norm2(x), ndwx = frobenius_norm(dwx), ndw = frobenius_norm(dw);
  require(nx > 0.0 && ndwx > 0.0, ErrorCode::DegenerateAnchor, "closed form needs x != 0 and dW x != 0");
  const double sigma = ndwx / (ndw * nx * nx * nx);
  const double beta = -1.0 / (ndw * ndwx * nx);
  const Matrix gram_x = matmul(dw, dwx, true, false);
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = sigma * x[i] + beta * gram_x(i, 0);
  return out;
}

/// Probe each sigma for `probe_steps` from one shared standard-normal draw
/// (rescaled per candidate); return the one with the lowest final loss,
/// ties going to the smaller sigma.
inline double tune_sigma(const Checkpoint& theta0, const Checkpoint& theta_i, std::size_t l,
                         std::span<const double> candidates, std::size_t probe_steps, const ConstructionConfig& cfg,
                         RngStream& rng) {
  require(!candidates.empty(), ErrorCode::InvalidArgument, "tune_sigma needs candidates");
  for (double s : candidates) require(s > 0.0, ErrorCode::InvalidSigma, "sigma candidates must be positive");
  require_same_architecture(theta0, theta_i);
  const Block& b0 = theta0.blocks.at(l);
  const Block& bi = theta_i.blocks[l];
  MatchingObjective obj(b0, bi, cfg.n_anchors, cfg.dist, cfg.sign, cfg.bias_in_objective);
  const Matrix z = gaussian_matrix(rng, b0.in_dim(), cfg.n_anchors);
  double best = candidates[0];
  double best_loss = std::numeric_limits<double>::infinity();
  for (double s : candidates) {
    RngStream nudge(derive_seed(rng.seed(), {0x5167, static_cast<std::uint64_t>(l)}));
    const double final_loss =
        detail::optimise_anchors(obj, z * s, probe_steps, cfg.lr, cfg.adam, nudge).loss_trace.back();
    if (final_loss < best_loss || (final_loss == best_loss && s < best)) {
      best = s;
      best_loss = final_loss;
    }
  }
  return best;
}

// ---- anchor-set files -----------------------------------------------------

inline constexpr std::string_view kAnchorMagic = "FDAANCH1";

inline void save_anchor_set(const AnchorSet& a, const std::string& path) {
  binio::Writer w;
  w.magic(kAnchorMagic);
  w.u16(1);
  w.u32(a.task);
  w.u32(a.block);
  w.u32(static_cast<std::uint32_t>(a.x.rows()));
  w.u32(static_cast<std::uint32_t>(a.x.cols()));
  w.u8(static_cast<std::uint8_t>(a.init.kind));
  w.f64(a.init.sigma);
  w.u8(static_cast<std::uint8_t>(a.sign));
  w.f64s(a.x.values());
  w.u32(static_cast<std::uint32_t>(a.loss_trace.size()));
  w.f64s(a.loss_trace);
  w.finish(path);
}

inline AnchorSet load_anchor_set(const std::string& path) {
  binio::Reader r(path, kAnchorMagic);
  if (r.u16() != 1) r.bad("unsupported format version");
  AnchorSet a;
  a.task = r.u32();
  a.block = r.u32();
  const std::size_t d = r.u32(), n = r.u32();
  if (d == 0 || n == 0) r.bad("empty anchor matrix");
  const std::uint8_t init = r.u8();
  if (init > 1) r.bad("unknown init tag");
  a.init.kind = static_cast<InitScheme::Kind>(init);
  a.init.sigma = r.f64();
  const std::uint8_t sign = r.u8();
  if (sign > 1) r.bad("unknown sign tag");
  a.sign = static_cast<SignConvention>(sign);
  a.x = r.matrix(d, n);
  const std::size_t len = r.u32();
  if (len > r.remaining() / 8) r.bad("loss trace shorter than declared");
  a.loss_trace.resize(len);
  for (double& v : a.loss_trace) v = r.f64();
  r.expect_end();
  return a;
}

}  // namespace fda
