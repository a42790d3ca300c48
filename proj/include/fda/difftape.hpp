#pragma once

// Symbolic reverse-mode differentiation over dense matrices.
//
// `gradient` returns an ordinary expression built from the same node kinds as
// its input, so the result can itself be differentiated. That closure is what
// lets anchor construction take the gradient (w.r.t. inputs) of a loss that is
// defined through a gradient (w.r.t. parameters).

#include <algorithm>
#include <limits>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "fda/activation.hpp"
#include "fda/numkit/matrix.hpp"

namespace fda::tape {

enum class Op : std::uint8_t {
  Constant,
  Variable,
  MatMul,
  Add,
  Sub,
  Hadamard,
  ScalarMul,
  Activation,
  Sum,
  FrobeniusNorm,
  VectorNorm,
  InnerProduct,
  SafeDivide,
};

inline constexpr int kOpCount = 13;

inline std::string_view op_name(Op op) {
  static constexpr std::string_view names[] = {"constant", "variable", "matmul", "add", "sub",
                                                "hadamard", "scalar-mul", "activation", "sum",
                                                "frobenius-norm", "vector-norm", "inner-product",
                                                "safe-divide"};
  return names[static_cast<int>(op)];
}

/// Denominator floor used by safe-divide.
inline constexpr double kDivideFloor = 1e-30;

struct Node;
using NodePtr = std::shared_ptr<const Node>;

struct Node {
  Op op;
  std::size_t rows;
  std::size_t cols;
  std::vector<NodePtr> args;
  Matrix constant;            // Constant
  std::string name;           // Variable
  bool trans_a = false;       // MatMul
  bool trans_b = false;       // MatMul
  fda::Activation act = fda::Activation::None;
};

/// Immutable handle to an expression node. Copies share the node.
class Expr {
 public:
  Expr() = default;
  explicit Expr(NodePtr n) : n_(std::move(n)) {}

  const Node& node() const { return *n_; }
  const NodePtr& ptr() const { return n_; }
  Op op() const { return n_->op; }
  std::size_t rows() const { return n_->rows; }
  std::size_t cols() const { return n_->cols; }
  bool is_scalar() const { return rows() == 1 && cols() == 1; }
  explicit operator bool() const { return static_cast<bool>(n_); }

 private:
  NodePtr n_;
};

namespace detail {

inline Expr make(Op op, std::size_t r, std::size_t c, std::vector<NodePtr> args) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->rows = r;
  n->cols = c;
  n->args = std::move(args);
  return Expr(std::move(n));
}

inline std::string shape(const Expr& e) { return std::to_string(e.rows()) + "x" + std::to_string(e.cols()); }

inline void same_shape(const Expr& a, const Expr& b, const char* what) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::ShapeMismatch,
          std::string(what) + ": " + shape(a) + " vs " + shape(b));
}

inline bool is_constant_value(const Expr& e, double v) {
  if (e.op() != Op::Constant) return false;
  for (double x : e.node().constant.values())
    if (x != v) return false;
  return true;
}

}  // namespace detail

// ---- builders -------------------------------------------------------------

inline Expr constant(Matrix m) {
  require(!m.empty(), ErrorCode::ShapeMismatch, "constant must be non-empty");
  auto n = std::make_shared<Node>();
  n->op = Op::Constant;
  n->rows = m.rows();
  n->cols = m.cols();
  n->constant = std::move(m);
  return Expr(std::move(n));
}

inline Expr scalar(double v) { return constant(Matrix(1, 1, v)); }
inline Expr ones(std::size_t r, std::size_t c) { return constant(Matrix(r, c, 1.0)); }
inline Expr zeros(std::size_t r, std::size_t c) { return constant(Matrix(r, c, 0.0)); }

inline Expr variable(std::string name, std::size_t rows, std::size_t cols) {
  require(rows > 0 && cols > 0, ErrorCode::ShapeMismatch, "variable needs positive dims");
  auto n = std::make_shared<Node>();
  n->op = Op::Variable;
  n->rows = rows;
  n->cols = cols;
  n->name = std::move(name);
  return Expr(std::move(n));
}

inline Expr matmul(const Expr& a, const Expr& b, bool ta = false, bool tb = false) {
  const std::size_t m = ta ? a.cols() : a.rows();
  const std::size_t ka = ta ? a.rows() : a.cols();
  const std::size_t kb = tb ? b.cols() : b.rows();
  const std::size_t n = tb ? b.rows() : b.cols();
  require(ka == kb, ErrorCode::ShapeMismatch,
          "matmul " + detail::shape(a) + (ta ? "^T" : "") + " * " + detail::shape(b) + (tb ? "^T" : ""));
  Expr e = detail::make(Op::MatMul, m, n, {a.ptr(), b.ptr()});
  auto& node = const_cast<Node&>(e.node());
  node.trans_a = ta;
  node.trans_b = tb;
  return e;
}

inline Expr operator+(const Expr& a, const Expr& b) {
  detail::same_shape(a, b, "add");
  return detail::make(Op::Add, a.rows(), a.cols(), {a.ptr(), b.ptr()});
}

inline Expr operator-(const Expr& a, const Expr& b) {
  detail::same_shape(a, b, "sub");
  return detail::make(Op::Sub, a.rows(), a.cols(), {a.ptr(), b.ptr()});
}

inline Expr hadamard(const Expr& a, const Expr& b) {
  detail::same_shape(a, b, "hadamard");
  return detail::make(Op::Hadamard, a.rows(), a.cols(), {a.ptr(), b.ptr()});
}

/// a scaled by the 1x1 expression s.
inline Expr scale(const Expr& a, const Expr& s) {
  require(s.is_scalar(), ErrorCode::ShapeMismatch, "scalar-mul factor must be 1x1, got " + detail::shape(s));
  if (detail::is_constant_value(s, 1.0)) return a;
  return detail::make(Op::ScalarMul, a.rows(), a.cols(), {a.ptr(), s.ptr()});
}

inline Expr scale(const Expr& a, double s) { return scale(a, scalar(s)); }
inline Expr operator-(const Expr& a) { return scale(a, -1.0); }

inline Expr activation(const Expr& a, fda::Activation act) {
  if (act == fda::Activation::None) return a;
  Expr e = detail::make(Op::Activation, a.rows(), a.cols(), {a.ptr()});
  const_cast<Node&>(e.node()).act = act;
  return e;
}

inline Expr tanh(const Expr& a) { return activation(a, fda::Activation::Tanh); }
inline Expr gelu(const Expr& a) { return activation(a, fda::Activation::SmoothGelu); }

inline Expr sum(const Expr& a) { return detail::make(Op::Sum, 1, 1, {a.ptr()}); }
inline Expr frobenius_norm(const Expr& a) { return detail::make(Op::FrobeniusNorm, 1, 1, {a.ptr()}); }

/// Euclidean norm of each column: rows x cols -> 1 x cols.
inline Expr vector_norm(const Expr& a) { return detail::make(Op::VectorNorm, 1, a.cols(), {a.ptr()}); }

inline Expr inner(const Expr& a, const Expr& b) {
  detail::same_shape(a, b, "inner-product");
  return detail::make(Op::InnerProduct, 1, 1, {a.ptr(), b.ptr()});
}

/// Elementwise a / b with |b| floored at kDivideFloor (sign kept). b may be the
/// same shape as a, 1x1, a row (1 x cols) or a column (rows x 1); it is
/// broadcast across a.
inline Expr safe_divide(const Expr& a, const Expr& b) {
  const bool ok = (b.rows() == a.rows() && b.cols() == a.cols()) || b.is_scalar() ||
                  (b.rows() == 1 && b.cols() == a.cols()) || (b.cols() == 1 && b.rows() == a.rows());
  require(ok, ErrorCode::ShapeMismatch, "safe-divide " + detail::shape(a) + " / " + detail::shape(b));
  return detail::make(Op::SafeDivide, a.rows(), a.cols(), {a.ptr(), b.ptr()});
}

// ---- traversal ------------------------------------------------------------

/// Post-order (children first) over every node reachable from `roots`.
inline std::vector<const Node*> topological_order(const std::vector<Expr>& roots) {
  std::vector<const Node*> order;
  std::unordered_map<const Node*, int> state;  // 1 = on stack, 2 = done
  std::vector<std::pair<const Node*, std::size_t>> stack;
  for (const Expr& r : roots) {
    if (!r || state[&r.node()] == 2) continue;
    stack.emplace_back(&r.node(), 0);
    state[&r.node()] = 1;
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->args.size()) {
        const Node* c = n->args[next++].get();
        int& s = state[c];
        if (s == 0) {
          s = 1;
          stack.emplace_back(c, 0);
        }
        continue;
      }
      state[n] = 2;
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

inline std::size_t node_count(const Expr& e) { return topological_order({e}).size(); }

/// Distinct node kinds appearing in `e`.
inline std::set<Op> node_kinds(const Expr& e) {
  std::set<Op> kinds;
  for (const Node* n : topological_order({e})) kinds.insert(n->op);
  return kinds;
}

// ---- gradient -------------------------------------------------------------

/// d scalar / d wrt as an expression of wrt's shape, built from the supported
/// node kinds only. When `wrt` does not occur in `scalar` the result is a zero
/// constant of wrt's shape.
inline Expr gradient(const Expr& scalar_expr, const Expr& wrt) {
  require(scalar_expr.is_scalar(), ErrorCode::NotScalar,
          "gradient needs a 1x1 expression, got " + detail::shape(scalar_expr));
  require(wrt.op() == Op::Variable, ErrorCode::InvalidArgument, "gradient target must be a variable");
  const std::string& target = wrt.node().name;

  const std::vector<const Node*> order = topological_order({scalar_expr});
  std::unordered_map<const Node*, bool> depends;
  std::unordered_map<const Node*, NodePtr> owner;  // raw -> shared, for reuse of forward nodes
  owner[&scalar_expr.node()] = scalar_expr.ptr();
  for (const Node* n : order) {
    bool d = n->op == Op::Variable && n->name == target;
    for (const NodePtr& c : n->args) {
      owner.emplace(c.get(), c);
      d = d || depends[c.get()];
    }
    depends[n] = d;
  }

  std::unordered_map<const Node*, Expr> adj;
  auto accumulate = [&](const Node* n, Expr g) {
    auto it = adj.find(n);
    if (it == adj.end()) {
      adj.emplace(n, std::move(g));
    } else {
      it->second = it->second + g;
    }
  };
  auto self = [&](const Node* n) { return Expr(owner.at(n)); };

  if (!depends[&scalar_expr.node()]) return zeros(wrt.rows(), wrt.cols());
  adj.emplace(&scalar_expr.node(), scalar(1.0));

  Expr result;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    const Node* n = *it;
    if (!depends[n]) continue;
    auto found = adj.find(n);
    if (found == adj.end()) continue;
    const Expr g = found->second;
    const auto& args = n->args;
    auto dep = [&](std::size_t i) { return depends[args[i].get()]; };
    auto arg = [&](std::size_t i) { return Expr(args[i]); };

    switch (n->op) {
      case Op::Constant:
        break;
      case Op::Variable:
        if (n->name == target) result = result ? result + g : g;
        break;
      case Op::MatMul: {
        const Expr a = arg(0), b = arg(1);
        const bool ta = n->trans_a, tb = n->trans_b;
        if (dep(0)) accumulate(args[0].get(), ta ? matmul(b, g, tb, true) : matmul(g, b, false, !tb));
        if (dep(1)) accumulate(args[1].get(), tb ? matmul(g, a, true, ta) : matmul(a, g, !ta, false));
        break;
      }
      case Op::Add:
        if (dep(0)) accumulate(args[0].get(), g);
        if (dep(1)) accumulate(args[1].get(), g);
        break;
      case Op::Sub:
        if (dep(0)) accumulate(args[0].get(), g);
        if (dep(1)) accumulate(args[1].get(), -g);
        break;
      case Op::Hadamard:
        if (dep(0)) accumulate(args[0].get(), hadamard(g, arg(1)));
        if (dep(1)) accumulate(args[1].get(), hadamard(g, arg(0)));
        break;
      case Op::ScalarMul:
        if (dep(0)) accumulate(args[0].get(), scale(g, arg(1)));
        if (dep(1)) accumulate(args[1].get(), inner(g, arg(0)));
        break;
      case Op::Activation: {
        const Expr a = arg(0);
        if (n->act == fda::Activation::Tanh) {
          // g * (1 - y^2), y = this node.
          const Expr y = self(n);
          accumulate(args[0].get(), g - hadamard(hadamard(g, y), y));
        } else {
          // gelu'(a) = 0.5 (1 + t) + 0.5 c a (1 - t^2)(1 + 3 k a^2), t = tanh(c (a + k a^3)).
          const Expr a3 = hadamard(hadamard(a, a), a);
          const Expr t = tanh(scale(a + scale(a3, kGeluK), kGeluC));
          const Expr ga = hadamard(g, a);
          const Expr p = ga + scale(hadamard(hadamard(ga, a), a), 3.0 * kGeluK);
          const Expr first = scale(g + hadamard(g, t), 0.5);
          const Expr second = scale(p - hadamard(hadamard(p, t), t), 0.5 * kGeluC);
          accumulate(args[0].get(), first + second);
        }
        break;
      }
      case Op::Sum: {
        const Expr a = arg(0);
        accumulate(args[0].get(), scale(ones(a.rows(), a.cols()), g));
        break;
      }
      case Op::FrobeniusNorm:
        accumulate(args[0].get(), scale(safe_divide(arg(0), self(n)), g));
        break;
      case Op::VectorNorm: {
        const Expr a = arg(0);
        const Expr g_rows = matmul(ones(a.rows(), 1), g);
        accumulate(args[0].get(), safe_divide(hadamard(a, g_rows), self(n)));
        break;
      }
      case Op::InnerProduct:
        if (dep(0)) accumulate(args[0].get(), scale(arg(1), g));
        if (dep(1)) accumulate(args[1].get(), scale(arg(0), g));
        break;
      case Op::SafeDivide: {
        const Expr a = arg(0), b = arg(1);
        if (dep(0)) accumulate(args[0].get(), safe_divide(g, b));
        if (dep(1)) {
          const Expr full = -safe_divide(hadamard(g, self(n)), b);
          Expr reduced = full;
          if (b.rows() == a.rows() && b.cols() == a.cols()) {
            reduced = full;
          } else if (b.is_scalar()) {
            reduced = sum(full);
          } else if (b.rows() == 1) {
            reduced = matmul(ones(1, a.rows()), full);
          } else {
            reduced = matmul(full, ones(a.cols(), 1));
          }
          accumulate(args[1].get(), reduced);
        }
        break;
      }
    }
  }
  return result ? result : zeros(wrt.rows(), wrt.cols());
}

// ---- evaluation -----------------------------------------------------------

/// Variable name -> value.
class Binding {
 public:
  Binding() = default;
  Binding(std::initializer_list<std::pair<const std::string, Matrix>> init) : values_(init) {}

  Binding& set(const std::string& name, Matrix value) {
    values_[name] = std::move(value);
    return *this;
  }
  const Matrix* find(const std::string& name) const {
    auto it = values_.find(name);
    return it == values_.end() ? nullptr : &it->second;
  }
  const Matrix& at(const std::string& name) const {
    const Matrix* m = find(name);
    if (!m) fail(ErrorCode::UnboundVariable, "variable '" + name + "' is not bound");
    return *m;
  }
  Matrix& mutable_at(const std::string& name) {
    auto it = values_.find(name);
    if (it == values_.end()) fail(ErrorCode::UnboundVariable, "variable '" + name + "' is not bound");
    return it->second;
  }

 private:
  std::map<std::string, Matrix> values_;
};

/// A compiled set of expressions: nodes are ordered once and intermediate
/// buffers are reused across `run` calls. One Program must not be run from
/// two threads at once; separate Programs over shared expressions are fine.
class Program {
 public:
  explicit Program(std::vector<Expr> roots) : roots_(std::move(roots)) {
    order_ = topological_order(roots_);
    for (std::size_t i = 0; i < order_.size(); ++i) slot_[order_[i]] = i;
    args_.resize(order_.size());
    for (std::size_t i = 0; i < order_.size(); ++i)
      for (const NodePtr& c : order_[i]->args) args_[i].push_back(slot_.at(c.get()));
    for (const Expr& r : roots_) root_slot_.push_back(slot_.at(&r.node()));
    values_.resize(order_.size());
    ptrs_.assign(order_.size(), nullptr);
  }

  std::size_t size() const { return order_.size(); }

  /// Evaluate every root; results stay valid until the next run.
  void run(const Binding& b) {
    for (std::size_t i = 0; i < order_.size(); ++i) {
      const Node& n = *order_[i];
      if (n.op == Op::Constant) {
        ptrs_[i] = &n.constant;
        continue;
      }
      if (n.op == Op::Variable) {
        const Matrix& v = b.at(n.name);
        require(v.rows() == n.rows && v.cols() == n.cols, ErrorCode::ShapeMismatch,
                "variable '" + n.name + "' bound to " + v.shape_str() + ", expected " +
                    std::to_string(n.rows) + "x" + std::to_string(n.cols));
        ptrs_[i] = &v;
        continue;
      }
      compute(i, n);
      ptrs_[i] = &values_[i];
    }
  }

  const Matrix& value(std::size_t root) const { return *ptrs_[root_slot_.at(root)]; }
  double scalar_value(std::size_t root) const { return value(root)(0, 0); }

 private:
  const Matrix& in(std::size_t i, std::size_t k) const { return *ptrs_[args_[i][k]]; }

  void compute(std::size_t i, const Node& n) {
    Matrix& out = values_[i];
    if (out.rows() != n.rows || out.cols() != n.cols) out = Matrix(n.rows, n.cols);
    auto o = out.values();
    switch (n.op) {
      case Op::MatMul:
        matmul_into(in(i, 0), in(i, 1), n.trans_a, n.trans_b, out);
        break;
      case Op::Add: {
        const auto a = in(i, 0).values(), b = in(i, 1).values();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = a[k] + b[k];
        break;
      }
      case Op::Sub: {
        const auto a = in(i, 0).values(), b = in(i, 1).values();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = a[k] - b[k];
        break;
      }
      case Op::Hadamard: {
        const auto a = in(i, 0).values(), b = in(i, 1).values();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = a[k] * b[k];
        break;
      }
      case Op::ScalarMul: {
        const auto a = in(i, 0).values();
        const double s = in(i, 1)(0, 0);
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = a[k] * s;
        break;
      }
      case Op::Activation: {
        const auto a = in(i, 0).values();
        for (std::size_t k = 0; k < o.size(); ++k) o[k] = apply_activation(n.act, a[k]);
        break;
      }
      case Op::Sum:
        o[0] = fda::sum(in(i, 0));
        break;
      case Op::FrobeniusNorm:
        o[0] = fda::frobenius_norm(in(i, 0));
        break;
      case Op::VectorNorm: {
        const Matrix& a = in(i, 0);
        for (std::size_t j = 0; j < a.cols(); ++j) {
          double s = 0.0;
          for (std::size_t r = 0; r < a.rows(); ++r) s += a(r, j) * a(r, j);
          o[j] = std::sqrt(s);
        }
        break;
      }
      case Op::InnerProduct:
        o[0] = fda::inner(in(i, 0).values(), in(i, 1).values());
        break;
      case Op::SafeDivide: {
        const Matrix& a = in(i, 0);
        const Matrix& b = in(i, 1);
        auto floor = [](double d) {
          return std::abs(d) < kDivideFloor ? std::copysign(kDivideFloor, d) : d;
        };
        const std::size_t r = a.rows(), c = a.cols();
        const bool full = b.rows() == r && b.cols() == c;
        for (std::size_t p = 0; p < r; ++p)
          for (std::size_t q = 0; q < c; ++q) {
            double d;
            if (full) d = b(p, q);
            else if (b.rows() == 1 && b.cols() == 1) d = b(0, 0);
            else if (b.rows() == 1) d = b(0, q);
            else d = b(p, 0);
            o[p * c + q] = a(p, q) / floor(d);
          }
        break;
      }
      case Op::Constant:
      case Op::Variable:
        break;
    }
  }

  std::vector<Expr> roots_;
  std::vector<const Node*> order_;
  std::unordered_map<const Node*, std::size_t> slot_;
  std::vector<std::vector<std::size_t>> args_;
  std::vector<std::size_t> root_slot_;
  std::vector<Matrix> values_;
  std::vector<const Matrix*> ptrs_;
};

inline Matrix evaluate(const Expr& e, const Binding& b) {
  Program p({e});
  p.run(b);
  return p.value(0);
}

namespace detail {

/// Ridders' extrapolation of central differences of f at 0, starting from
/// step h and shrinking it by 1.4 per stage; returns the tableau entry with the
/// smallest error estimate.
template <typename F>
double ridders_derivative(F&& f, double h) {
  constexpr int kStages = 10;
  constexpr double kShrink = 1.4, kShrink2 = kShrink * kShrink, kSafe = 2.0;
  double a[kStages][kStages];
  a[0][0] = (f(h) - f(-h)) / (2.0 * h);
  double best = a[0][0];
  double err = std::numeric_limits<double>::infinity();
  for (int i = 1; i < kStages; ++i) {
    h /= kShrink;
    a[0][i] = (f(h) - f(-h)) / (2.0 * h);
    double fac = kShrink2;
    for (int j = 1; j <= i; ++j) {
      a[j][i] = (a[j - 1][i] * fac - a[j - 1][i - 1]) / (fac - 1.0);
      fac *= kShrink2;
      const double e = std::max(std::abs(a[j][i] - a[j - 1][i]), std::abs(a[j][i] - a[j - 1][i - 1]));
      if (e <= err) {
        err = e;
        best = a[j][i];
      }
    }
    if (std::abs(a[i][i] - a[i - 1][i - 1]) >= kSafe * err) break;
  }
  return best;
}

}  // namespace detail

/// Max over coordinates of |analytic - finite difference| / (|finite difference| + 1e-8).
/// The finite difference is a Ridders-extrapolated central difference whose
/// largest probe offset is `step`; `step` <= 0 selects 3e-3 * (1 + max|wrt|).
inline double check_finite_diff(const Expr& scalar_expr, const Expr& wrt, const Binding& b, double step = 0.0) {
  require(scalar_expr.is_scalar(), ErrorCode::NotScalar, "check_finite_diff needs a 1x1 expression");
  Program analytic({gradient(scalar_expr, wrt)});
  analytic.run(b);
  const Matrix grad = analytic.value(0);

  Binding probe = b;
  Matrix& x = probe.mutable_at(wrt.node().name);
  const double h = step > 0.0 ? step : 3e-3 * (1.0 + max_abs(x));
  Program f({scalar_expr});
  double worst = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double orig = x[k];
    const double fd = detail::ridders_derivative(
        [&](double offset) {
          x[k] = orig + offset;
          f.run(probe);
          return f.scalar_value(0);
        },
        h);
    x[k] = orig;
    worst = std::max(worst, std::abs(grad[k] - fd) / (std::abs(fd) + 1e-8));
  }
  return worst;
}

}  // namespace fda::tape
