#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fda/numkit/matrix.hpp"

namespace fda {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments shaped like the parameters, plus the step counter.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::uint64_t step = 0;
  AdamHyper hyper;

  static AdamState like(std::span<const Matrix> params, AdamHyper h = {}) {
    AdamState s;
    s.hyper = h;
    for (const auto& p : params) {
      s.m.emplace_back(p.rows(), p.cols());
      s.v.emplace_back(p.rows(), p.cols());
    }
    return s;
  }
};

/// One bias-corrected Adam update of `params` in place.
inline void adam_step(AdamState& st, std::span<Matrix> params, std::span<const Matrix> grads, double lr) {
  require(params.size() == grads.size() && params.size() == st.m.size(), ErrorCode::ShapeMismatch,
          "adam_step: parameter/gradient/state counts differ");
  for (std::size_t i = 0; i < params.size(); ++i)
    require(params[i].same_shape(grads[i]) && params[i].same_shape(st.m[i]), ErrorCode::ShapeMismatch,
            "adam_step: shape of parameter " + std::to_string(i));
  st.step += 1;
  const auto& h = st.hyper;
  const double c1 = 1.0 - std::pow(h.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(h.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].values();
    const auto g = grads[i].values();
    auto m = st.m[i].values();
    auto v = st.v[i].values();
    for (std::size_t k = 0; k < p.size(); ++k) {
      m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
      v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
      p[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + h.eps);
    }
  }
}

}  // namespace fda
