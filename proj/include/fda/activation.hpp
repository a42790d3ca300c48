#pragma once

#include <cmath>
#include <cstdint>
#include <numbers>
#include <string_view>

namespace fda {

/// Smooth activations only: nested differentiation needs second derivatives.
enum class Activation : std::uint8_t { None = 0, Tanh = 1, SmoothGelu = 2 };

inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double kGeluK = 0.044715;

inline double apply_activation(Activation act, double x) {
  switch (act) {
    case Activation::None: return x;
    case Activation::Tanh: return std::tanh(x);
    case Activation::SmoothGelu: return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluK * x * x * x)));
  }
  return x;
}

inline double activation_derivative(Activation act, double x) {
  switch (act) {
    case Activation::None: return 1.0;
    case Activation::Tanh: {
      const double t = std::tanh(x);
      return 1.0 - t * t;
    }
    case Activation::SmoothGelu: {
      const double t = std::tanh(kGeluC * (x + kGeluK * x * x * x));
      return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluK * x * x);
    }
  }
  return 1.0;
}

inline std::string_view to_string(Activation act) {
  switch (act) {
    case Activation::None: return "none";
    case Activation::Tanh: return "tanh";
    case Activation::SmoothGelu: return "smooth-gelu";
  }
  return "?";
}

}  // namespace fda
