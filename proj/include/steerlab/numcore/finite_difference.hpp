#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <span>
#include <string>

#include "steerlab/numcore/tensor.hpp"

namespace steerlab {

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / 2eps, one coordinate at a time.
template <typename F>
  requires std::invocable<F&, const Tensor&>
Tensor finite_difference_gradient(F&& f, const Tensor& x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ParameterError("finite_difference_gradient: eps must be > 0");
  Tensor probe = x;
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double up = static_cast<double>(f(static_cast<const Tensor&>(probe)));
    probe[i] = orig - eps;
    const double down = static_cast<double>(f(static_cast<const Tensor&>(probe)));
    probe[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("finite_difference_gradient: non-finite evaluation at coordinate " +
                        std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// Same oracle over a tensor mutated in place (used for parameters living inside
// larger structures). The tensor is restored bit-exactly afterwards.
template <typename F>
  requires std::invocable<F&>
Tensor finite_difference_gradient_inplace(F&& f, Tensor& x, double eps = 1e-5) {
  if (!(eps > 0.0)) throw ParameterError("finite_difference_gradient: eps must be > 0");
  Tensor grad(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double up = static_cast<double>(f());
    x[i] = orig - eps;
    const double down = static_cast<double>(f());
    x[i] = orig;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      throw OracleError("finite_difference_gradient: non-finite evaluation at coordinate " +
                        std::to_string(i));
    }
    grad[i] = (up - down) / (2.0 * eps);
  }
  return grad;
}

// ||a - b|| / max(||a||, ||b||); 0 when both vanish.
inline double relative_error(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw DimensionError("relative_error: length mismatch");
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff += (a[i] - b[i]) * (a[i] - b[i]);
  const double scale = std::max(std::sqrt(squared_norm(a)), std::sqrt(squared_norm(b)));
  if (scale == 0.0) return std::sqrt(diff);
  return std::sqrt(diff) / scale;
}

inline double relative_error(const Tensor& a, const Tensor& b) {
  a.require_same_shape(b, "relative_error");
  return relative_error(a.data(), b.data());
}

}  // namespace steerlab
