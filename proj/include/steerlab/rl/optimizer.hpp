#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "steerlab/adapt/regime.hpp"
#include "steerlab/error.hpp"

namespace steerlab {

enum class OptimizerKind { adam, sgd };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// First/second moments aligned one-to-one with a trainable_parameters list.
struct OptimizerState {
  OptimizerConfig config;
  long long step = 0;
  std::vector<std::string> names;
  std::vector<Tensor> m;
  std::vector<Tensor> v;

  static OptimizerState for_params(const std::vector<ParamRef>& params, const OptimizerConfig& config = {}) {
    OptimizerState s;
    s.config = config;
    for (const auto& p : params) {
      s.names.push_back(p.name);
      if (config.kind == OptimizerKind::adam) {
        s.m.emplace_back(p.tensor->shape());
        s.v.emplace_back(p.tensor->shape());
      }
    }
    return s;
  }
};

inline void check_gradients_finite(const std::vector<ParamRef>& grads) {
  for (const auto& g : grads) {
    if (!g.tensor->all_finite()) {
      throw NumericError("non-finite gradient in parameter '" + g.name + "'");
    }
  }
}

// One update of params from grads (same ordering as the state).
inline void optimizer_step(OptimizerState& state, const std::vector<ParamRef>& params,
                           const std::vector<ParamRef>& grads, double lr) {
  if (params.size() != grads.size() || params.size() != state.names.size()) {
    throw ConfigError("optimizer: parameter, gradient and state lists are not aligned");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i].name != state.names[i] || grads[i].name != state.names[i]) {
      throw ConfigError("optimizer: ordering mismatch at '" + state.names[i] + "'");
    }
  }
  check_gradients_finite(grads);
  ++state.step;
  const OptimizerConfig& c = state.config;
  if (c.kind == OptimizerKind::sgd) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto p = params[i].tensor->data();
      const auto g = grads[i].tensor->data();
      for (std::size_t j = 0; j < p.size(); ++j) p[j] -= lr * g[j];
    }
    return;
  }
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].tensor->data();
    const auto g = grads[i].tensor->data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * g[j];
      v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * g[j] * g[j];
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p[j] -= lr * mhat / (std::sqrt(vhat) + c.eps);
    }
  }
}

inline double global_norm(const std::vector<ParamRef>& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += squared_norm(g.tensor->data());
  return std::sqrt(s);
}

}  // namespace steerlab
