#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "steerlab/model/params.hpp"
#include "steerlab/model/transformer.hpp"
#include "steerlab/random.hpp"

namespace steerlab {

enum class TrainRegime { full, steering, lora };

inline std::string_view to_string(TrainRegime r) {
  switch (r) {
    case TrainRegime::full: return "full";
    case TrainRegime::steering: return "steering";
    case TrainRegime::lora: return "lora";
  }
  return "?";
}

inline constexpr std::string_view kRegimeChoices = "full, steering, lora";

inline std::optional<TrainRegime> parse_regime(std::string_view s) {
  if (s == "full") return TrainRegime::full;
  if (s == "steering") return TrainRegime::steering;
  if (s == "lora") return TrainRegime::lora;
  return std::nullopt;
}

inline constexpr int kDefaultLoraRank = 4;
inline constexpr double kDefaultLoraAlpha = 4.0;

// All-zero vectors, one per layer.
inline SteeringBank init_steering(const ModelConfig& c) {
  SteeringBank s;
  for (int l = 0; l < c.n_layers; ++l) s.vectors.emplace_back(Shape{c.d()});
  return s;
}

// B = 0, A ~ U(-1/sqrt(d_mlp), 1/sqrt(d_mlp)); the adapter starts as a no-op.
inline LoraBank init_lora(const ModelConfig& c, int rank = kDefaultLoraRank, double alpha = kDefaultLoraAlpha,
                          std::uint64_t seed = 0) {
  if (rank < 1 || rank > std::min(c.d_model, c.d_mlp)) {
    throw ConfigError("lora rank " + std::to_string(rank) + " outside [1, " +
                      std::to_string(std::min(c.d_model, c.d_mlp)) + "]");
  }
  if (!(alpha > 0.0)) throw ConfigError("lora alpha must be > 0");
  Rng rng(seed);
  const std::size_t r = static_cast<std::size_t>(rank), m = static_cast<std::size_t>(c.d_mlp);
  const double bound = 1.0 / std::sqrt(static_cast<double>(m));
  LoraBank bank;
  bank.rank = rank;
  bank.alpha = alpha;
  for (int l = 0; l < c.n_layers; ++l) {
    LoraLayer layer{Tensor({r, m}), Tensor({c.d(), r})};
    for (double& x : layer.a.data()) x = rng.uniform(-bound, bound);
    bank.layers.push_back(std::move(layer));
  }
  return bank;
}

struct ParamRef {
  std::string name;
  Tensor* tensor;
};

// Every tensor of the policy, trainable or not, in checkpoint order.
inline std::vector<ParamRef> all_parameters(TransformerParams& params, SteeringBank* steering, LoraBank* lora) {
  std::vector<ParamRef> out;
  auto push = [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); };
  for_each_tensor(params, push);
  if (steering) for_each_steering(*steering, push);
  if (lora) for_each_lora(*lora, push);
  return out;
}

inline void check_regime_banks(TrainRegime regime, const SteeringBank* steering, const LoraBank* lora) {
  switch (regime) {
    case TrainRegime::steering:
      if (!steering) throw ConfigError("steering regime requires a steering bank");
      if (lora) throw ConfigError("steering regime does not take a lora bank");
      break;
    case TrainRegime::lora:
      if (!lora) throw ConfigError("lora regime requires a lora bank");
      if (steering) throw ConfigError("lora regime does not take a steering bank");
      break;
    case TrainRegime::full:
      if (steering || lora) throw ConfigError("full regime trains the base weights only; drop the adapters");
      break;
  }
}

// Deterministically ordered references to the tensors the regime trains.
inline std::vector<ParamRef> trainable_parameters(TrainRegime regime, TransformerParams& params,
                                                  SteeringBank* steering, LoraBank* lora) {
  check_regime_banks(regime, steering, lora);
  std::vector<ParamRef> out;
  auto push = [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); };
  switch (regime) {
    case TrainRegime::full: for_each_tensor(params, push); break;
    case TrainRegime::steering: for_each_steering(*steering, push); break;
    case TrainRegime::lora: for_each_lora(*lora, push); break;
  }
  return out;
}

// Zero gradient buffers for exactly the regime's trainables.
inline Gradients make_gradients(TrainRegime regime, const TransformerParams& params, const SteeringBank* steering,
                                const LoraBank* lora) {
  check_regime_banks(regime, steering, lora);
  Gradients g;
  switch (regime) {
    case TrainRegime::full: g.params = zeros_like(params); break;
    case TrainRegime::steering: g.steering = zeros_like(*steering); break;
    case TrainRegime::lora: g.lora = zeros_like(*lora); break;
  }
  return g;
}

// Gradient tensors in the same order as trainable_parameters.
inline std::vector<ParamRef> gradient_refs(Gradients& g) {
  std::vector<ParamRef> out;
  auto push = [&](const std::string& n, Tensor& t) { out.push_back({n, &t}); };
  if (g.params) for_each_tensor(*g.params, push);
  if (g.steering) for_each_steering(*g.steering, push);
  if (g.lora) for_each_lora(*g.lora, push);
  return out;
}

// Owning policy: base weights plus whichever adapter the regime trains.
struct Policy {
  TransformerParams params;
  std::optional<SteeringBank> steering;
  std::optional<LoraBank> lora;

  PolicyView view() const { return {params, steering ? &*steering : nullptr, lora ? &*lora : nullptr}; }
};

struct LoraSettings {
  int rank = kDefaultLoraRank;
  double alpha = kDefaultLoraAlpha;
  std::uint64_t seed = 0;
};

// Fresh adapters for the regime on top of a base model.
inline Policy make_policy(TrainRegime regime, TransformerParams base, const LoraSettings& lora = {}) {
  Policy p{std::move(base), std::nullopt, std::nullopt};
  if (regime == TrainRegime::steering) p.steering = init_steering(p.params.config);
  if (regime == TrainRegime::lora) p.lora = init_lora(p.params.config, lora.rank, lora.alpha, lora.seed);
  return p;
}

inline std::vector<ParamRef> trainable_parameters(TrainRegime regime, Policy& p) {
  return trainable_parameters(regime, p.params, p.steering ? &*p.steering : nullptr, p.lora ? &*p.lora : nullptr);
}

inline std::vector<ParamRef> all_parameters(Policy& p) {
  return all_parameters(p.params, p.steering ? &*p.steering : nullptr, p.lora ? &*p.lora : nullptr);
}

inline Gradients make_gradients(TrainRegime regime, const Policy& p) {
  return make_gradients(regime, p.params, p.steering ? &*p.steering : nullptr, p.lora ? &*p.lora : nullptr);
}

}  // namespace steerlab
