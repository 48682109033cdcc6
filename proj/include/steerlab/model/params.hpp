#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "steerlab/error.hpp"
#include "steerlab/numcore/attention.hpp"
#include "steerlab/numcore/ops.hpp"
#include "steerlab/numcore/tensor.hpp"
#include "steerlab/random.hpp"

namespace steerlab {

struct ModelConfig {
  int vocab_size = 55;
  int d_model = 64;
  int n_layers = 4;
  int n_heads = 4;
  int d_mlp = 256;
  int max_seq_len = 40;
  double rope_base = kDefaultRopeBase;
  double norm_eps = kDefaultNormEps;

  std::size_t d() const { return static_cast<std::size_t>(d_model); }
  std::size_t head_dim() const { return static_cast<std::size_t>(d_model / n_heads); }

  void validate() const {
    auto positive = [](int v, const char* name) {
      if (v < 1) throw ConfigError(std::string("model config: ") + name + " must be >= 1");
    };
    positive(vocab_size, "vocab_size");
    positive(d_model, "d_model");
    positive(n_layers, "n_layers");
    positive(n_heads, "n_heads");
    positive(d_mlp, "d_mlp");
    if (max_seq_len < 2) throw ConfigError("model config: max_seq_len must be >= 2");
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
    if ((d_model / n_heads) % 2 != 0) throw ConfigError("model config: head dimension must be even");
    if (!(norm_eps > 0.0) || !(rope_base > 0.0)) throw ConfigError("model config: eps/rope_base must be > 0");
  }

  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  Tensor attn_norm;  // [d]
  Tensor wq, wk, wv, wo;  // [d x d]
  Tensor mlp_norm;  // [d]
  Tensor w_up;    // [d x d_mlp]
  Tensor w_down;  // [d_mlp x d]
};

struct TransformerParams {
  ModelConfig config;
  Tensor token_embedding;  // [V x d]
  std::vector<LayerParams> layers;
  Tensor final_norm;   // [d]
  Tensor unembedding;  // [V x d], row v is u_v
};

// One additive vector per layer, applied to every position of the layer output.
struct SteeringBank {
  std::vector<Tensor> vectors;  // L x [d]
};

struct LoraLayer {
  Tensor a;  // [r x d_mlp]
  Tensor b;  // [d x r]
};

// Low-rank adapter on each MLP down-projection: out += (alpha / r) B A h_mlp.
struct LoraBank {
  int rank = 4;
  double alpha = 4.0;
  std::vector<LoraLayer> layers;

  double scale() const { return alpha / static_cast<double>(rank); }
};

// Visits every tensor in a fixed order with a stable name.
template <typename Params, typename F>
void for_each_tensor(Params& p, F&& f) {
  f(std::string("tok_emb"), p.token_embedding);
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    auto& layer = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    f(pre + "attn_norm", layer.attn_norm);
    f(pre + "wq", layer.wq);
    f(pre + "wk", layer.wk);
    f(pre + "wv", layer.wv);
    f(pre + "wo", layer.wo);
    f(pre + "mlp_norm", layer.mlp_norm);
    f(pre + "w_up", layer.w_up);
    f(pre + "w_down", layer.w_down);
  }
  f(std::string("final_norm"), p.final_norm);
  f(std::string("unembed"), p.unembedding);
}

template <typename Bank, typename F>
  requires std::same_as<std::remove_const_t<Bank>, SteeringBank>
void for_each_steering(Bank& bank, F&& f) {
  for (std::size_t l = 0; l < bank.vectors.size(); ++l) f("steer." + std::to_string(l), bank.vectors[l]);
}

template <typename Bank, typename F>
  requires std::same_as<std::remove_const_t<Bank>, LoraBank>
void for_each_lora(Bank& bank, F&& f) {
  for (std::size_t l = 0; l < bank.layers.size(); ++l) {
    const std::string pre = "lora." + std::to_string(l) + ".";
    f(pre + "A", bank.layers[l].a);
    f(pre + "B", bank.layers[l].b);
  }
}

// Zeroed tensors with the same layout as params (used as gradient buffers).
inline TransformerParams zeros_like(const TransformerParams& p) {
  TransformerParams z = p;
  for_each_tensor(z, [](const std::string&, Tensor& t) { t.fill(0.0); });
  return z;
}

inline SteeringBank zeros_like(const SteeringBank& s) {
  SteeringBank z = s;
  for (auto& v : z.vectors) v.fill(0.0);
  return z;
}

inline LoraBank zeros_like(const LoraBank& b) {
  LoraBank z = b;
  for (auto& l : z.layers) {
    l.a.fill(0.0);
    l.b.fill(0.0);
  }
  return z;
}

// Shapes each tensor must have under a given config.
inline void validate_params(const TransformerParams& p) {
  const ModelConfig& c = p.config;
  c.validate();
  const std::size_t v = static_cast<std::size_t>(c.vocab_size), d = c.d(),
                    m = static_cast<std::size_t>(c.d_mlp);
  auto expect = [](const Tensor& t, const Shape& s, const std::string& name) {
    if (t.shape() != s) {
      throw DimensionError("parameter " + name + " has shape " + shape_str(t.shape()) +
                           ", expected " + shape_str(s));
    }
    if (!t.all_finite()) throw NumericError("parameter " + name + " is not finite");
  };
  if (p.layers.size() != static_cast<std::size_t>(c.n_layers)) {
    throw DimensionError("parameter set has " + std::to_string(p.layers.size()) + " layers, expected " +
                         std::to_string(c.n_layers));
  }
  expect(p.token_embedding, {v, d}, "tok_emb");
  for (std::size_t l = 0; l < p.layers.size(); ++l) {
    const auto& L = p.layers[l];
    const std::string pre = "layers." + std::to_string(l) + ".";
    expect(L.attn_norm, {d}, pre + "attn_norm");
    expect(L.wq, {d, d}, pre + "wq");
    expect(L.wk, {d, d}, pre + "wk");
    expect(L.wv, {d, d}, pre + "wv");
    expect(L.wo, {d, d}, pre + "wo");
    expect(L.mlp_norm, {d}, pre + "mlp_norm");
    expect(L.w_up, {d, m}, pre + "w_up");
    expect(L.w_down, {m, d}, pre + "w_down");
  }
  expect(p.final_norm, {d}, "final_norm");
  expect(p.unembedding, {v, d}, "unembed");
}

inline void validate_steering(const SteeringBank& s, const ModelConfig& c) {
  if (s.vectors.size() != static_cast<std::size_t>(c.n_layers)) {
    throw DimensionError("steering bank has " + std::to_string(s.vectors.size()) +
                         " vectors, model has " + std::to_string(c.n_layers) + " layers");
  }
  for (std::size_t l = 0; l < s.vectors.size(); ++l) {
    if (s.vectors[l].shape() != Shape{c.d()}) {
      throw DimensionError("steer." + std::to_string(l) + " has shape " +
                           shape_str(s.vectors[l].shape()) + ", expected " + shape_str({c.d()}));
    }
  }
}

inline void validate_lora(const LoraBank& b, const ModelConfig& c) {
  if (b.rank < 1 || b.rank > std::min(c.d_model, c.d_mlp)) {
    throw ConfigError("lora rank " + std::to_string(b.rank) + " outside [1, min(d, d_mlp)]");
  }
  if (!(b.alpha > 0.0)) throw ConfigError("lora alpha must be > 0");
  if (b.layers.size() != static_cast<std::size_t>(c.n_layers)) {
    throw DimensionError("lora bank has " + std::to_string(b.layers.size()) + " layers, model has " +
                         std::to_string(c.n_layers));
  }
  const std::size_t r = static_cast<std::size_t>(b.rank);
  for (std::size_t l = 0; l < b.layers.size(); ++l) {
    if (b.layers[l].a.shape() != Shape{r, static_cast<std::size_t>(c.d_mlp)} ||
        b.layers[l].b.shape() != Shape{c.d(), r}) {
      throw DimensionError("lora." + std::to_string(l) + " adapter shapes do not match the config");
    }
  }
}

// Small-normal initialization; residual-writing projections are scaled by
// 1/sqrt(2L). Norm gains start at one.
inline TransformerParams init_params(const ModelConfig& c, std::uint64_t seed, double stddev = 0.02) {
  c.validate();
  Rng rng(seed);
  const std::size_t v = static_cast<std::size_t>(c.vocab_size), d = c.d(),
                    m = static_cast<std::size_t>(c.d_mlp);
  const double resid_std = stddev / std::sqrt(2.0 * c.n_layers);
  auto normal = [&](Shape s, double sd) {
    Tensor t(std::move(s));
    for (double& x : t.data()) x = sd * rng.normal();
    return t;
  };
  auto ones = [](std::size_t n) {
    Tensor t({n});
    t.fill(1.0);
    return t;
  };
  TransformerParams p;
  p.config = c;
  p.token_embedding = normal({v, d}, stddev);
  for (int l = 0; l < c.n_layers; ++l) {
    LayerParams L;
    L.attn_norm = ones(d);
    L.wq = normal({d, d}, stddev);
    L.wk = normal({d, d}, stddev);
    L.wv = normal({d, d}, stddev);
    L.wo = normal({d, d}, resid_std);
    L.mlp_norm = ones(d);
    L.w_up = normal({d, m}, stddev);
    L.w_down = normal({m, d}, resid_std);
    p.layers.push_back(std::move(L));
  }
  p.final_norm = ones(d);
  p.unembedding = normal({v, d}, stddev);
  return p;
}

}  // namespace steerlab
