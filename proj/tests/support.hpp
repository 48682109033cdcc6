#pragma once

#include <cstdint>
#include <vector>

#include "steerlab/adapt/regime.hpp"
#include "steerlab/model/params.hpp"
#include "steerlab/numcore/tensor.hpp"
#include "steerlab/random.hpp"
#include "steerlab/numcore/finite_difference.hpp"
#include "steerlab/rl/policy_gradient.hpp"
#include "steerlab/rl/pretrain.hpp"
#include "steerlab/rl/train.hpp"

namespace steerlab::testing {

inline ModelConfig tiny_config(int vocab = 16, int d = 8, int layers = 2, int heads = 2, int mlp = 16, int max_len = 12) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.n_layers = layers;
  c.n_heads = heads;
  c.d_mlp = mlp;
  c.max_seq_len = max_len;
  return c;
}

inline Tensor random_tensor(Shape s, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(s));
  for (double& x : t.data()) x = scale * rng.normal();
  return t;
}

// Weights large enough that every path carries signal; gains away from 1.
inline TransformerParams random_params(const ModelConfig& c, std::uint64_t seed, double scale = 0.4) {
  TransformerParams p = init_params(c, seed, scale);
  Rng rng(derive_seed(seed, 99));
  for (auto& l : p.layers) {
    for (double& g : l.attn_norm.data()) g = 1.0 + 0.2 * rng.normal();
    for (double& g : l.mlp_norm.data()) g = 1.0 + 0.2 * rng.normal();
  }
  for (double& g : p.final_norm.data()) g = 1.0 + 0.2 * rng.normal();
  return p;
}

inline SteeringBank random_steering(const ModelConfig& c, std::uint64_t seed, double scale = 0.3) {
  Rng rng(seed);
  SteeringBank s = init_steering(c);
  for (auto& v : s.vectors) v = random_tensor(v.shape(), rng, scale);
  return s;
}

inline LoraBank random_lora(const ModelConfig& c, std::uint64_t seed, int rank = 2, double scale = 0.3) {
  LoraBank b = init_lora(c, rank, 4.0, seed);
  Rng rng(derive_seed(seed, 5));
  for (auto& l : b.layers) l.b = random_tensor(l.b.shape(), rng, scale);
  return b;
}

inline std::vector<TokenId> random_tokens(Rng& rng, std::size_t n, int vocab) {
  std::vector<TokenId> t(n);
  for (auto& x : t) x = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

// Groups sampled from the policy but rewarded by coin flips, so every update
// carries a nonzero gradient regardless of what the policy can do.
inline std::vector<RolloutGroup> coin_flip_groups(const Policy& policy, std::uint64_t seed, int groups = 2, int n = 4,
                                                  int max_new = 4) {
  const ModelConfig& c = policy.params.config;
  Rng rng(seed);
  std::vector<RolloutGroup> out;
  for (int g = 0; g < groups; ++g) {
    RolloutGroup grp;
    const auto prompt = random_tokens(rng, 3, c.vocab_size);
    const Activations state = prefill(policy.view(), prompt);
    for (int i = 0; i < n; ++i) {
      SampleResult res = sample_from(policy.view(), state, {1.0, max_new, rng.next_u64(), -1});
      Rollout r;
      r.prompt_tokens = prompt;
      r.completion_tokens = res.tokens;
      for (double lp : res.logprobs) r.logprob_total += lp;
      r.reward = i == 0 ? 1 : i == 1 ? 0 : static_cast<int>(rng.below(2));
      r.trace = std::move(res.trace);
      grp.rollouts.push_back(std::move(r));
    }
    assign_advantages(grp);
    out.push_back(std::move(grp));
  }
  return out;
}

// A one-digit addition world small enough to pretrain in a few seconds, yet
// with a base model that already earns some reward.
inline ModelConfig small_model() {
  ModelConfig m;
  m.d_model = 16;
  m.n_layers = 1;
  m.n_heads = 2;
  m.d_mlp = 32;
  m.max_seq_len = 32;
  return m;
}

inline CorpusConfig small_corpus() {
  CorpusConfig c;
  c.range.a_max = 9;
  c.range.operators = "+";
  c.documents = 2000;
  c.seed = 1;
  return c;
}

inline const TransformerParams& small_base() {
  static const TransformerParams base = [] {
    PretrainConfig pc;
    pc.steps = 400;
    pc.lr = 1e-2;
    pc.seed = 2;
    pc.weight_decay = 0.0;
    return pretrain(gen_pretrain_corpus(small_corpus()), small_model(), pc);
  }();
  return base;
}

inline TrainConfig small_train_config() {
  TrainConfig c;
  c.tasks = small_corpus().range;
  c.batch_size = 4;
  c.num_generations = 4;
  c.max_new_tokens = 8;
  c.total_steps = 6;
  c.checkpoint_every = 3;
  c.seed = 3;
  c.learning_rate = 5e-3;
  return c;
}

// Group estimator on a two-token vocabulary with one-token completions and
// reward 1 for token 1. The oracle enumerates all 2^N outcomes of a group,
// weighting (1/N) sum_i (r_i - mean r) grad log pi(y_i) by its probability,
// with both score vectors taken by finite differences.
struct EstimatorCheck {
  double rel_error = 0.0;     // Monte Carlo mean vs enumerated expectation
  double cos_with_grad = 0.0;  // Monte Carlo mean vs grad of expected reward
};

inline EstimatorCheck estimator_check(std::uint64_t seed, int n, int groups, int per_batch = 100) {
  const ModelConfig c = tiny_config(2, 8, 1, 2, 16, 8);
  Policy policy = make_policy(TrainRegime::steering, random_params(c, seed));
  policy.steering = random_steering(c, derive_seed(seed, 1), 0.3);
  Rng rng(derive_seed(seed, 2));
  const std::vector<TokenId> prompt = random_tokens(rng, 2, 2);
  Tensor& s = policy.steering->vectors[0];

  auto logp = [&](TokenId y) { return sequence_logprob(policy.view(), prompt, std::vector<TokenId>{y}).total; };
  const Tensor g0 = finite_difference_gradient_inplace([&] { return logp(0); }, s);
  const Tensor g1 = finite_difference_gradient_inplace([&] { return logp(1); }, s);
  const Tensor grad_j = finite_difference_gradient_inplace([&] { return std::exp(logp(1)); }, s);
  const double p1 = std::exp(logp(1));

  Tensor expected(s.shape());
  for (unsigned mask = 0; mask < (1u << n); ++mask) {
    double prob = 1.0;
    double mean_r = 0.0;
    for (int i = 0; i < n; ++i) {
      const bool one = (mask >> i) & 1u;
      prob *= one ? p1 : 1.0 - p1;
      mean_r += one ? 1.0 : 0.0;
    }
    mean_r /= n;
    for (int i = 0; i < n; ++i) {
      const bool one = (mask >> i) & 1u;
      const double a = (one ? 1.0 : 0.0) - mean_r;
      const Tensor& g = one ? g1 : g0;
      for (std::size_t k = 0; k < expected.size(); ++k) expected[k] += prob * a * g[k] / n;
    }
  }

  Tensor mc(s.shape());
  const Activations state = prefill(policy.view(), prompt);
  int done = 0;
  while (done < groups) {
    std::vector<RolloutGroup> batch;
    for (int b = 0; b < per_batch && done < groups; ++b, ++done) {
      RolloutGroup grp;
      for (int i = 0; i < n; ++i) {
        SampleResult res = sample_from(policy.view(), state, {1.0, 1, rng.next_u64(), -1});
        Rollout r;
        r.prompt_tokens = prompt;
        r.completion_tokens = res.tokens;
        r.logprob_total = res.logprobs[0];
        r.reward = res.tokens[0] == 1 ? 1 : 0;
        r.trace = std::move(res.trace);
        grp.rollouts.push_back(std::move(r));
      }
      assign_advantages(grp);
      batch.push_back(std::move(grp));
    }
    // the loss gradient is minus the mean group estimator
    Gradients g = policy_gradient(batch, policy, TrainRegime::steering);
    const double w = -static_cast<double>(batch.size()) / groups;
    for (std::size_t k = 0; k < mc.size(); ++k) mc[k] += w * g.steering->vectors[0][k];
  }

  EstimatorCheck out;
  out.rel_error = relative_error(mc, expected);
  double dot = 0.0;
  for (std::size_t k = 0; k < mc.size(); ++k) dot += mc[k] * grad_j[k];
  out.cos_with_grad = dot / std::sqrt(squared_norm(mc.data()) * squared_norm(grad_j.data()));
  return out;
}

}  // namespace steerlab::testing
