#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/adapt/regime.hpp"
#include "steerlab/model/sampling.hpp"
#include "steerlab/rl/advantage.hpp"
#include "steerlab/rl/optimizer.hpp"
#include "steerlab/tasks/arith.hpp"
#include "steerlab/tasks/boxed.hpp"
#include "steerlab/tasks/eval.hpp"

namespace steerlab {

inline constexpr std::uint64_t kRolloutSeedStride = 1000003;

struct Rollout {
  std::vector<TokenId> prompt_tokens;
  std::vector<TokenId> completion_tokens;
  std::string completion_text;
  double logprob_total = 0.0;
  int reward = 0;
  double advantage = 0.0;
  bool truncated = false;
  std::optional<Activations> trace;  // sampling-time activations, reused by the reverse pass
};

struct RolloutGroup {
  TaskInstance task;
  std::vector<Rollout> rollouts;
  double baseline = 0.0;
};

struct GroupOptions {
  int n = 16;
  double temperature = 1.0;
  int max_new = 16;
  std::uint64_t seed = 0;
  bool keep_traces = true;
};

inline void assign_advantages(RolloutGroup& g) {
  std::vector<double> rewards;
  for (const auto& r : g.rollouts) rewards.push_back(r.reward);
  const Advantages adv = compute_advantages(rewards);
  g.baseline = adv.baseline;
  for (std::size_t i = 0; i < g.rollouts.size(); ++i) g.rollouts[i].advantage = adv.values[i];
}

// N rollouts for one prompt; rollout i is sampled with seed * stride + i.
inline RolloutGroup generate_group(const PolicyView& pv, const Tokenizer& tok, const TaskInstance& task,
                                   const GroupOptions& opt) {
  if (opt.n < 2) throw ParameterError("generate_group: N must be >= 2");
  RolloutGroup g;
  g.task = task;
  const auto prompt = encode_prompt(tok, task.prompt);
  const Activations state = prefill(pv, prompt);
  for (int i = 0; i < opt.n; ++i) {
    const SampleOptions so{opt.temperature, opt.max_new,
                           opt.seed * kRolloutSeedStride + static_cast<std::uint64_t>(i), Tokenizer::kEos};
    SampleResult res = sample_from(pv, state, so);
    Rollout r;
    r.prompt_tokens = prompt;
    r.completion_tokens = std::move(res.tokens);
    r.completion_text = tok.decode(r.completion_tokens);
    for (double lp : res.logprobs) r.logprob_total += lp;
    r.truncated = !res.stopped;
    // truncated rollouts still score if a boxed answer already closed
    r.reward = reward(r.completion_text, task.gold);
    if (opt.keep_traces) r.trace = std::move(res.trace);
    g.rollouts.push_back(std::move(r));
  }
  assign_advantages(g);
  return g;
}

struct StepReport {
  double loss = 0.0;
  double grad_norm = 0.0;
  double mean_reward = 0.0;
  double mean_baseline = 0.0;
  double mean_abs_advantage = 0.0;
  std::size_t rollouts = 0;
};

// Gradient of L = -(1 / (B N)) sum_groups sum_i a_i log pi(y_i | x), folded in
// group order then rollout order.
inline Gradients policy_gradient(const std::vector<RolloutGroup>& groups, const Policy& policy, TrainRegime regime,
                                 StepReport* report = nullptr) {
  if (groups.empty()) throw InputError("policy_gradient: empty batch");
  Gradients grads = make_gradients(regime, policy);
  const PolicyView pv = policy.view();
  std::size_t total = 0;
  for (const auto& g : groups) total += g.rollouts.size();
  const double norm = 1.0 / static_cast<double>(total);
  StepReport rep;
  rep.rollouts = total;
  for (const auto& g : groups) {
    double adv_sum = 0.0;
    for (const auto& r : g.rollouts) adv_sum += r.advantage;
    if (std::abs(adv_sum) > 1e-9) throw InputError("policy_gradient: group advantages are not centred");
    rep.mean_baseline += g.baseline / static_cast<double>(groups.size());
    for (const auto& r : g.rollouts) {
      rep.mean_reward += r.reward * norm;
      rep.mean_abs_advantage += std::abs(r.advantage) * norm;
      rep.loss -= r.advantage * r.logprob_total * norm;
      if (r.advantage == 0.0) continue;  // contributes exactly nothing
      const double weight = -r.advantage * norm;
      if (r.trace) {
        logprob_backward_from_trace(pv, *r.trace, r.prompt_tokens.size(), r.completion_tokens, weight, grads);
      } else {
        sequence_logprob_backward(pv, r.prompt_tokens, r.completion_tokens, weight, grads);
      }
    }
  }
  auto refs = gradient_refs(grads);
  check_gradients_finite(refs);
  rep.grad_norm = global_norm(refs);
  if (report) *report = rep;
  return grads;
}

// One online update from a batch of rollout groups; frozen tensors are untouched.
inline StepReport policy_gradient_step(const std::vector<RolloutGroup>& groups, Policy& policy, TrainRegime regime,
                                       OptimizerState& state, double lr) {
  if (!(lr > 0.0)) throw ParameterError("policy_gradient_step: lr must be > 0");
  StepReport rep;
  Gradients grads = policy_gradient(groups, policy, regime, &rep);
  optimizer_step(state, trainable_parameters(regime, policy), gradient_refs(grads), lr);
  return rep;
}

}  // namespace steerlab
