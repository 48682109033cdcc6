#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "steerlab/model/transformer.hpp"
#include "steerlab/random.hpp"

namespace steerlab {

struct SampleOptions {
  double temperature = 1.0;
  int max_new = 16;
  std::uint64_t seed = 0;
  TokenId stop_token = Tokenizer::kEos;
};

struct SampleResult {
  std::vector<TokenId> tokens;   // completion, including the stop token when emitted
  std::vector<double> logprobs;  // log pi(token | prefix) at temperature 1
  bool stopped = false;          // false when max_new (or the context) ran out
  // Activations over prompt + completion minus its last token: exactly the
  // rows a reverse pass through the completion's log-probability needs.
  Activations trace;
};

// Draws from softmax(logits / temperature) by inverse CDF on one uniform.
inline TokenId draw_token(std::span<const double> logits, double temperature, Rng& rng) {
  if (!(temperature > 0.0)) throw ParameterError("sample: temperature must be > 0");
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = logits[i] / temperature;
  kernel::softmax_inplace(p.data(), p.size());
  const double u = rng.uniform();
  double cum = 0.0;
  std::size_t last_nonzero = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] <= 0.0) continue;
    cum += p[i];
    last_nonzero = i;
    if (u < cum) return static_cast<TokenId>(i);
  }
  return static_cast<TokenId>(last_nonzero);
}

inline Activations prefill(const PolicyView& pv, std::span<const TokenId> prompt) {
  if (prompt.empty()) throw InputError("sample: prompt is empty");
  return forward(pv, prompt);
}

// Continues generation from a prefilled prompt state (which is consumed).
inline SampleResult sample_from(const PolicyView& pv, Activations state, const SampleOptions& opt) {
  if (!(opt.temperature > 0.0)) throw ParameterError("sample: temperature must be > 0");
  if (opt.max_new < 1) throw ParameterError("sample: max_new must be >= 1");
  if (state.length() == 0) throw InputError("sample: prompt is empty");
  const std::size_t budget = static_cast<std::size_t>(pv.params.config.max_seq_len) - state.length();
  const std::size_t max_new = std::min(static_cast<std::size_t>(opt.max_new), budget);
  if (max_new == 0) throw LengthError("sample: prompt fills the whole context");

  Rng rng(opt.seed);
  SampleResult out;
  for (std::size_t i = 0; i < max_new; ++i) {
    const auto logits = state.logits_row(state.length() - 1);
    const TokenId tok = draw_token(logits, opt.temperature, rng);
    out.tokens.push_back(tok);
    out.logprobs.push_back(logits[static_cast<std::size_t>(tok)] - kernel::logsumexp(logits.data(), logits.size()));
    if (tok == opt.stop_token) {
      out.stopped = true;
      break;
    }
    if (i + 1 < max_new) append_token(pv, state, tok);
  }
  out.trace = std::move(state);
  return out;
}

inline SampleResult sample(const PolicyView& pv, std::span<const TokenId> prompt, const SampleOptions& opt) {
  if (!(opt.temperature > 0.0)) throw ParameterError("sample: temperature must be > 0");
  if (opt.max_new < 1) throw ParameterError("sample: max_new must be >= 1");
  return sample_from(pv, prefill(pv, prompt), opt);
}

struct SequenceLogprob {
  double total = 0.0;
  std::vector<double> per_token;
};

namespace detail {

inline void check_sequence(const PolicyView& pv, std::span<const TokenId> prompt,
                           std::span<const TokenId> completion) {
  if (prompt.empty()) throw InputError("sequence_logprob: prompt is empty");
  if (completion.empty()) throw InputError("sequence_logprob: completion is empty");
  if (prompt.size() + completion.size() > static_cast<std::size_t>(pv.params.config.max_seq_len)) {
    throw LengthError("sequence_logprob: combined length " + std::to_string(prompt.size() + completion.size()) +
                      " exceeds max_seq_len " + std::to_string(pv.params.config.max_seq_len));
  }
}

inline std::vector<TokenId> concat_without_last(std::span<const TokenId> prompt, std::span<const TokenId> completion) {
  std::vector<TokenId> seq(prompt.begin(), prompt.end());
  seq.insert(seq.end(), completion.begin(), completion.end() - 1);
  return seq;
}

}  // namespace detail

// Log-probabilities read off an activation trace covering prompt + completion[:-1].
inline SequenceLogprob logprob_from_trace(const Activations& trace, std::size_t prompt_len,
                                          std::span<const TokenId> completion) {
  if (trace.length() + 1 < prompt_len + completion.size()) {
    throw LengthError("logprob_from_trace: trace too short for completion");
  }
  SequenceLogprob out;
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const auto logits = trace.logits_row(prompt_len - 1 + i);
    check_token(logits.size(), completion[i]);
    const double lp = logits[static_cast<std::size_t>(completion[i])] - kernel::logsumexp(logits.data(), logits.size());
    out.per_token.push_back(lp);
    out.total += lp;
  }
  return out;
}

// sum_t log pi(completion_t | prompt, completion_<t) at temperature 1.
inline SequenceLogprob sequence_logprob(const PolicyView& pv, std::span<const TokenId> prompt,
                                        std::span<const TokenId> completion) {
  detail::check_sequence(pv, prompt, completion);
  const auto seq = detail::concat_without_last(prompt, completion);
  return logprob_from_trace(forward(pv, seq), prompt.size(), completion);
}

// Accumulates weight * d(total logprob) into grads, using an existing trace.
inline void logprob_backward_from_trace(const PolicyView& pv, const Activations& trace, std::size_t prompt_len,
                                        std::span<const TokenId> completion, double weight, Gradients& grads) {
  if (trace.length() + 1 < prompt_len + completion.size()) {
    throw LengthError("logprob_backward: trace too short for completion");
  }
  for (std::size_t i = 0; i + 1 < completion.size(); ++i) {
    if (trace.tokens()[prompt_len + i] != completion[i]) {
      throw InputError("logprob_backward: trace does not match the completion");
    }
  }
  const std::size_t v = static_cast<std::size_t>(pv.params.config.vocab_size);
  std::vector<double> dlogits(completion.size() * v);
  for (std::size_t i = 0; i < completion.size(); ++i) {
    const auto logits = trace.logits_row(prompt_len - 1 + i);
    double* row = dlogits.data() + i * v;
    std::copy(logits.begin(), logits.end(), row);
    kernel::softmax_inplace(row, v);
    for (std::size_t j = 0; j < v; ++j) row[j] *= -weight;
    row[static_cast<std::size_t>(completion[i])] += weight;
  }
  backward(pv, trace, prompt_len - 1, dlogits, grads);
}

// Forward + reverse pass; gradients land only in the buffers present in grads.
inline SequenceLogprob sequence_logprob_backward(const PolicyView& pv, std::span<const TokenId> prompt,
                                                 std::span<const TokenId> completion, double weight,
                                                 Gradients& grads) {
  detail::check_sequence(pv, prompt, completion);
  const auto seq = detail::concat_without_last(prompt, completion);
  const Activations trace = forward(pv, seq);
  logprob_backward_from_trace(pv, trace, prompt.size(), completion, weight, grads);
  return logprob_from_trace(trace, prompt.size(), completion);
}

}  // namespace steerlab
