#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "steerlab/numcore/attention.hpp"
#include "steerlab/numcore/kernels.hpp"
#include "steerlab/numcore/tensor.hpp"

namespace steerlab {

inline constexpr double kDefaultNormEps = 1e-6;

namespace detail {

inline void require_matrix(const Tensor& t, const char* op, const char* name) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + ": " + name + " must be a matrix, got " +
                         shape_str(t.shape()));
  }
}

inline void require_vector(const Tensor& t, std::size_t n, const char* op, const char* name) {
  if (t.rank() != 1 || t.size() != n) {
    throw DimensionError(std::string(op) + ": " + name + " must have shape [" + std::to_string(n) +
                         "], got " + shape_str(t.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// linear

struct LinearGrads {
  Tensor dx;
  Tensor dw;
  std::optional<Tensor> dbias;
};

inline void check_linear_shapes(const Tensor& x, const Tensor& w, const Tensor* bias) {
  detail::require_matrix(x, "linear", "x");
  detail::require_matrix(w, "linear", "W");
  if (x.cols() != w.rows()) {
    throw DimensionError("linear: inner dimensions disagree, x " + shape_str(x.shape()) + " vs W " +
                         shape_str(w.shape()));
  }
  if (bias) detail::require_vector(*bias, w.cols(), "linear", "bias");
}

// out = x W (+ bias), x: m x k, W: k x n.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor* bias = nullptr) {
  check_linear_shapes(x, w, bias);
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    kernel::vecmat(x.ptr() + i * k, k, w.ptr(), n, out.ptr() + i * n);
    if (bias) kernel::add_to(out.ptr() + i * n, bias->ptr(), n);
  }
  require_finite(out, "linear");
  return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  return linear(x, w, &bias);
}

inline LinearGrads linear_backward(const Tensor& x, const Tensor& w, bool has_bias,
                                   const Tensor& dout) {
  check_linear_shapes(x, w, nullptr);
  const std::size_t m = x.rows(), k = x.cols(), n = w.cols();
  if (dout.shape() != Shape{m, n}) {
    throw DimensionError("linear_backward: dOut " + shape_str(dout.shape()) + " expected " +
                         shape_str({m, n}));
  }
  LinearGrads g{Tensor({m, k}), Tensor({k, n}), std::nullopt};
  if (has_bias) g.dbias = Tensor({n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* dy = dout.ptr() + i * n;
    kernel::vecmat_t_acc(dy, n, w.ptr(), k, g.dx.ptr() + i * k);
    kernel::outer_acc(x.ptr() + i * k, k, dy, n, g.dw.ptr());
    if (has_bias) kernel::add_to(g.dbias->ptr(), dy, n);
  }
  return g;
}

// ---------------------------------------------------------------------------
// rmsnorm

struct RmsNormGrads {
  Tensor dx;
  Tensor dgain;
};

inline double resolve_norm_eps(double eps) {
  if (eps < 0.0 || std::isnan(eps)) throw ParameterError("rmsnorm: eps must be positive");
  return eps == 0.0 ? kDefaultNormEps : eps;
}

inline Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps = kDefaultNormEps) {
  detail::require_matrix(x, "rmsnorm", "x");
  detail::require_vector(gain, x.cols(), "rmsnorm", "gain");
  eps = resolve_norm_eps(eps);
  const std::size_t m = x.rows(), d = x.cols();
  Tensor out({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    kernel::rmsnorm_row(x.ptr() + i * d, gain.ptr(), d, eps, out.ptr() + i * d);
  }
  require_finite(out, "rmsnorm");
  return out;
}

inline RmsNormGrads rmsnorm_backward(const Tensor& x, const Tensor& gain, double eps,
                                     const Tensor& dout) {
  detail::require_matrix(x, "rmsnorm_backward", "x");
  detail::require_vector(gain, x.cols(), "rmsnorm_backward", "gain");
  x.require_same_shape(dout, "rmsnorm_backward");
  eps = resolve_norm_eps(eps);
  const std::size_t m = x.rows(), d = x.cols();
  RmsNormGrads g{Tensor({m, d}), Tensor({d})};
  std::vector<double> scratch(d);
  for (std::size_t i = 0; i < m; ++i) {
    const double inv = kernel::rmsnorm_row(x.ptr() + i * d, gain.ptr(), d, eps, scratch.data());
    kernel::rmsnorm_row_backward(x.ptr() + i * d, gain.ptr(), d, inv, dout.ptr() + i * d,
                                 g.dx.ptr() + i * d, g.dgain.ptr());
  }
  return g;
}

// ---------------------------------------------------------------------------
// causal multi-head attention with rotary positions

struct AttentionWeights {
  Tensor wq, wk, wv, wo;
};

struct AttentionGrads {
  Tensor dx;
  Tensor dwq, dwk, dwv, dwo;
};

namespace detail {

inline void check_attention(const Tensor& x, const AttentionWeights& w, std::size_t n_heads) {
  require_matrix(x, "causal_attention", "x");
  const std::size_t d = x.cols();
  if (n_heads == 0 || d % n_heads != 0) {
    throw ConfigError("causal_attention: hidden size " + std::to_string(d) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if ((d / n_heads) % 2 != 0) {
    throw ConfigError("causal_attention: head dimension must be even for rotary positions");
  }
  for (const Tensor* m : {&w.wq, &w.wk, &w.wv, &w.wo}) {
    if (m->shape() != Shape{d, d}) {
      throw DimensionError("causal_attention: projection " + shape_str(m->shape()) +
                           " expected " + shape_str({d, d}));
    }
  }
}

struct AttentionForward {
  Tensor q, k, v;  // rotated q and k
  std::vector<double> probs;
  Tensor ctx;
  Tensor out;
};

inline AttentionForward attention_forward(const Tensor& x, const AttentionWeights& w,
                                          std::size_t n_heads, double rope_base) {
  check_attention(x, w, n_heads);
  const std::size_t t_len = x.rows(), d = x.cols(), hd = d / n_heads;
  const RopeTable rope(t_len, hd, rope_base);
  AttentionForward f{Tensor({t_len, d}), Tensor({t_len, d}), Tensor({t_len, d}),
                     std::vector<double>(kernel::causal_probs_offset(t_len, n_heads)),
                     Tensor({t_len, d}), Tensor({t_len, d})};
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* xr = x.ptr() + t * d;
    kernel::vecmat(xr, d, w.wq.ptr(), d, f.q.ptr() + t * d);
    kernel::vecmat(xr, d, w.wk.ptr(), d, f.k.ptr() + t * d);
    kernel::vecmat(xr, d, w.wv.ptr(), d, f.v.ptr() + t * d);
    rope.rotate(f.q.ptr() + t * d, t, n_heads);
    rope.rotate(f.k.ptr() + t * d, t, n_heads);
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    kernel::attention_row(f.q.ptr() + t * d, f.k.ptr(), f.v.ptr(), t, n_heads, hd,
                          f.probs.data() + kernel::causal_probs_offset(t, n_heads),
                          f.ctx.ptr() + t * d);
    kernel::vecmat(f.ctx.ptr() + t * d, d, w.wo.ptr(), d, f.out.ptr() + t * d);
  }
  return f;
}

}  // namespace detail

inline Tensor causal_attention(const Tensor& x, const AttentionWeights& w, std::size_t n_heads,
                               double rope_base = kDefaultRopeBase) {
  auto f = detail::attention_forward(x, w, n_heads, rope_base);
  require_finite(f.out, "causal_attention");
  return std::move(f.out);
}

inline AttentionGrads causal_attention_backward(const Tensor& x, const AttentionWeights& w,
                                                std::size_t n_heads, const Tensor& dout,
                                                double rope_base = kDefaultRopeBase) {
  const auto f = detail::attention_forward(x, w, n_heads, rope_base);
  x.require_same_shape(dout, "causal_attention_backward");
  const std::size_t t_len = x.rows(), d = x.cols(), hd = d / n_heads;
  const RopeTable rope(t_len, hd, rope_base);
  AttentionGrads g{Tensor({t_len, d}), Tensor({d, d}), Tensor({d, d}), Tensor({d, d}),
                   Tensor({d, d})};
  Tensor dctx({t_len, d}), dq({t_len, d}), dk({t_len, d}), dv({t_len, d});
  std::vector<double> scratch(t_len);
  for (std::size_t t = 0; t < t_len; ++t) {
    const double* dy = dout.ptr() + t * d;
    kernel::vecmat_t_acc(dy, d, w.wo.ptr(), d, dctx.ptr() + t * d);
    kernel::outer_acc(f.ctx.ptr() + t * d, d, dy, d, g.dwo.ptr());
  }
  for (std::size_t t = t_len; t-- > 0;) {
    kernel::attention_row_backward(f.q.ptr() + t * d, f.k.ptr(), f.v.ptr(),
                                   f.probs.data() + kernel::causal_probs_offset(t, n_heads),
                                   dctx.ptr() + t * d, t, n_heads, hd, dq.ptr() + t * d, dk.ptr(),
                                   dv.ptr(), scratch.data());
  }
  for (std::size_t t = 0; t < t_len; ++t) {
    rope.rotate_inverse(dq.ptr() + t * d, t, n_heads);
    rope.rotate_inverse(dk.ptr() + t * d, t, n_heads);
    const double* xr = x.ptr() + t * d;
    double* dxr = g.dx.ptr() + t * d;
    kernel::vecmat_t_acc(dq.ptr() + t * d, d, w.wq.ptr(), d, dxr);
    kernel::vecmat_t_acc(dk.ptr() + t * d, d, w.wk.ptr(), d, dxr);
    kernel::vecmat_t_acc(dv.ptr() + t * d, d, w.wv.ptr(), d, dxr);
    kernel::outer_acc(xr, d, dq.ptr() + t * d, d, g.dwq.ptr());
    kernel::outer_acc(xr, d, dk.ptr() + t * d, d, g.dwk.ptr());
    kernel::outer_acc(xr, d, dv.ptr() + t * d, d, g.dwv.ptr());
  }
  return g;
}

// ---------------------------------------------------------------------------
// softmax / log-probabilities

inline Tensor softmax(const Tensor& logits, double temperature = 1.0) {
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be > 0");
  if (logits.rank() != 1) throw DimensionError("softmax: expected a vector, got " + shape_str(logits.shape()));
  Tensor p({logits.size()});
  for (std::size_t i = 0; i < logits.size(); ++i) p[i] = logits[i] / temperature;
  kernel::softmax_inplace(p.ptr(), p.size());
  require_finite(p, "softmax");
  return p;
}

inline void check_token(std::size_t vocab, long long token) {
  if (token < 0 || static_cast<std::size_t>(token) >= vocab) {
    throw IndexError("token id " + std::to_string(token) + " outside vocabulary of size " +
                     std::to_string(vocab));
  }
}

// log softmax(logits)[token] = logits[token] - logsumexp(logits).
inline double token_logprob(const Tensor& logits, long long token) {
  if (logits.rank() != 1) throw DimensionError("token_logprob: expected a vector");
  check_token(logits.size(), token);
  const double lp = logits[static_cast<std::size_t>(token)] - kernel::logsumexp(logits.ptr(), logits.size());
  if (!std::isfinite(lp)) throw NumericError("token_logprob: non-finite result");
  return lp;
}

// d/dlogits of upstream * token_logprob: upstream * (onehot(token) - softmax(logits)).
inline Tensor token_logprob_backward(const Tensor& logits, long long token, double upstream = 1.0) {
  if (logits.rank() != 1) throw DimensionError("token_logprob_backward: expected a vector");
  check_token(logits.size(), token);
  Tensor g = softmax(logits, 1.0);
  for (std::size_t i = 0; i < g.size(); ++i) g[i] = -upstream * g[i];
  g[static_cast<std::size_t>(token)] += upstream;
  return g;
}

}  // namespace steerlab
