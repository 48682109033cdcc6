#pragma once

// Raw row kernels shared by the public ops and the transformer engine. Every
// reduction runs in a fixed order so results are bit-reproducible and the
// incremental (one row at a time) and whole-sequence paths agree exactly.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>

namespace steerlab::kernel {

// Fixed 8-lane split; lanes are combined pairwise at the end.
inline double dot(const double* a, const double* b, std::size_t n) {
  double acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[j + l] * b[j + l];
  }
  for (std::size_t l = 0; j < n; ++j, ++l) acc[l] += a[j] * b[j];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
}

// out[j] = sum_t x[t] * W[t, j], t ascending. W is k x n.
inline void vecmat(const double* x, std::size_t k, const double* w, std::size_t n, double* out) {
  std::fill(out, out + n, 0.0);
  for (std::size_t t = 0; t < k; ++t) {
    const double xt = x[t];
    const double* row = w + t * n;
    for (std::size_t j = 0; j < n; ++j) out[j] += xt * row[j];
  }
}

// out[t] += sum_j W[t, j] * dy[j]. W is k x n.
inline void vecmat_t_acc(const double* dy, std::size_t n, const double* w, std::size_t k,
                         double* out) {
  for (std::size_t t = 0; t < k; ++t) out[t] += dot(w + t * n, dy, n);
}

// dW[t, j] += x[t] * dy[j].
inline void outer_acc(const double* x, std::size_t k, const double* dy, std::size_t n, double* dw) {
  for (std::size_t t = 0; t < k; ++t) {
    const double xt = x[t];
    if (xt == 0.0) continue;
    double* row = dw + t * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += xt * dy[j];
  }
}

inline void add_to(double* dst, const double* src, std::size_t n) {
  for (std::size_t j = 0; j < n; ++j) dst[j] += src[j];
}

// y = x / sqrt(mean(x^2) + eps) * gain; returns the inverse rms.
inline double rmsnorm_row(const double* x, const double* gain, std::size_t d, double eps,
                          double* y) {
  const double ms = dot(x, x, d) / static_cast<double>(d);
  const double inv = 1.0 / std::sqrt(ms + eps);
  for (std::size_t j = 0; j < d; ++j) y[j] = x[j] * inv * gain[j];
  return inv;
}

// Adjoint of rmsnorm_row. Accumulates into dx and (optionally) dgain.
inline void rmsnorm_row_backward(const double* x, const double* gain, std::size_t d, double inv,
                                 const double* dy, double* dx, double* dgain) {
  double proj = 0.0;
  for (std::size_t j = 0; j < d; ++j) proj += gain[j] * dy[j] * x[j];
  const double c = inv * inv * inv * proj / static_cast<double>(d);
  for (std::size_t j = 0; j < d; ++j) dx[j] += inv * gain[j] * dy[j] - c * x[j];
  if (dgain) {
    for (std::size_t j = 0; j < d; ++j) dgain[j] += dy[j] * x[j] * inv;
  }
}

inline constexpr double kInvSqrt2 = 0.5 * std::numbers::sqrt2;

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

inline double gelu_grad(double x) {
  constexpr double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
  return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
}

// Rotates consecutive pairs (2i, 2i+1) of one head in place.
// cs/sn hold cos/sin of pos * theta_i for i < head_dim/2.
inline void rope_rotate(double* v, const double* cs, const double* sn, std::size_t half) {
  for (std::size_t i = 0; i < half; ++i) {
    const double a = v[2 * i];
    const double b = v[2 * i + 1];
    v[2 * i] = a * cs[i] - b * sn[i];
    v[2 * i + 1] = a * sn[i] + b * cs[i];
  }
}

inline void rope_rotate_inverse(double* v, const double* cs, const double* sn, std::size_t half) {
  for (std::size_t i = 0; i < half; ++i) {
    const double a = v[2 * i];
    const double b = v[2 * i + 1];
    v[2 * i] = a * cs[i] + b * sn[i];
    v[2 * i + 1] = -a * sn[i] + b * cs[i];
  }
}

// In-place stable softmax of n scores. Returns nothing; p sums to 1.
inline void softmax_inplace(double* p, std::size_t n) {
  double m = p[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, p[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    p[i] = std::exp(p[i] - m);
    s += p[i];
  }
  for (std::size_t i = 0; i < n; ++i) p[i] /= s;
}

inline double logsumexp(const double* x, std::size_t n) {
  double m = x[0];
  for (std::size_t i = 1; i < n; ++i) m = std::max(m, x[i]);
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::exp(x[i] - m);
  return m + std::log(s);
}

}  // namespace steerlab::kernel
