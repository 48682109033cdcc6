#pragma once

#include <cmath>
#include <cstddef>
#include <vector>

#include "steerlab/numcore/kernels.hpp"

namespace steerlab {

inline constexpr double kDefaultRopeBase = 10000.0;

// cos/sin of pos * base^(-2i/head_dim) for every position and pair index.
class RopeTable {
 public:
  RopeTable() = default;
  RopeTable(std::size_t max_len, std::size_t head_dim, double base)
      : half_(head_dim / 2), cos_(max_len * half_), sin_(max_len * half_) {
    for (std::size_t i = 0; i < half_; ++i) {
      const double theta =
          std::pow(base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
      for (std::size_t p = 0; p < max_len; ++p) {
        const double angle = static_cast<double>(p) * theta;
        cos_[p * half_ + i] = std::cos(angle);
        sin_[p * half_ + i] = std::sin(angle);
      }
    }
  }

  std::size_t half() const { return half_; }
  std::size_t max_len() const { return half_ ? cos_.size() / half_ : 0; }
  const double* cos_at(std::size_t pos) const { return cos_.data() + pos * half_; }
  const double* sin_at(std::size_t pos) const { return sin_.data() + pos * half_; }

  void rotate(double* row, std::size_t pos, std::size_t n_heads) const {
    for (std::size_t h = 0; h < n_heads; ++h) {
      kernel::rope_rotate(row + h * 2 * half_, cos_at(pos), sin_at(pos), half_);
    }
  }
  void rotate_inverse(double* row, std::size_t pos, std::size_t n_heads) const {
    for (std::size_t h = 0; h < n_heads; ++h) {
      kernel::rope_rotate_inverse(row + h * 2 * half_, cos_at(pos), sin_at(pos), half_);
    }
  }

 private:
  std::size_t half_ = 0;
  std::vector<double> cos_;
  std::vector<double> sin_;
};

namespace kernel {

// Scaled dot-product attention of query row `pos` over key/value rows 0..pos.
// q, keys and values are already projected (and rotated). probs receives
// n_heads * (pos + 1) weights, head-major; ctx receives d values.
inline void attention_row(const double* q, const double* keys, const double* values,
                          std::size_t pos, std::size_t n_heads, std::size_t head_dim,
                          double* probs, double* ctx) {
  const std::size_t d = n_heads * head_dim;
  const std::size_t n = pos + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t h = 0; h < n_heads; ++h) {
    double* p = probs + h * n;
    const double* qh = q + h * head_dim;
    for (std::size_t s = 0; s < n; ++s) p[s] = dot(qh, keys + s * d + h * head_dim, head_dim) * scale;
    softmax_inplace(p, n);
    double* c = ctx + h * head_dim;
    std::fill(c, c + head_dim, 0.0);
    for (std::size_t s = 0; s < n; ++s) {
      const double ps = p[s];
      const double* v = values + s * d + h * head_dim;
      for (std::size_t j = 0; j < head_dim; ++j) c[j] += ps * v[j];
    }
  }
}

// Offset of row `pos` inside a packed causal probability buffer.
inline std::size_t causal_probs_offset(std::size_t pos, std::size_t n_heads) {
  return n_heads * pos * (pos + 1) / 2;
}

// Adjoint of attention_row for query row `pos`. Accumulates into dq (row pos),
// dkeys and dvalues (rows 0..pos). dq/dk are w.r.t. the rotated projections.
inline void attention_row_backward(const double* q, const double* keys, const double* values,
                                   const double* probs, const double* dctx, std::size_t pos,
                                   std::size_t n_heads, std::size_t head_dim, double* dq,
                                   double* dkeys, double* dvalues, double* scratch) {
  const std::size_t d = n_heads * head_dim;
  const std::size_t n = pos + 1;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t h = 0; h < n_heads; ++h) {
    const double* p = probs + h * n;
    const double* dc = dctx + h * head_dim;
    double* ds = scratch;
    double weighted = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
      ds[s] = dot(dc, values + s * d + h * head_dim, head_dim);
      weighted += p[s] * ds[s];
      double* dv = dvalues + s * d + h * head_dim;
      for (std::size_t j = 0; j < head_dim; ++j) dv[j] += p[s] * dc[j];
    }
    const double* qh = q + h * head_dim;
    double* dqh = dq + h * head_dim;
    for (std::size_t s = 0; s < n; ++s) {
      const double g = p[s] * (ds[s] - weighted) * scale;
      if (g == 0.0) continue;
      const double* kh = keys + s * d + h * head_dim;
      double* dkh = dkeys + s * d + h * head_dim;
      for (std::size_t j = 0; j < head_dim; ++j) {
        dqh[j] += g * kh[j];
        dkh[j] += g * qh[j];
      }
    }
  }
}

}  // namespace kernel
}  // namespace steerlab
