#pragma once

// Forward and reverse passes of the pre-norm decoder. The forward pass is
// built one position at a time (append_token), so a whole-sequence forward and
// an incremental decode run the exact same arithmetic.

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "steerlab/model/params.hpp"
#include "steerlab/model/tokenizer.hpp"
#include "steerlab/numcore/attention.hpp"
#include "steerlab/numcore/kernels.hpp"

namespace steerlab {

// Read-only view of a policy: frozen base plus optional adapters.
struct PolicyView {
  const TransformerParams& params;
  const SteeringBank* steering = nullptr;
  const LoraBank* lora = nullptr;
};

struct ForwardEngine;
struct BackwardEngine;

struct LayerActivations {
  std::vector<double> h_in;      // T x d, residual entering the layer
  std::vector<double> attn_inv;  // T, inverse rms
  std::vector<double> attn_in;   // T x d
  std::vector<double> q, k, v;   // T x d, q/k rotated
  std::vector<double> probs;     // packed causal attention weights
  std::vector<double> ctx;       // T x d
  std::vector<double> h_mid;     // T x d, after the attention residual add
  std::vector<double> mlp_inv;   // T
  std::vector<double> mlp_in;    // T x d
  std::vector<double> pre_act;   // T x d_mlp
  std::vector<double> h_mlp;     // T x d_mlp, MLP intermediate
  std::vector<double> lora_mid;  // T x r
  std::vector<double> h_out;     // T x d, layer output incl. steering
};

// Everything the reverse pass needs, for positions 0..length()-1.
class Activations {
 public:
  Activations() = default;
  explicit Activations(const ModelConfig& c)
      : config_(c),
        rope_(std::make_shared<RopeTable>(static_cast<std::size_t>(c.max_seq_len), c.head_dim(),
                                          c.rope_base)),
        layers_(static_cast<std::size_t>(c.n_layers)) {}

  std::size_t length() const { return tokens_.size(); }
  const std::vector<TokenId>& tokens() const { return tokens_; }
  const ModelConfig& config() const { return config_; }

  std::span<const double> logits_row(std::size_t t) const {
    const std::size_t v = static_cast<std::size_t>(config_.vocab_size);
    return {logits_.data() + t * v, v};
  }

  Tensor logits() const { return as_tensor(logits_, static_cast<std::size_t>(config_.vocab_size)); }
  // Residual stream at the output of layer l (after steering).
  Tensor residual(std::size_t l) const { return as_tensor(layers_.at(l).h_out, config_.d()); }
  Tensor mlp_intermediate(std::size_t l) const {
    return as_tensor(layers_.at(l).h_mlp, static_cast<std::size_t>(config_.d_mlp));
  }

  const LayerActivations& layer(std::size_t l) const { return layers_[l]; }

 private:
  friend struct ForwardEngine;
  friend struct BackwardEngine;

  Tensor as_tensor(const std::vector<double>& buf, std::size_t cols) const {
    return Tensor({length(), cols}, buf);
  }

  ModelConfig config_;
  std::shared_ptr<const RopeTable> rope_;
  std::vector<TokenId> tokens_;
  std::vector<LayerActivations> layers_;
  std::vector<double> final_inv_;
  std::vector<double> final_in_;
  std::vector<double> logits_;
};

inline void validate_policy(const PolicyView& pv) {
  validate_params(pv.params);
  if (pv.steering) validate_steering(*pv.steering, pv.params.config);
  if (pv.lora) validate_lora(*pv.lora, pv.params.config);
}

struct ForwardEngine {
  static void append(const PolicyView& pv, Activations& a, TokenId token) {
    const ModelConfig& c = pv.params.config;
    const std::size_t d = c.d(), m = static_cast<std::size_t>(c.d_mlp),
                      v = static_cast<std::size_t>(c.vocab_size),
                      heads = static_cast<std::size_t>(c.n_heads), hd = c.head_dim();
    check_token(v, token);
    const std::size_t t = a.tokens_.size();
    if (t >= static_cast<std::size_t>(c.max_seq_len)) {
      throw LengthError("sequence exceeds max_seq_len " + std::to_string(c.max_seq_len));
    }
    a.tokens_.push_back(token);
    const std::size_t r = pv.lora ? static_cast<std::size_t>(pv.lora->rank) : 0;

    std::vector<double> tmp(d);
    const double* h = pv.params.token_embedding.ptr() + static_cast<std::size_t>(token) * d;
    for (std::size_t l = 0; l < a.layers_.size(); ++l) {
      const LayerParams& P = pv.params.layers[l];
      LayerActivations& A = a.layers_[l];
      auto grow = [](std::vector<double>& b, std::size_t n) {
        b.resize(b.size() + n);
        return b.data() + b.size() - n;
      };
      double* h_in = grow(A.h_in, d);
      std::copy(h, h + d, h_in);
      double* attn_in = grow(A.attn_in, d);
      A.attn_inv.push_back(kernel::rmsnorm_row(h_in, P.attn_norm.ptr(), d, c.norm_eps, attn_in));
      double* q = grow(A.q, d);
      double* k = grow(A.k, d);
      double* vv = grow(A.v, d);
      kernel::vecmat(attn_in, d, P.wq.ptr(), d, q);
      kernel::vecmat(attn_in, d, P.wk.ptr(), d, k);
      kernel::vecmat(attn_in, d, P.wv.ptr(), d, vv);
      a.rope_->rotate(q, t, heads);
      a.rope_->rotate(k, t, heads);
      double* probs = grow(A.probs, heads * (t + 1));
      double* ctx = grow(A.ctx, d);
      kernel::attention_row(q, A.k.data(), A.v.data(), t, heads, hd, probs, ctx);
      kernel::vecmat(ctx, d, P.wo.ptr(), d, tmp.data());
      double* h_mid = grow(A.h_mid, d);
      for (std::size_t j = 0; j < d; ++j) h_mid[j] = h_in[j] + tmp[j];

      double* mlp_in = grow(A.mlp_in, d);
      A.mlp_inv.push_back(kernel::rmsnorm_row(h_mid, P.mlp_norm.ptr(), d, c.norm_eps, mlp_in));
      double* pre = grow(A.pre_act, m);
      kernel::vecmat(mlp_in, d, P.w_up.ptr(), m, pre);
      double* hm = grow(A.h_mlp, m);
      for (std::size_t j = 0; j < m; ++j) hm[j] = kernel::gelu(pre[j]);
      kernel::vecmat(hm, m, P.w_down.ptr(), d, tmp.data());
      if (pv.lora) {
        const LoraLayer& ad = pv.lora->layers[l];
        double* mid = grow(A.lora_mid, r);
        for (std::size_t i = 0; i < r; ++i) mid[i] = kernel::dot(ad.a.ptr() + i * m, hm, m);
        const double scale = pv.lora->scale();
        for (std::size_t j = 0; j < d; ++j) {
          tmp[j] += scale * kernel::dot(ad.b.ptr() + j * r, mid, r);
        }
      }
      double* h_out = grow(A.h_out, d);
      for (std::size_t j = 0; j < d; ++j) h_out[j] = h_mid[j] + tmp[j];
      if (pv.steering) kernel::add_to(h_out, pv.steering->vectors[l].ptr(), d);
      h = h_out;
    }
    a.final_in_.resize(a.final_in_.size() + d);
    double* fin = a.final_in_.data() + t * d;
    a.final_inv_.push_back(kernel::rmsnorm_row(h, pv.params.final_norm.ptr(), d, c.norm_eps, fin));
    a.logits_.resize(a.logits_.size() + v);
    double* logits = a.logits_.data() + t * v;
    for (std::size_t i = 0; i < v; ++i) logits[i] = kernel::dot(pv.params.unembedding.ptr() + i * d, fin, d);
    for (std::size_t i = 0; i < v; ++i) {
      if (!std::isfinite(logits[i])) throw NumericError("forward: non-finite logit at position " + std::to_string(t));
    }
  }
};

// Appends one token and computes its row of every activation and its logits.
inline void append_token(const PolicyView& pv, Activations& a, TokenId token) {
  ForwardEngine::append(pv, a, token);
}

inline Activations forward(const PolicyView& pv, std::span<const TokenId> tokens) {
  validate_policy(pv);
  const ModelConfig& c = pv.params.config;
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(c.max_seq_len)) {
    throw LengthError("forward: sequence length " + std::to_string(tokens.size()) +
                      " exceeds max_seq_len " + std::to_string(c.max_seq_len));
  }
  Activations a(c);
  for (TokenId tok : tokens) append_token(pv, a, tok);
  return a;
}

// out[t, :] = h[t, :] + s for every position t.
inline Tensor apply_steering(const Tensor& h, const Tensor& s) {
  if (h.rank() != 2 || s.rank() != 1 || h.cols() != s.size()) {
    throw DimensionError("apply_steering: h " + shape_str(h.shape()) + " vs s " + shape_str(s.shape()));
  }
  Tensor out = h;
  for (std::size_t t = 0; t < h.rows(); ++t) kernel::add_to(out.ptr() + t * h.cols(), s.ptr(), h.cols());
  return out;
}

// Gradient of a scalar w.r.t. s given its gradient w.r.t. the steered stream.
inline Tensor apply_steering_backward(const Tensor& dout) {
  Tensor ds({dout.cols()});
  for (std::size_t t = 0; t < dout.rows(); ++t) kernel::add_to(ds.ptr(), dout.ptr() + t * dout.cols(), dout.cols());
  return ds;
}

// Gradient buffers; only the present members are filled by the reverse pass.
struct Gradients {
  std::optional<TransformerParams> params;
  std::optional<SteeringBank> steering;
  std::optional<LoraBank> lora;

  void zero() {
    if (params) for_each_tensor(*params, [](const std::string&, Tensor& t) { t.fill(0.0); });
    if (steering) for (auto& v : steering->vectors) v.fill(0.0);
    if (lora) {
      for (auto& l : lora->layers) {
        l.a.fill(0.0);
        l.b.fill(0.0);
      }
    }
  }
};

struct BackwardEngine {
  // dlogits holds rows [row_begin, row_begin + n_rows) of dL/dlogits (V wide).
  static void run(const PolicyView& pv, const Activations& a, std::size_t row_begin,
                  std::span<const double> dlogits, Gradients& g) {
    const ModelConfig& c = pv.params.config;
    const std::size_t d = c.d(), m = static_cast<std::size_t>(c.d_mlp),
                      v = static_cast<std::size_t>(c.vocab_size),
                      heads = static_cast<std::size_t>(c.n_heads), hd = c.head_dim();
    const std::size_t T = a.length();
    const std::size_t n_rows = dlogits.size() / v;
    if (row_begin + n_rows > T) throw LengthError("backward: gradient rows exceed activation length");
    if (g.steering && !pv.steering) throw ConfigError("backward: steering gradient requested without a bank");
    if (g.lora && !pv.lora) throw ConfigError("backward: lora gradient requested without a bank");
    TransformerParams* gp = g.params ? &*g.params : nullptr;
    const std::size_t r = pv.lora ? static_cast<std::size_t>(pv.lora->rank) : 0;

    std::vector<double> dh(T * d, 0.0);
    std::vector<double> dfin(d);
    for (std::size_t i = 0; i < n_rows; ++i) {
      const std::size_t t = row_begin + i;
      const double* dl = dlogits.data() + i * v;
      kernel::vecmat(dl, v, pv.params.unembedding.ptr(), d, dfin.data());
      if (gp) kernel::outer_acc(dl, v, a.final_in_.data() + t * d, d, gp->unembedding.ptr());
      const double* h_last = a.layers_.back().h_out.data() + t * d;
      kernel::rmsnorm_row_backward(h_last, pv.params.final_norm.ptr(), d, a.final_inv_[t], dfin.data(),
                                   dh.data() + t * d, gp ? gp->final_norm.ptr() : nullptr);
    }
    // Rows after the last loss row carry no gradient (causality).
    const std::size_t T_eff = row_begin + n_rows;

    std::vector<double> dh_mid(T * d), dhm(m), dpre(m), dmid(r), dtmp(d);
    std::vector<double> dctx(T * d), dq(T * d), dk(T * d), dv(T * d), scratch(T);
    for (std::size_t l = a.layers_.size(); l-- > 0;) {
      const LayerParams& P = pv.params.layers[l];
      const LayerActivations& A = a.layers_[l];
      LayerParams* G = gp ? &gp->layers[l] : nullptr;
      const bool propagate = gp != nullptr || l > 0;

      if (g.steering) {
        double* ds = g.steering->vectors[l].ptr();
        for (std::size_t t = 0; t < T_eff; ++t) kernel::add_to(ds, dh.data() + t * d, d);
      }
      std::copy(dh.begin(), dh.begin() + static_cast<std::ptrdiff_t>(T_eff * d), dh_mid.begin());
      for (std::size_t t = 0; t < T_eff; ++t) {
        const double* dout = dh.data() + t * d;
        const double* hm = A.h_mlp.data() + t * m;
        if (pv.lora && (g.lora || propagate)) {
          const LoraLayer& ad = pv.lora->layers[l];
          const double scale = pv.lora->scale();
          const double* mid = A.lora_mid.data() + t * r;
          kernel::vecmat(dout, d, ad.b.ptr(), r, dmid.data());
          for (std::size_t i = 0; i < r; ++i) dmid[i] *= scale;
          if (g.lora) {
            LoraLayer& gl = g.lora->layers[l];
            for (std::size_t j = 0; j < d; ++j) {
              const double s = scale * dout[j];
              for (std::size_t i = 0; i < r; ++i) gl.b.ptr()[j * r + i] += s * mid[i];
            }
            kernel::outer_acc(dmid.data(), r, hm, m, gl.a.ptr());
          }
        }
        if (!propagate) continue;
        std::fill(dhm.begin(), dhm.end(), 0.0);
        kernel::vecmat_t_acc(dout, d, P.w_down.ptr(), m, dhm.data());
        if (pv.lora) {
          const LoraLayer& ad = pv.lora->layers[l];
          for (std::size_t i = 0; i < r; ++i) {
            const double di = dmid[i];
            const double* arow = ad.a.ptr() + i * m;
            for (std::size_t j = 0; j < m; ++j) dhm[j] += di * arow[j];
          }
        }
        if (G) kernel::outer_acc(hm, m, dout, d, G->w_down.ptr());
        const double* pre = A.pre_act.data() + t * m;
        for (std::size_t j = 0; j < m; ++j) dpre[j] = dhm[j] * kernel::gelu_grad(pre[j]);
        std::fill(dtmp.begin(), dtmp.end(), 0.0);
        kernel::vecmat_t_acc(dpre.data(), m, P.w_up.ptr(), d, dtmp.data());
        if (G) kernel::outer_acc(A.mlp_in.data() + t * d, d, dpre.data(), m, G->w_up.ptr());
        kernel::rmsnorm_row_backward(A.h_mid.data() + t * d, P.mlp_norm.ptr(), d, A.mlp_inv[t], dtmp.data(),
                                     dh_mid.data() + t * d, G ? G->mlp_norm.ptr() : nullptr);
      }
      if (!propagate) break;

      // attention sublayer: h_mid = h_in + attn(h_in)
      std::fill(dctx.begin(), dctx.end(), 0.0);
      std::fill(dq.begin(), dq.end(), 0.0);
      std::fill(dk.begin(), dk.end(), 0.0);
      std::fill(dv.begin(), dv.end(), 0.0);
      for (std::size_t t = 0; t < T_eff; ++t) {
        const double* dy = dh_mid.data() + t * d;
        kernel::vecmat_t_acc(dy, d, P.wo.ptr(), d, dctx.data() + t * d);
        if (G) kernel::outer_acc(A.ctx.data() + t * d, d, dy, d, G->wo.ptr());
      }
      for (std::size_t t = T_eff; t-- > 0;) {
        kernel::attention_row_backward(A.q.data() + t * d, A.k.data(), A.v.data(),
                                       A.probs.data() + kernel::causal_probs_offset(t, heads),
                                       dctx.data() + t * d, t, heads, hd, dq.data() + t * d, dk.data(),
                                       dv.data(), scratch.data());
      }
      // dh_in starts as the residual path
      std::copy(dh_mid.begin(), dh_mid.begin() + static_cast<std::ptrdiff_t>(T_eff * d), dh.begin());
      for (std::size_t t = 0; t < T_eff; ++t) {
        double* dqt = dq.data() + t * d;
        double* dkt = dk.data() + t * d;
        const double* dvt = dv.data() + t * d;
        a.rope_->rotate_inverse(dqt, t, heads);
        a.rope_->rotate_inverse(dkt, t, heads);
        std::fill(dtmp.begin(), dtmp.end(), 0.0);
        kernel::vecmat_t_acc(dqt, d, P.wq.ptr(), d, dtmp.data());
        kernel::vecmat_t_acc(dkt, d, P.wk.ptr(), d, dtmp.data());
        kernel::vecmat_t_acc(dvt, d, P.wv.ptr(), d, dtmp.data());
        if (G) {
          const double* xin = A.attn_in.data() + t * d;
          kernel::outer_acc(xin, d, dqt, d, G->wq.ptr());
          kernel::outer_acc(xin, d, dkt, d, G->wk.ptr());
          kernel::outer_acc(xin, d, dvt, d, G->wv.ptr());
        }
        kernel::rmsnorm_row_backward(A.h_in.data() + t * d, P.attn_norm.ptr(), d, A.attn_inv[t], dtmp.data(),
                                     dh.data() + t * d, G ? G->attn_norm.ptr() : nullptr);
      }
    }
    if (gp) {
      for (std::size_t t = 0; t < T_eff; ++t) {
        const std::size_t tok = static_cast<std::size_t>(a.tokens_[t]);
        kernel::add_to(gp->token_embedding.ptr() + tok * d, dh.data() + t * d, d);
      }
    }
  }
};

// Reverse pass from an arbitrary set of logit-gradient rows.
inline void backward(const PolicyView& pv, const Activations& a, std::size_t row_begin,
                     std::span<const double> dlogits, Gradients& grads) {
  BackwardEngine::run(pv, a, row_begin, dlogits, grads);
}

}  // namespace steerlab
