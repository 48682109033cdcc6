#pragma once

// Next-token cross-entropy training of a base model on the synthetic corpus.

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <vector>

#include "steerlab/adapt/regime.hpp"
#include "steerlab/model/sampling.hpp"
#include "steerlab/rl/optimizer.hpp"
#include "steerlab/tasks/arith.hpp"

namespace steerlab {

struct PretrainConfig {
  int steps = 6000;
  int batch_size = 16;
  double lr = 3e-3;
  int warmup = 50;
  double min_lr_ratio = 0.1;
  double clip_norm = 1.0;
  // Decoupled decay on matrices. Every read of the residual stream goes through
  // RMSNorm, so its overall scale is free; decay keeps it small enough that an
  // additive steering vector stays comparable to it.
  double weight_decay = 1.0;
  double init_std = 0.02;
  double heldout_fraction = 0.05;
  std::uint64_t seed = 0;
};

struct PretrainReport {
  double initial_heldout_loss = 0.0;
  double final_heldout_loss = 0.0;
  std::vector<double> train_loss;  // per step, mean nats per token
};

inline std::vector<TokenId> document_tokens(const Tokenizer& tok, const Document& d) {
  std::vector<TokenId> ids{Tokenizer::kBos};
  const auto body = tok.encode(d.text());
  ids.insert(ids.end(), body.begin(), body.end());
  ids.push_back(Tokenizer::kEos);
  return ids;
}

// Linear warmup, then cosine decay to min_lr_ratio * lr.
inline double pretrain_lr(const PretrainConfig& c, int step) {
  if (c.warmup > 0 && step < c.warmup) return c.lr * static_cast<double>(step + 1) / c.warmup;
  const double span = std::max(1, c.steps - c.warmup);
  const double progress = std::min(1.0, static_cast<double>(step - c.warmup) / span);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return c.lr * (c.min_lr_ratio + (1.0 - c.min_lr_ratio) * cosine);
}

// Mean negative log-likelihood per predicted token.
inline double corpus_loss(const PolicyView& pv, const std::vector<std::vector<TokenId>>& docs) {
  double nll = 0.0;
  std::size_t count = 0;
  for (const auto& d : docs) {
    const std::span<const TokenId> all(d);
    const auto lp = sequence_logprob(pv, all.first(1), all.subspan(1));
    nll -= lp.total;
    count += d.size() - 1;
  }
  return nll / static_cast<double>(count);
}

using PretrainProgress = std::function<void(int step, double loss)>;

inline TransformerParams pretrain(const std::vector<Document>& corpus, const ModelConfig& model,
                                  const PretrainConfig& cfg, PretrainReport* report = nullptr,
                                  const PretrainProgress& progress = {}) {
  if (corpus.empty()) throw InputError("pretrain: corpus is empty");
  if (cfg.steps < 0 || cfg.batch_size < 1 || !(cfg.lr > 0.0)) throw ConfigError("pretrain: invalid schedule");
  const Tokenizer tok;
  if (model.vocab_size != tok.size()) {
    throw ConfigError("pretrain: model vocab_size " + std::to_string(model.vocab_size) + " != tokenizer size " +
                      std::to_string(tok.size()));
  }
  std::vector<std::vector<TokenId>> docs;
  docs.reserve(corpus.size());
  for (const auto& d : corpus) {
    docs.push_back(document_tokens(tok, d));
    if (docs.back().size() > static_cast<std::size_t>(model.max_seq_len)) {
      throw LengthError("pretrain: document longer than max_seq_len");
    }
  }
  std::size_t n_heldout = static_cast<std::size_t>(cfg.heldout_fraction * static_cast<double>(docs.size()));
  n_heldout = std::min(std::max<std::size_t>(n_heldout, 1), docs.size() > 1 ? docs.size() - 1 : 0);
  const std::vector<std::vector<TokenId>> heldout(docs.end() - static_cast<std::ptrdiff_t>(n_heldout), docs.end());
  const std::size_t n_train = docs.size() - n_heldout;

  Policy policy{init_params(model, derive_seed(cfg.seed, 0), cfg.init_std), std::nullopt, std::nullopt};
  PretrainReport rep;
  if (!heldout.empty()) rep.initial_heldout_loss = corpus_loss(policy.view(), heldout);

  auto params = trainable_parameters(TrainRegime::full, policy);
  OptimizerState state = OptimizerState::for_params(params);
  Rng rng(derive_seed(cfg.seed, 1));
  for (int step = 0; step < cfg.steps; ++step) {
    Gradients grads = make_gradients(TrainRegime::full, policy);
    std::vector<std::size_t> batch;
    std::size_t tokens = 0;
    for (int b = 0; b < cfg.batch_size; ++b) {
      batch.push_back(static_cast<std::size_t>(rng.below(n_train)));
      tokens += docs[batch.back()].size() - 1;
    }
    const double weight = -1.0 / static_cast<double>(tokens);
    double nll = 0.0;
    const PolicyView pv = policy.view();
    for (std::size_t idx : batch) {
      const std::span<const TokenId> all(docs[idx]);
      nll -= sequence_logprob_backward(pv, all.first(1), all.subspan(1), weight, grads).total;
    }
    const double loss = nll / static_cast<double>(tokens);
    if (!std::isfinite(loss)) throw NumericError("pretrain: loss diverged at step " + std::to_string(step));
    auto grefs = gradient_refs(grads);
    const double gn = global_norm(grefs);
    if (cfg.clip_norm > 0.0 && gn > cfg.clip_norm) {
      const double s = cfg.clip_norm / gn;
      for (auto& g : grefs) {
        for (double& x : g.tensor->data()) x *= s;
      }
    }
    const double lr = pretrain_lr(cfg, step);
    optimizer_step(state, params, grefs, lr);
    if (cfg.weight_decay > 0.0) {
      const double keep = 1.0 - lr * cfg.weight_decay;
      for (auto& p : params) {
        if (p.tensor->rank() != 2) continue;
        for (double& x : p.tensor->data()) x *= keep;
      }
    }
    rep.train_loss.push_back(loss);
    if (progress) progress(step, loss);
  }
  if (!heldout.empty()) rep.final_heldout_loss = corpus_loss(policy.view(), heldout);
  if (report) *report = rep;
  return std::move(policy.params);
}

}  // namespace steerlab
