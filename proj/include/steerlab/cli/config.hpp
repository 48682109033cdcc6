#pragma once

// One JSON file resolves every knob of a run. Unknown keys are rejected so typos
// do not silently fall back to defaults.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <optional>
#include <set>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "steerlab/adapt/checkpoint.hpp"
#include "steerlab/rl/pretrain.hpp"
#include "steerlab/rl/train.hpp"
#include "steerlab/tasks/arith.hpp"

namespace steerlab {

struct EvalConfig {
  int tasks = 200;
  int k = kDefaultMeanAtK;
  double temperature = 1.0;
  int max_new_tokens = 16;
};

struct RunConfig {
  std::uint64_t seed = 0;
  ModelConfig model;
  CorpusConfig corpus;
  PretrainConfig pretrain;
  TrainConfig train;
  EvalConfig eval;
  bool llm_clustering = false;
};

namespace detail {

using json = nlohmann::json;

inline void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  const std::set<std::string> ok(allowed.begin(), allowed.end());
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!ok.count(it.key())) throw ConfigError(where + ": unknown key '" + it.key() + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& dst, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

}  // namespace detail

inline OperandRange operand_range_from_json(const nlohmann::json& j, OperandRange r = {}) {
  detail::check_keys(j, "corpus.tasks", {"a_min", "a_max", "b_min", "b_max", "operators", "eval_percent"});
  detail::read(j, "a_min", r.a_min, "corpus.tasks");
  detail::read(j, "a_max", r.a_max, "corpus.tasks");
  detail::read(j, "b_min", r.b_min, "corpus.tasks");
  detail::read(j, "b_max", r.b_max, "corpus.tasks");
  detail::read(j, "operators", r.operators, "corpus.tasks");
  detail::read(j, "eval_percent", r.eval_percent, "corpus.tasks");
  r.validate();
  return r;
}

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  using detail::read;
  detail::check_keys(j, "config", {"seed", "model", "corpus", "pretrain", "train", "eval", "llm_clustering"});
  if (!j.contains("seed")) throw ConfigError("config: 'seed' is required");
  RunConfig c;
  read(j, "seed", c.seed, "config");
  read(j, "llm_clustering", c.llm_clustering, "config");
  if (j.contains("model")) {
    detail::check_keys(j["model"], "model",
                       {"vocab_size", "d_model", "n_layers", "n_heads", "d_mlp", "max_seq_len", "rope_base", "norm_eps"});
    c.model = model_config_from_json(j["model"]);
  }
  if (j.contains("corpus")) {
    const auto& k = j["corpus"];
    detail::check_keys(k, "corpus", {"documents", "style_weights", "tasks"});
    read(k, "documents", c.corpus.documents, "corpus");
    if (k.contains("style_weights")) {
      const auto& w = k["style_weights"];
      detail::check_keys(w, "corpus.style_weights", {"plain", "trace", "boxed", "trace_boxed"});
      read(w, "plain", c.corpus.style_weights[0], "corpus.style_weights");
      read(w, "trace", c.corpus.style_weights[1], "corpus.style_weights");
      read(w, "boxed", c.corpus.style_weights[2], "corpus.style_weights");
      read(w, "trace_boxed", c.corpus.style_weights[3], "corpus.style_weights");
    }
    if (k.contains("tasks")) c.corpus.range = operand_range_from_json(k["tasks"]);
  }
  if (j.contains("pretrain")) {
    const auto& p = j["pretrain"];
    detail::check_keys(p, "pretrain",
                       {"steps", "batch_size", "lr", "warmup", "min_lr_ratio", "clip_norm", "weight_decay", "init_std", "heldout_fraction"});
    read(p, "steps", c.pretrain.steps, "pretrain");
    read(p, "batch_size", c.pretrain.batch_size, "pretrain");
    read(p, "lr", c.pretrain.lr, "pretrain");
    read(p, "warmup", c.pretrain.warmup, "pretrain");
    read(p, "min_lr_ratio", c.pretrain.min_lr_ratio, "pretrain");
    read(p, "clip_norm", c.pretrain.clip_norm, "pretrain");
    read(p, "weight_decay", c.pretrain.weight_decay, "pretrain");
    read(p, "init_std", c.pretrain.init_std, "pretrain");
    read(p, "heldout_fraction", c.pretrain.heldout_fraction, "pretrain");
  }
  if (j.contains("train")) {
    const auto& t = j["train"];
    detail::check_keys(t, "train",
                       {"learning_rate", "num_generations", "batch_size", "temperature", "max_new_tokens", "total_steps",
                        "checkpoint_every", "beta1", "beta2", "eps", "lora_rank", "lora_alpha"});
    if (t.contains("learning_rate") && !t["learning_rate"].is_null()) {
      double lr = 0.0;
      read(t, "learning_rate", lr, "train");
      c.train.learning_rate = lr;
    }
    read(t, "num_generations", c.train.num_generations, "train");
    read(t, "batch_size", c.train.batch_size, "train");
    read(t, "temperature", c.train.temperature, "train");
    read(t, "max_new_tokens", c.train.max_new_tokens, "train");
    read(t, "total_steps", c.train.total_steps, "train");
    read(t, "checkpoint_every", c.train.checkpoint_every, "train");
    read(t, "beta1", c.train.optimizer.beta1, "train");
    read(t, "beta2", c.train.optimizer.beta2, "train");
    read(t, "eps", c.train.optimizer.eps, "train");
    read(t, "lora_rank", c.train.lora_rank, "train");
    read(t, "lora_alpha", c.train.lora_alpha, "train");
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    detail::check_keys(e, "eval", {"tasks", "k", "temperature", "max_new_tokens"});
    read(e, "tasks", c.eval.tasks, "eval");
    read(e, "k", c.eval.k, "eval");
    read(e, "temperature", c.eval.temperature, "eval");
    read(e, "max_new_tokens", c.eval.max_new_tokens, "eval");
  }

  // every stream hangs off the single top-level seed
  c.corpus.seed = derive_seed(c.seed, 1);
  c.pretrain.seed = derive_seed(c.seed, 2);
  c.train.seed = derive_seed(c.seed, 3);
  c.train.tasks = c.corpus.range;

  c.corpus.validate();
  c.train.validate();
  if (c.pretrain.steps < 0 || c.pretrain.batch_size < 1 || !(c.pretrain.lr > 0.0) || c.pretrain.weight_decay < 0.0) {
    throw ConfigError("pretrain: steps >= 0, batch_size >= 1, lr > 0 and weight_decay >= 0 are required");
  }
  if (c.eval.tasks < 1 || c.eval.k < 1 || !(c.eval.temperature > 0.0) || c.eval.max_new_tokens < 1) {
    throw ConfigError("eval: tasks, k and max_new_tokens must be >= 1 and temperature > 0");
  }
  return c;
}

// Fully resolved form; defaults spelled out.
inline nlohmann::json to_json(const RunConfig& c) {
  const auto& w = c.corpus.style_weights;
  nlohmann::json train = {{"num_generations", c.train.num_generations},
                          {"batch_size", c.train.batch_size},
                          {"temperature", c.train.temperature},
                          {"max_new_tokens", c.train.max_new_tokens},
                          {"total_steps", c.train.total_steps},
                          {"checkpoint_every", c.train.checkpoint_every},
                          {"beta1", c.train.optimizer.beta1},
                          {"beta2", c.train.optimizer.beta2},
                          {"eps", c.train.optimizer.eps},
                          {"lora_rank", c.train.lora_rank},
                          {"lora_alpha", c.train.lora_alpha}};
  train["learning_rate"] = c.train.learning_rate ? nlohmann::json(*c.train.learning_rate) : nlohmann::json(nullptr);
  return {
      {"seed", c.seed},
      {"model", to_json(c.model)},
      {"corpus",
       {{"documents", c.corpus.documents},
        {"style_weights", {{"plain", w[0]}, {"trace", w[1]}, {"boxed", w[2]}, {"trace_boxed", w[3]}}},
        {"tasks", to_json(c.corpus.range)}}},
      {"pretrain",
       {{"steps", c.pretrain.steps},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr},
        {"warmup", c.pretrain.warmup},
        {"min_lr_ratio", c.pretrain.min_lr_ratio},
        {"clip_norm", c.pretrain.clip_norm},
        {"weight_decay", c.pretrain.weight_decay},
        {"init_std", c.pretrain.init_std},
        {"heldout_fraction", c.pretrain.heldout_fraction}}},
      {"train", train},
      {"eval",
       {{"tasks", c.eval.tasks},
        {"k", c.eval.k},
        {"temperature", c.eval.temperature},
        {"max_new_tokens", c.eval.max_new_tokens}}},
      {"llm_clustering", c.llm_clustering},
  };
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << f.rdbuf();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ss.str());
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config file " + path.string() + " is not valid JSON (byte " + std::to_string(e.byte) + ")");
  }
  try {
    return run_config_from_json(j);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace steerlab
