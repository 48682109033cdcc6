#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/model/sampling.hpp"
#include "steerlab/model/tokenizer.hpp"
#include "steerlab/random.hpp"
#include "steerlab/tasks/arith.hpp"
#include "steerlab/tasks/boxed.hpp"

namespace steerlab {

inline constexpr int kDefaultMeanAtK = 8;

struct EvalSample {
  std::size_t task_id = 0;
  int sample = 0;
  int reward = 0;
  std::string completion;
};

struct EvalReport {
  int k = kDefaultMeanAtK;
  std::uint64_t seed = 0;
  double aggregate_percent = 0.0;
  std::vector<double> per_task;     // mean reward per task, in [0, 1]
  std::vector<EvalSample> samples;  // per-sample log, task-major
};

struct EvalOptions {
  int k = kDefaultMeanAtK;
  double temperature = 1.0;
  int max_new = 16;
  std::uint64_t seed = 0;
};

inline std::vector<TokenId> encode_prompt(const Tokenizer& tok, const std::string& prompt) {
  std::vector<TokenId> ids{Tokenizer::kBos};
  const auto body = tok.encode(prompt);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

// Seed of sample j of task i; independent of evaluation order.
inline std::uint64_t eval_sample_seed(std::uint64_t seed, std::size_t task, int j) {
  return derive_seed(derive_seed(seed, task), static_cast<std::uint64_t>(j));
}

// aggregate = total correct / (k * #tasks) * 100.
inline double aggregate_percent(const std::vector<EvalSample>& samples, std::size_t n_tasks, int k) {
  long long correct = 0;
  for (const auto& s : samples) correct += s.reward;
  return static_cast<double>(correct) / (static_cast<double>(k) * static_cast<double>(n_tasks)) * 100.0;
}

// Assembles a report from a per-sample log (task-major, k samples per task).
inline EvalReport report_from_samples(std::vector<EvalSample> samples, std::size_t n_tasks, int k, std::uint64_t seed) {
  if (k < 1) throw ParameterError("mean_at_k: k must be >= 1");
  if (samples.size() != n_tasks * static_cast<std::size_t>(k)) throw InputError("mean_at_k: sample log has wrong length");
  EvalReport r;
  r.k = k;
  r.seed = seed;
  r.per_task.assign(n_tasks, 0.0);
  std::vector<int> correct(n_tasks, 0);
  for (const auto& s : samples) correct.at(s.task_id) += s.reward;
  for (std::size_t i = 0; i < n_tasks; ++i) r.per_task[i] = static_cast<double>(correct[i]) / k;
  r.aggregate_percent = aggregate_percent(samples, n_tasks, k);
  r.samples = std::move(samples);
  return r;
}

// mean@k: k seeded samples per task, binary boxed-answer reward, percent scale.
inline EvalReport mean_at_k(const PolicyView& pv, const Tokenizer& tok, const std::vector<TaskInstance>& tasks,
                            const EvalOptions& opt) {
  if (opt.k < 1) throw ParameterError("mean_at_k: k must be >= 1");
  if (tasks.empty()) throw InputError("mean_at_k: no tasks");
  validate_policy(pv);
  std::vector<EvalSample> samples;
  samples.reserve(tasks.size() * static_cast<std::size_t>(opt.k));
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto prompt = encode_prompt(tok, tasks[i].prompt);
    const Activations state = prefill(pv, prompt);
    for (int j = 0; j < opt.k; ++j) {
      SampleOptions so{opt.temperature, opt.max_new, eval_sample_seed(opt.seed, i, j), Tokenizer::kEos};
      const auto res = sample_from(pv, state, so);
      const std::string text = tok.decode(res.tokens);
      samples.push_back({i, j, reward(text, tasks[i].gold), text});
    }
  }
  return report_from_samples(std::move(samples), tasks.size(), opt.k, opt.seed);
}

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json per_task = nlohmann::json::array();
  for (std::size_t i = 0; i < r.per_task.size(); ++i) per_task.push_back({{"task_id", i}, {"mean_reward", r.per_task[i]}});
  return {{"k", r.k}, {"seed", r.seed}, {"aggregate_percent", r.aggregate_percent}, {"per_task", per_task}};
}

inline nlohmann::json to_json(const EvalSample& s) {
  return {{"task_id", s.task_id}, {"sample", s.sample}, {"reward", s.reward}, {"completion", s.completion}};
}

}  // namespace steerlab
