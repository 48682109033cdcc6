#pragma once

// Synthetic arithmetic tasks. Operand tuples (op, a, b) are split into a
// training share and an evaluation share by a seed-independent hash, so the
// pretraining corpus and RL prompts never contain an evaluation tuple.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/error.hpp"
#include "steerlab/random.hpp"

namespace steerlab {

// Fixed instruction suffix closing every prompt.
inline constexpr std::string_view kInstructionSuffix = " \\boxed{}:";

enum class AnswerStyle { plain = 0, trace = 1, boxed = 2, trace_boxed = 3 };
inline constexpr std::size_t kStyleCount = 4;

inline bool style_is_boxed(AnswerStyle s) { return s == AnswerStyle::boxed || s == AnswerStyle::trace_boxed; }

struct OperandRange {
  int a_min = 0, a_max = 99;
  int b_min = 0, b_max = 9;
  std::string operators = "+-";
  int eval_percent = 20;  // share of tuples reserved for evaluation

  void validate() const {
    if (operators.empty()) throw ConfigError("corpus: operator set is empty");
    for (char op : operators) {
      if (op != '+' && op != '-' && op != '*') {
        throw ConfigError(std::string("corpus: unsupported operator '") + op + "'");
      }
    }
    if (a_min > a_max || b_min > b_max) throw ConfigError("corpus: empty operand range");
    if (eval_percent <= 0 || eval_percent >= 100) throw ConfigError("corpus: eval_percent must be in (0, 100)");
  }
};

struct CorpusConfig {
  OperandRange range;
  // plain, trace, boxed, trace+boxed
  std::array<double, kStyleCount> style_weights = {0.45, 0.30, 0.15, 0.10};
  int documents = 20000;
  std::uint64_t seed = 0;

  double boxed_fraction() const {
    double total = 0.0;
    for (double w : style_weights) total += w;
    return (style_weights[2] + style_weights[3]) / total;
  }

  void validate() const {
    range.validate();
    int active = 0;
    double total = 0.0;
    for (double w : style_weights) {
      if (w < 0.0) throw ConfigError("corpus: negative style weight");
      active += w > 0.0;
      total += w;
    }
    if (active < 2) throw ConfigError("corpus: at least two answer styles are required");
    if (style_weights[2] + style_weights[3] <= 0.0) throw ConfigError("corpus: the boxed style must be present");
    if (boxed_fraction() > 0.30 + 1e-12) throw ConfigError("corpus: boxed styles may make up at most 30% of documents");
    if (documents < 1) throw ConfigError("corpus: documents must be >= 1");
  }
};

struct TaskInstance {
  char op = '+';
  int a = 0, b = 0;
  std::string prompt;
  std::string gold;
};

struct Document {
  TaskInstance task;
  AnswerStyle style = AnswerStyle::plain;
  std::string completion;

  std::string text() const { return task.prompt + completion; }
};

inline long long apply_op(char op, int a, int b) {
  switch (op) {
    case '+': return static_cast<long long>(a) + b;
    case '-': return static_cast<long long>(a) - b;
    case '*': return static_cast<long long>(a) * b;
  }
  throw ConfigError(std::string("unsupported operator '") + op + "'");
}

inline std::string equation(char op, int a, int b) { return std::to_string(a) + op + std::to_string(b); }

inline TaskInstance make_task(char op, int a, int b) {
  return {op, a, b, equation(op, a, b) + "=?" + std::string(kInstructionSuffix), std::to_string(apply_op(op, a, b))};
}

inline std::string render_answer(const TaskInstance& t, AnswerStyle style) {
  switch (style) {
    case AnswerStyle::plain: return t.gold;
    case AnswerStyle::trace: return equation(t.op, t.a, t.b) + "=" + t.gold;
    case AnswerStyle::boxed: return "\\boxed{" + t.gold + "}";
    case AnswerStyle::trace_boxed: return equation(t.op, t.a, t.b) + "=" + t.gold + " \\boxed{" + t.gold + "}";
  }
  return t.gold;
}

// Seed-independent hash split of operand tuples.
inline bool is_eval_tuple(char op, int a, int b, int eval_percent) {
  const std::uint64_t key = (static_cast<std::uint64_t>(static_cast<unsigned char>(op)) << 48) ^
                            (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 24) ^
                            static_cast<std::uint64_t>(static_cast<std::uint32_t>(b));
  return splitmix64(key ^ 0x5EED5EED5EED5EEDULL) % 100 < static_cast<std::uint64_t>(eval_percent);
}

// Uniform draw from the training share of the tuple space.
inline TaskInstance sample_train_task(const OperandRange& range, Rng& rng) {
  for (;;) {
    const char op = range.operators[rng.below(range.operators.size())];
    const int a = range.a_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(range.a_max - range.a_min + 1)));
    const int b = range.b_min + static_cast<int>(rng.below(static_cast<std::uint64_t>(range.b_max - range.b_min + 1)));
    if (!is_eval_tuple(op, a, b, range.eval_percent)) return make_task(op, a, b);
  }
}

inline AnswerStyle sample_style(const std::array<double, kStyleCount>& weights, Rng& rng) {
  double total = 0.0;
  for (double w : weights) total += w;
  const double u = rng.uniform() * total;
  double cum = 0.0;
  for (std::size_t i = 0; i < kStyleCount; ++i) {
    cum += weights[i];
    if (u < cum && weights[i] > 0.0) return static_cast<AnswerStyle>(i);
  }
  for (std::size_t i = kStyleCount; i-- > 0;) {
    if (weights[i] > 0.0) return static_cast<AnswerStyle>(i);
  }
  return AnswerStyle::plain;
}

inline std::vector<Document> gen_pretrain_corpus(const CorpusConfig& config) {
  config.validate();
  Rng rng(config.seed);
  std::vector<Document> docs;
  docs.reserve(static_cast<std::size_t>(config.documents));
  for (int i = 0; i < config.documents; ++i) {
    Document d;
    d.task = sample_train_task(config.range, rng);
    d.style = sample_style(config.style_weights, rng);
    d.completion = render_answer(d.task, d.style);
    docs.push_back(std::move(d));
  }
  return docs;
}

// Every evaluation-share tuple of the range, in enumeration order.
inline std::vector<TaskInstance> eval_tuples(const OperandRange& range) {
  std::vector<TaskInstance> out;
  for (char op : range.operators) {
    for (int a = range.a_min; a <= range.a_max; ++a) {
      for (int b = range.b_min; b <= range.b_max; ++b) {
        if (is_eval_tuple(op, a, b, range.eval_percent)) out.push_back(make_task(op, a, b));
      }
    }
  }
  return out;
}

// Seeded shuffle of the evaluation share; wraps around if count exceeds it.
inline std::vector<TaskInstance> gen_eval_set(int count, std::uint64_t seed, const OperandRange& range) {
  range.validate();
  if (count < 1) throw InputError("gen_eval_set: count must be >= 1");
  auto pool = eval_tuples(range);
  if (pool.empty()) throw ConfigError("gen_eval_set: the evaluation share of the operand range is empty");
  Rng rng(seed);
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  std::vector<TaskInstance> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out.push_back(pool[static_cast<std::size_t>(i) % pool.size()]);
  return out;
}

inline nlohmann::json to_json(const OperandRange& r) {
  return {{"a_min", r.a_min}, {"a_max", r.a_max},         {"b_min", r.b_min},
          {"b_max", r.b_max}, {"operators", r.operators}, {"eval_percent", r.eval_percent}};
}

inline nlohmann::json task_to_json(const TaskInstance& t) { return {{"prompt", t.prompt}, {"gold", t.gold}}; }

inline TaskInstance task_from_json(const nlohmann::json& j) {
  TaskInstance t;
  t.prompt = j.at("prompt").get<std::string>();
  t.gold = j.at("gold").get<std::string>();
  return t;
}

}  // namespace steerlab
