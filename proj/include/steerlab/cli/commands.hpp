#pragma once

// Subcommand bodies; the executable only parses flags and maps errors to exit codes.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/cli/config.hpp"
#include "steerlab/lens/lens.hpp"
#include "steerlab/lens/llm_client.hpp"
#include "steerlab/rl/pretrain.hpp"
#include "steerlab/rl/train.hpp"
#include "steerlab/tasks/eval.hpp"

namespace steerlab::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitRuntime = 1;
inline constexpr int kExitUsage = 2;

namespace fs = std::filesystem;

inline void require_file(const fs::path& p, const std::string& flag) {
  if (!fs::is_regular_file(p)) throw ConfigError(flag + ": no such file " + p.string());
}

// ---------------------------------------------------------------------------
// pretrain

struct PretrainArgs {
  fs::path config;
  fs::path out;
  std::optional<int> steps;
};

inline Checkpoint base_checkpoint(const TransformerParams& params, const RunConfig& rc, const PretrainReport& rep) {
  Checkpoint ck;
  add_params(ck, params);
  ck.attributes["kind"] = "base";
  ck.attributes["tasks"] = to_json(rc.corpus.range);
  ck.attributes["pretrain"] = {{"steps", rc.pretrain.steps},
                               {"initial_heldout_loss", rep.initial_heldout_loss},
                               {"final_heldout_loss", rep.final_heldout_loss}};
  return ck;
}

inline int cmd_pretrain(const PretrainArgs& a, std::ostream& err = std::cerr) {
  require_file(a.config, "--config");
  RunConfig rc = load_run_config(a.config);
  if (a.steps) {
    if (*a.steps < 0) throw ConfigError("--steps must be >= 0");
    rc.pretrain.steps = *a.steps;
  }
  const auto corpus = gen_pretrain_corpus(rc.corpus);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  std::ofstream log(a.out.string() + ".log.jsonl", std::ios::trunc);
  PretrainReport rep;
  const int every = std::max(1, rc.pretrain.steps / 20);
  const auto params = pretrain(corpus, rc.model, rc.pretrain, &rep, [&](int step, double loss) {
    log << nlohmann::json{{"step", step + 1}, {"loss", loss}, {"lr", pretrain_lr(rc.pretrain, step)}}.dump() << "\n";
    if ((step + 1) % every == 0) err << "pretrain step " << step + 1 << "/" << rc.pretrain.steps << " loss " << loss << "\n";
  });
  save_checkpoint(a.out, base_checkpoint(params, rc, rep));
  err << "held-out loss " << rep.initial_heldout_loss << " -> " << rep.final_heldout_loss << "; wrote " << a.out.string()
      << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

struct TrainArgs {
  fs::path config;
  std::string regime;
  fs::path base;
  fs::path run_dir;
  std::optional<int> steps;
};

inline int cmd_train(const TrainArgs& a, std::ostream& err = std::cerr) {
  const auto regime = parse_regime(a.regime);
  if (!regime) {
    throw ConfigError("--regime: invalid value '" + a.regime + "'; valid values: " + std::string(kRegimeChoices));
  }
  require_file(a.config, "--config");
  require_file(a.base, "--base");
  RunConfig rc = load_run_config(a.config);
  if (a.steps) {
    if (*a.steps < 0) throw ConfigError("--steps must be >= 0");
    rc.train.total_steps = *a.steps;
  }
  const Checkpoint base_ck = load_checkpoint(a.base);
  const TransformerParams base = params_from_checkpoint(base_ck);
  if (!(base.config == rc.model)) throw ConfigError("--base: model shape differs from the config's model section");

  TrainJob job;
  job.run_dir = a.run_dir;
  job.regime = *regime;
  job.config = rc.train;
  job.resolved_config = to_json(rc);
  job.resolved_config["regime"] = std::string(to_string(*regime));
  job.resolved_config["base"] = a.base.string();
  job.base_path = a.base.string();
  job.resolved_config["train"]["learning_rate"] = rc.train.lr_for(*regime);

  const int every = std::max(1, rc.train.total_steps / 30);
  const auto res = train(job, base, [&](int step, const StepReport& r) {
    if (step % every == 0) {
      err << "train step " << step << "/" << rc.train.total_steps << " reward " << r.mean_reward << " |grad| "
          << r.grad_norm << "\n";
    }
  });
  if (res.start_step > 0) err << "resumed from step " << res.start_step << "\n";
  err << "wrote " << checkpoint_path(a.run_dir, res.final_step).string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalArgs {
  fs::path checkpoint;
  std::optional<fs::path> base;
  std::optional<fs::path> config;
  int k = kDefaultMeanAtK;
  std::string tasks = "200";  // a count, or a JSONL file of {"prompt","gold"}
  std::uint64_t seed = 0;
  std::optional<fs::path> out;
  std::optional<fs::path> samples_out;
  double temperature = 1.0;
  int max_new_tokens = 16;
};

inline Policy load_policy(const fs::path& checkpoint, const std::optional<fs::path>& base, Checkpoint* ck_out = nullptr) {
  require_file(checkpoint, "--checkpoint");
  const Checkpoint ck = load_checkpoint(checkpoint);
  std::optional<Checkpoint> base_ck;
  if (!ck.find("tok_emb")) {
    fs::path base_path;
    if (base) {
      base_path = *base;
    } else if (ck.attributes.contains("base")) {
      base_path = ck.attributes["base"].get<std::string>();
    } else {
      throw ConfigError("--base: required for an adapter-only checkpoint");
    }
    require_file(base_path, "--base");
    base_ck = load_checkpoint(base_path);
  }
  Policy p = policy_from_checkpoint(ck, base_ck ? &*base_ck : nullptr);
  if (ck_out) *ck_out = ck;
  return p;
}

inline std::vector<TaskInstance> load_tasks_jsonl(const fs::path& p) {
  std::ifstream f(p);
  if (!f) throw ConfigError("--tasks: cannot read " + p.string());
  std::vector<TaskInstance> out;
  std::string line;
  int lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded()) throw InputError("--tasks: " + p.string() + ":" + std::to_string(lineno) + " is not JSON");
    out.push_back(task_from_json(j));
  }
  if (out.empty()) throw InputError("--tasks: " + p.string() + " holds no tasks");
  return out;
}

inline std::vector<TaskInstance> resolve_tasks(const EvalArgs& a, const OperandRange& range) {
  std::size_t used = 0;
  int count = 0;
  try {
    count = std::stoi(a.tasks, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == a.tasks.size() && used > 0) {
    if (count < 1) throw ConfigError("--tasks must be >= 1");
    return gen_eval_set(count, a.seed, range);
  }
  return load_tasks_jsonl(a.tasks);
}

inline std::string format_percent(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

inline int cmd_eval(const EvalArgs& a, std::ostream& out = std::cout) {
  if (a.k < 1) throw ConfigError("--k must be >= 1");
  Checkpoint ck;
  const Policy policy = load_policy(a.checkpoint, a.base, &ck);
  OperandRange range;
  if (a.config) {
    require_file(*a.config, "--config");
    range = load_run_config(*a.config).corpus.range;
  } else if (ck.attributes.contains("tasks")) {
    range = operand_range_from_json(ck.attributes["tasks"]);
  }
  const auto tasks = resolve_tasks(a, range);
  EvalOptions eo;
  eo.k = a.k;
  eo.seed = a.seed;
  eo.temperature = a.temperature;
  eo.max_new = a.max_new_tokens;
  const EvalReport rep = mean_at_k(policy.view(), Tokenizer{}, tasks, eo);

  out << "task_id\tprompt\tgold\tmean_reward\n";
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    out << i << "\t" << tasks[i].prompt << "\t" << tasks[i].gold << "\t" << format_percent(rep.per_task[i]) << "\n";
  }
  out << "mean@" << rep.k << "\t" << format_percent(rep.aggregate_percent) << "\n";
  if (a.out) {
    std::ofstream f(*a.out, std::ios::trunc);
    if (!f) throw Error("cannot write " + a.out->string());
    f << to_json(rep).dump(2) << "\n";
  }
  if (a.samples_out) {
    std::ofstream f(*a.samples_out, std::ios::trunc);
    if (!f) throw Error("cannot write " + a.samples_out->string());
    for (const auto& s : rep.samples) f << to_json(s).dump() << "\n";
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------
// lens

struct LensArgs {
  fs::path checkpoint;
  std::optional<fs::path> base;
  std::optional<fs::path> out_dir;
  int top = kDefaultTopK;
  bool emit_prompts = false;
  bool call_llm = false;
};

inline int cmd_lens(const LensArgs& a, std::ostream& err = std::cerr) {
  Checkpoint ck;
  const Policy policy = load_policy(a.checkpoint, a.base, &ck);
  if (!policy.steering) throw InputError("lens: checkpoint has no steering vectors");
  const Tokenizer tok;
  if (a.top < 1 || a.top > tok.size()) {
    throw ConfigError("--top must be in [1, " + std::to_string(tok.size()) + "]");
  }
  const fs::path dir = a.out_dir ? *a.out_dir : fs::path(a.checkpoint.string() + ".lens");
  fs::create_directories(dir);
  const LensReport rep =
      lens_report(*policy.steering, policy.params.unembedding, tok, a.top, a.checkpoint.filename().string());
  {
    std::ofstream f(dir / "lens_report.json", std::ios::trunc);
    if (!f) throw Error("cannot write " + (dir / "lens_report.json").string());
    f << to_json(rep).dump(2) << "\n";
  }
  std::optional<LlmEndpoint> endpoint;
  if (a.call_llm) {
    endpoint = llm_endpoint_from_env();
    if (!endpoint) err << "warning: " << kLlmUrlEnv << " is not set; clustering disabled, prompts emitted only\n";
  }
  if (a.emit_prompts || a.call_llm) write_cluster_prompts(rep, dir);
  if (endpoint) {
    for (const auto& layer : rep.layers) {
      const std::string answer = cluster_via_llm(export_cluster_prompt(layer), *endpoint);
      std::ofstream f(dir / ("lens_layer" + std::to_string(layer.layer) + ".response.txt"),
                      std::ios::binary | std::ios::trunc);
      f << answer;
    }
  }
  for (const auto& layer : rep.layers) {
    err << "layer " << layer.layer << ":";
    for (std::size_t i = 0; i < std::min<std::size_t>(5, layer.top.size()); ++i) {
      err << " " << layer.top[i].token << "(" << format_score(layer.top[i].score) << ")";
    }
    err << "\n";
  }
  err << "wrote " << (dir / "lens_report.json").string() << "\n";
  return kExitOk;
}

}  // namespace steerlab::cli
