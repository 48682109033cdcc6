#pragma once

// Online RL driver: run directory, checkpoints, resumable JSONL log.

#include <sys/file.h>
#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "steerlab/adapt/checkpoint.hpp"
#include "steerlab/rl/policy_gradient.hpp"

namespace steerlab {

inline double default_learning_rate(TrainRegime r) {
  switch (r) {
    case TrainRegime::full: return 2e-5;
    case TrainRegime::steering: return 5e-4;
    case TrainRegime::lora: return 5e-4;
  }
  return 5e-4;
}

struct TrainConfig {
  std::optional<double> learning_rate;  // per-regime default when unset
  int num_generations = 16;
  int batch_size = 16;  // prompts per update
  double temperature = 1.0;
  int max_new_tokens = 16;
  int total_steps = 300;
  int checkpoint_every = 50;
  std::uint64_t seed = 0;
  OptimizerConfig optimizer;
  int lora_rank = kDefaultLoraRank;
  double lora_alpha = kDefaultLoraAlpha;
  OperandRange tasks;

  double lr_for(TrainRegime r) const { return learning_rate.value_or(default_learning_rate(r)); }

  void validate() const {
    if (learning_rate && !(*learning_rate > 0.0)) throw ConfigError("train: learning_rate must be > 0");
    if (num_generations < 2) throw ConfigError("train: num_generations must be >= 2");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (!(temperature > 0.0)) throw ConfigError("train: temperature must be > 0");
    if (max_new_tokens < 1) throw ConfigError("train: max_new_tokens must be >= 1");
    if (total_steps < 0) throw ConfigError("train: total_steps must be >= 0");
    if (checkpoint_every < 1) throw ConfigError("train: checkpoint_every must be >= 1");
    if (!(optimizer.beta1 >= 0.0 && optimizer.beta1 < 1.0 && optimizer.beta2 >= 0.0 && optimizer.beta2 < 1.0 &&
          optimizer.eps > 0.0)) {
      throw ConfigError("train: invalid optimizer hyperparameters");
    }
    tasks.validate();
  }
};

// Prompts for update `step` (0-based); a pure function of (seed, step).
inline std::vector<TaskInstance> step_tasks(const TrainConfig& c, int step) {
  Rng rng(derive_seed(derive_seed(c.seed, 0x7461736bULL), static_cast<std::uint64_t>(step)));
  std::vector<TaskInstance> out;
  for (int g = 0; g < c.batch_size; ++g) out.push_back(sample_train_task(c.tasks, rng));
  return out;
}

inline std::uint64_t group_seed(const TrainConfig& c, int step, int group) {
  return derive_seed(derive_seed(c.seed, 0x67726f70ULL),
                     static_cast<std::uint64_t>(step) * static_cast<std::uint64_t>(c.batch_size) +
                         static_cast<std::uint64_t>(group));
}

inline std::vector<RolloutGroup> collect_batch(const Policy& policy, const TrainConfig& c, int step) {
  const Tokenizer tok;
  std::vector<RolloutGroup> groups;
  const auto tasks = step_tasks(c, step);
  for (int g = 0; g < c.batch_size; ++g) {
    GroupOptions go;
    go.n = c.num_generations;
    go.temperature = c.temperature;
    go.max_new = c.max_new_tokens;
    go.seed = group_seed(c, step, g);
    groups.push_back(generate_group(policy.view(), tok, tasks[static_cast<std::size_t>(g)], go));
  }
  return groups;
}

// Trainable tensors only; frozen weights stay in the base checkpoint.
inline Checkpoint delta_checkpoint(Policy& policy, TrainRegime regime, int step,
                                   const nlohmann::json& extra = nlohmann::json::object()) {
  Checkpoint ck;
  ck.attributes = extra;
  for (const auto& p : trainable_parameters(regime, policy)) ck.add(p.name, *p.tensor);
  ck.attributes["model"] = to_json(policy.params.config);
  ck.attributes["regime"] = std::string(to_string(regime));
  ck.attributes["step"] = step;
  if (policy.lora) ck.attributes["lora"] = {{"rank", policy.lora->rank}, {"alpha", policy.lora->alpha}};
  return ck;
}

inline Checkpoint optimizer_checkpoint(const OptimizerState& s) {
  Checkpoint ck;
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    ck.add("m." + s.names[i], s.m[i]);
    ck.add("v." + s.names[i], s.v[i]);
  }
  ck.attributes["step"] = s.step;
  return ck;
}

inline void restore_optimizer(OptimizerState& s, const Checkpoint& ck) {
  for (std::size_t i = 0; i < s.m.size(); ++i) {
    detail::assign_from(ck, "m." + s.names[i], s.m[i]);
    detail::assign_from(ck, "v." + s.names[i], s.v[i]);
  }
  s.step = ck.attributes.value("step", 0LL);
}

// Which tensors of a checkpoint a regime's trained state consists of.
inline std::optional<TrainRegime> checkpoint_regime(const Checkpoint& ck) {
  if (ck.attributes.contains("regime")) return parse_regime(ck.attributes["regime"].get<std::string>());
  return std::nullopt;
}

// Rebuilds a policy from a checkpoint; delta checkpoints need the base model.
inline Policy policy_from_checkpoint(const Checkpoint& ck, const Checkpoint* base = nullptr) {
  const ModelConfig config = checkpoint_model_config(ck);
  Policy p;
  if (ck.find("tok_emb")) {
    p.params = params_from_checkpoint(ck, config);
  } else {
    if (!base) throw ConfigError("checkpoint holds adapters only; a base checkpoint is required");
    p.params = params_from_checkpoint(*base, config);
  }
  if (ck.find("steer.0")) p.steering = steering_from_checkpoint(ck, config);
  if (ck.find("lora.0.A")) p.lora = lora_from_checkpoint(ck, config);
  return p;
}

namespace detail {

class RunDirLock {
 public:
  explicit RunDirLock(const std::filesystem::path& dir) {
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_CREAT | O_RDWR, 0644);
    if (fd_ < 0) throw Error("cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
      ::close(fd_);
      throw ConfigError("run dir " + dir.string() + " is locked by another process");
    }
  }
  ~RunDirLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  RunDirLock(const RunDirLock&) = delete;
  RunDirLock& operator=(const RunDirLock&) = delete;

 private:
  int fd_ = -1;
};

inline std::string read_text(const std::filesystem::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  const auto tmp = std::filesystem::path(p.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("cannot write " + tmp.string());
    f << text;
  }
  std::filesystem::rename(tmp, p);
}

}  // namespace detail

inline std::filesystem::path checkpoint_path(const std::filesystem::path& dir, int step) {
  return dir / ("ckpt_" + std::to_string(step) + ".steerck");
}

inline std::filesystem::path optimizer_path(const std::filesystem::path& dir, int step) {
  return dir / ("optim_" + std::to_string(step) + ".steerck");
}

// Largest step with both a delta checkpoint and optimizer state on disk.
inline std::optional<int> latest_step(const std::filesystem::path& dir) {
  static const std::regex pat(R"(ckpt_(\d+)\.steerck)");
  std::optional<int> best;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (!std::regex_match(name, m, pat)) continue;
    const int step = std::stoi(m[1].str());
    if (!std::filesystem::exists(optimizer_path(dir, step))) continue;
    if (!best || step > *best) best = step;
  }
  return best;
}

struct TrainJob {
  std::filesystem::path run_dir;
  TrainRegime regime = TrainRegime::steering;
  TrainConfig config;
  nlohmann::json resolved_config;  // written to config.json, compared on resume
  std::string base_path;           // recorded in checkpoint attributes
};

struct TrainResult {
  int start_step = 0;
  int final_step = 0;
  std::vector<StepReport> steps;  // only the steps run by this call
};

using TrainProgress = std::function<void(int step, const StepReport&)>;

inline nlohmann::json log_record(int step, const StepReport& r, double lr, double elapsed) {
  return {{"step", step},
          {"mean_reward", r.mean_reward},
          {"baseline_mean", r.mean_baseline},
          {"mean_abs_advantage", r.mean_abs_advantage},
          {"grad_norm", r.grad_norm},
          {"loss", r.loss},
          {"lr", lr},
          {"elapsed_s", elapsed}};
}

// Runs (or resumes) job.config.total_steps updates on top of `base`.
inline TrainResult train(const TrainJob& job, const TransformerParams& base, const TrainProgress& progress = {}) {
  namespace fs = std::filesystem;
  const TrainConfig& c = job.config;
  c.validate();
  fs::create_directories(job.run_dir);
  detail::RunDirLock lock(job.run_dir);

  const fs::path config_path = job.run_dir / "config.json";
  const fs::path log_path = job.run_dir / "train.log.jsonl";
  const std::string config_text = job.resolved_config.dump(2) + "\n";
  const std::optional<int> resume = latest_step(job.run_dir);
  if (resume) {
    if (!fs::exists(config_path)) throw ConfigError("run dir has checkpoints but no config.json");
    nlohmann::json stored;
    try {
      stored = nlohmann::json::parse(detail::read_text(config_path));
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("run dir config.json is corrupt: " + std::string(e.what()));
    }
    // extending a run is allowed; everything else must match
    auto same = [](nlohmann::json j) {
      if (j.contains("train") && j["train"].is_object()) j["train"].erase("total_steps");
      return j;
    };
    if (same(stored) != same(job.resolved_config)) throw ConfigError("run dir was created with a different config");
    detail::write_text(config_path, config_text);
  } else {
    detail::write_text(config_path, config_text);
  }

  Policy policy = make_policy(job.regime, base,
                              LoraSettings{c.lora_rank, c.lora_alpha, derive_seed(c.seed, 0x6c6f7261ULL)});
  auto params = trainable_parameters(job.regime, policy);
  OptimizerState state = OptimizerState::for_params(params, c.optimizer);
  TrainResult result;
  nlohmann::json extra = {{"tasks", to_json(c.tasks)}};
  if (!job.base_path.empty()) extra["base"] = job.base_path;

  if (resume) {
    const Checkpoint ck = load_checkpoint(checkpoint_path(job.run_dir, *resume));
    const Checkpoint opt = load_checkpoint(optimizer_path(job.run_dir, *resume));
    if (checkpoint_regime(ck) != job.regime) throw ConfigError("run dir was trained under a different regime");
    for (auto& p : params) detail::assign_from(ck, p.name, *p.tensor);
    restore_optimizer(state, opt);
    result.start_step = *resume;
    // drop log records past the checkpoint we resume from
    std::string kept;
    if (fs::exists(log_path)) {
      std::istringstream in(detail::read_text(log_path));
      std::string line;
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto rec = nlohmann::json::parse(line, nullptr, false);
        if (rec.is_discarded() || !rec.contains("step")) throw ConfigError("train.log.jsonl is corrupt");
        if (rec["step"].get<int>() <= *resume) kept += line + "\n";
      }
    }
    detail::write_text(log_path, kept);
  } else {
    save_checkpoint(checkpoint_path(job.run_dir, 0), delta_checkpoint(policy, job.regime, 0, extra));
    save_checkpoint(optimizer_path(job.run_dir, 0), optimizer_checkpoint(state));
    detail::write_text(log_path, "");
  }

  const double lr = c.lr_for(job.regime);
  std::ofstream log(log_path, std::ios::app);
  const auto t0 = std::chrono::steady_clock::now();
  for (int step = result.start_step; step < c.total_steps; ++step) {
    const auto groups = collect_batch(policy, c, step);
    const StepReport rep = policy_gradient_step(groups, policy, job.regime, state, lr);
    const int done = step + 1;
    const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    log << log_record(done, rep, lr, elapsed).dump() << "\n";
    log.flush();
    if (done % c.checkpoint_every == 0 || done == c.total_steps) {
      save_checkpoint(optimizer_path(job.run_dir, done), optimizer_checkpoint(state));
      save_checkpoint(checkpoint_path(job.run_dir, done), delta_checkpoint(policy, job.regime, done, extra));
    }
    result.steps.push_back(rep);
    if (progress) progress(done, rep);
  }
  result.final_step = std::max(result.start_step, c.total_steps);
  return result;
}

}  // namespace steerlab
