// steerlab: pretrain | train | eval | lens
//
// Exit codes: 0 success, 2 usage or configuration error, 1 runtime error.

#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "steerlab/cli/commands.hpp"

namespace sc = steerlab::cli;

int main(int argc, char** argv) {
  CLI::App app{"steerlab: steering-vector RL laboratory"};
  app.require_subcommand(1);

  sc::PretrainArgs pre;
  auto* p = app.add_subcommand("pretrain", "train a base model on the synthetic corpus");
  p->add_option("--config", pre.config, "run config JSON")->required();
  p->add_option("--out", pre.out, "output checkpoint path")->required();
  int pre_steps = -1;
  auto* pre_steps_opt = p->add_option("--steps", pre_steps, "override pretrain.steps");

  sc::TrainArgs tr;
  auto* t = app.add_subcommand("train", "policy-gradient RL under one training regime");
  t->add_option("--config", tr.config, "run config JSON")->required();
  t->add_option("--regime", tr.regime, "full | steering | lora")->required();
  t->add_option("--base", tr.base, "base checkpoint")->required();
  t->add_option("--run-dir", tr.run_dir, "run directory (created, or resumed)")->required();
  int tr_steps = -1;
  auto* tr_steps_opt = t->add_option("--steps", tr_steps, "override train.total_steps");

  sc::EvalArgs ev;
  std::string ev_base, ev_config, ev_out, ev_samples;
  auto* e = app.add_subcommand("eval", "mean@k on held-out tasks");
  e->add_option("--checkpoint", ev.checkpoint, "checkpoint to evaluate")->required();
  e->add_option("--base", ev_base, "base checkpoint for adapter-only checkpoints");
  e->add_option("--config", ev_config, "run config (task ranges)");
  e->add_option("--k", ev.k, "samples per task")->capture_default_str();
  e->add_option("--tasks", ev.tasks, "task count, or a JSONL file of {prompt, gold}")->capture_default_str();
  e->add_option("--seed", ev.seed, "evaluation seed")->required();
  e->add_option("--temperature", ev.temperature, "sampling temperature")->capture_default_str();
  e->add_option("--max-new-tokens", ev.max_new_tokens, "completion budget")->capture_default_str();
  e->add_option("--out", ev_out, "write the report JSON here");
  e->add_option("--samples-out", ev_samples, "write per-sample rewards (JSONL) here");

  sc::LensArgs ln;
  std::string ln_base, ln_out;
  auto* l = app.add_subcommand("lens", "logit-lens report of the steering vectors");
  l->add_option("--checkpoint", ln.checkpoint, "checkpoint with steering vectors")->required();
  l->add_option("--base", ln_base, "base checkpoint (for W_U)");
  l->add_option("--top", ln.top, "tokens per layer")->capture_default_str();
  l->add_option("--out-dir", ln_out, "output directory (default: <checkpoint>.lens)");
  l->add_flag("--emit-prompts", ln.emit_prompts, "write the clustering prompt per layer");
  l->add_flag("--call-llm", ln.call_llm, "send prompts to STEERLAB_LLM_URL");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int rc = app.exit(err);
    return rc == 0 ? sc::kExitOk : sc::kExitUsage;
  }

  try {
    if (*p) {
      if (*pre_steps_opt) pre.steps = pre_steps;
      return sc::cmd_pretrain(pre);
    }
    if (*t) {
      if (*tr_steps_opt) tr.steps = tr_steps;
      return sc::cmd_train(tr);
    }
    if (*e) {
      if (!ev_base.empty()) ev.base = ev_base;
      if (!ev_config.empty()) ev.config = ev_config;
      if (!ev_out.empty()) ev.out = ev_out;
      if (!ev_samples.empty()) ev.samples_out = ev_samples;
      return sc::cmd_eval(ev);
    }
    if (*l) {
      if (!ln_base.empty()) ln.base = ln_base;
      if (!ln_out.empty()) ln.out_dir = ln_out;
      return sc::cmd_lens(ln);
    }
  } catch (const steerlab::ConfigError& err) {
    std::cerr << "error: " << err.what() << "\n";
    return sc::kExitUsage;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << "\n";
    return sc::kExitRuntime;
  }
  return sc::kExitUsage;
}
