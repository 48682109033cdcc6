#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "steerlab/rl/advantage.hpp"
#include "steerlab/rl/optimizer.hpp"
#include "steerlab/rl/policy_gradient.hpp"
#include "steerlab/rl/pretrain.hpp"
#include "steerlab/rl/train.hpp"
#include "support.hpp"

using namespace steerlab;
using namespace steerlab::testing;
namespace fs = std::filesystem;

TEST(Advantage, Examples) {
  const std::vector<double> r = {1, 0, 0, 1};
  const auto a = compute_advantages(r);
  EXPECT_EQ(a.baseline, 0.5);
  EXPECT_EQ(a.values, (std::vector<double>{0.5, -0.5, -0.5, 0.5}));
  const std::vector<double> one_hit = {0, 0, 0, 1};
  const auto b = compute_advantages(one_hit);
  EXPECT_EQ(b.baseline, 0.25);
  EXPECT_EQ(b.values, (std::vector<double>{-0.25, -0.25, -0.25, 0.75}));
  const auto c = compute_advantages(std::vector<double>{1, 0, 0, 0});
  EXPECT_EQ(c.baseline, 0.25);
  EXPECT_EQ(c.values, (std::vector<double>{0.75, -0.25, -0.25, -0.25}));
  const auto d = compute_advantages(std::vector<double>{0, 1});
  EXPECT_EQ(d.values, (std::vector<double>{-0.5, 0.5}));
}

TEST(Advantage, EqualRewardsGiveExactZeros) {
  for (double v : {0.0, 1.0, 0.1, -3.7}) {
    const std::vector<double> r(7, v);
    for (double a : compute_advantages(r).values) EXPECT_EQ(a, 0.0);
  }
}

TEST(Advantage, RejectsDegenerateGroups) {
  EXPECT_THROW(compute_advantages(std::vector<double>{}), InputError);
  EXPECT_THROW(compute_advantages(std::vector<double>{1.0}), InputError);
}

TEST(Advantage, MatchesNaiveMeanOnRandomVectors) {
  Rng rng(11);
  for (int t = 0; t < 1000; ++t) {
    const std::size_t n = 2 + rng.below(31);
    std::vector<double> r(n);
    for (auto& x : r) x = t % 2 ? static_cast<double>(rng.below(2)) : rng.normal();
    double mean = 0.0;
    for (double x : r) mean += x;
    mean /= static_cast<double>(n);
    const auto a = compute_advantages(r);
    EXPECT_NEAR(a.baseline, mean, 1e-12);
    double sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      EXPECT_NEAR(a.values[i], r[i] - mean, 1e-12);
      sum += a.values[i];
    }
    EXPECT_NEAR(sum, 0.0, 1e-12);
  }
}

TEST(PolicyGradient, EqualRewardsLeaveParametersUntouched) {
  const auto c = tiny_config();
  Policy policy = make_policy(TrainRegime::steering, random_params(c, 4));
  policy.steering = random_steering(c, 4);
  auto groups = coin_flip_groups(policy, 9);
  for (auto& g : groups) {
    for (auto& r : g.rollouts) r.reward = 1;
    assign_advantages(g);
  }
  const auto before = policy.steering->vectors;
  for (OptimizerKind kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    OptimizerConfig oc;
    oc.kind = kind;
    auto state = OptimizerState::for_params(trainable_parameters(TrainRegime::steering, policy), oc);
    const auto rep = policy_gradient_step(groups, policy, TrainRegime::steering, state, 0.1);
    EXPECT_EQ(rep.grad_norm, 0.0);
    for (std::size_t l = 0; l < before.size(); ++l) EXPECT_TRUE(policy.steering->vectors[l].bit_equal(before[l]));
  }
}

TEST(PolicyGradient, MatchesFiniteDifferencesOfSurrogate) {
  const auto c = tiny_config();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Policy policy = make_policy(TrainRegime::lora, random_params(c, seed), LoraSettings{2, 4.0, seed});
    policy.lora = random_lora(c, seed);
    const auto groups = coin_flip_groups(policy, seed + 50, 3, 5);
    std::size_t total = 0;
    for (const auto& g : groups) total += g.rollouts.size();
    auto surrogate = [&] {
      double l = 0.0;
      for (const auto& g : groups) {
        for (const auto& r : g.rollouts) {
          l -= r.advantage * sequence_logprob(policy.view(), r.prompt_tokens, r.completion_tokens).total;
        }
      }
      return l / static_cast<double>(total);
    };
    Gradients g = policy_gradient(groups, policy, TrainRegime::lora);
    for (std::size_t l = 0; l < policy.lora->layers.size(); ++l) {
      EXPECT_LE(relative_error(g.lora->layers[l].a, finite_difference_gradient_inplace(surrogate, policy.lora->layers[l].a)),
                1e-6);
      EXPECT_LE(relative_error(g.lora->layers[l].b, finite_difference_gradient_inplace(surrogate, policy.lora->layers[l].b)),
                1e-6);
    }
  }
}

TEST(PolicyGradient, RejectsUncentredGroups) {
  const auto c = tiny_config();
  Policy policy = make_policy(TrainRegime::steering, random_params(c, 1));
  auto groups = coin_flip_groups(policy, 2);
  groups[0].rollouts[0].advantage += 1.0;
  EXPECT_THROW(policy_gradient(groups, policy, TrainRegime::steering), InputError);
}

TEST(Estimator, MeanMatchesEnumeratedExpectation) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto r = estimator_check(seed, 4, 10000);
    EXPECT_LE(r.rel_error, 0.05) << "seed " << seed;
    EXPECT_GT(r.cos_with_grad, 0.9) << "seed " << seed;
  }
}

TEST(Optimizer, AdamFirstStepMovesBySignTimesLr) {
  Tensor x = Tensor::vector({1.0, -2.0, 0.5});
  Tensor g = Tensor::vector({0.3, -4.0, 0.0});
  std::vector<ParamRef> params = {{"x", &x}};
  std::vector<ParamRef> grads = {{"x", &g}};
  auto state = OptimizerState::for_params(params);
  optimizer_step(state, params, grads, 0.01);
  EXPECT_NEAR(x[0], 0.99, 1e-9);
  EXPECT_NEAR(x[1], -1.99, 1e-9);
  EXPECT_EQ(x[2], 0.5);
  Tensor bad = Tensor::vector({std::nan(""), 0.0, 0.0});
  std::vector<ParamRef> bad_grads = {{"x", &bad}};
  const Tensor before = x;
  try {
    optimizer_step(state, params, bad_grads, 0.01);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("'x'"), std::string::npos);
  }
  EXPECT_TRUE(x.bit_equal(before));
}

// ---------------------------------------------------------------------------
// full training loop

namespace {

fs::path fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / ("steerlab_rl_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(d);
  return d;
}

TrainJob small_job(const fs::path& dir, TrainRegime regime, int total_steps) {
  TrainJob job;
  job.run_dir = dir;
  job.regime = regime;
  job.config = small_train_config();
  job.config.total_steps = total_steps;
  job.resolved_config = {{"regime", std::string(to_string(regime))}, {"train", {{"total_steps", total_steps}}}};
  return job;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

std::vector<nlohmann::json> log_without_time(const fs::path& dir) {
  std::vector<nlohmann::json> out;
  std::istringstream in(slurp(dir / "train.log.jsonl"));
  std::string line;
  while (std::getline(in, line)) {
    auto j = nlohmann::json::parse(line);
    j.erase("elapsed_s");
    out.push_back(j);
  }
  return out;
}

}  // namespace

TEST(Train, BaseModelEarnsSomeReward) {
  const auto d = fresh_dir("reward");
  const auto res = train(small_job(d, TrainRegime::steering, 6), small_base());
  double reward = 0.0;
  for (const auto& s : res.steps) reward += s.mean_reward;
  EXPECT_GT(reward, 0.0) << "fixture too weak: every rollout scored 0";
  fs::remove_all(d);
}

TEST(Train, SameSeedIsByteIdentical) {
  const auto a = fresh_dir("det_a");
  const auto b = fresh_dir("det_b");
  for (TrainRegime r : {TrainRegime::steering, TrainRegime::lora}) {
    train(small_job(a, r, 6), small_base());
    train(small_job(b, r, 6), small_base());
    EXPECT_EQ(slurp(a / "ckpt_6.steerck"), slurp(b / "ckpt_6.steerck"));
    EXPECT_EQ(slurp(a / "optim_6.steerck"), slurp(b / "optim_6.steerck"));
    EXPECT_EQ(log_without_time(a), log_without_time(b));
    fs::remove_all(a);
    fs::remove_all(b);
  }
}

TEST(Train, ResumeReplaysTheUninterruptedRun) {
  const auto whole = fresh_dir("whole");
  const auto split = fresh_dir("split");
  train(small_job(whole, TrainRegime::steering, 6), small_base());
  train(small_job(split, TrainRegime::steering, 3), small_base());
  // a crash after step 4 leaves a stray log line past the last checkpoint
  { std::ofstream(split / "train.log.jsonl", std::ios::app) << R"({"step":4,"loss":0})" << "\n"; }
  const auto res = train(small_job(split, TrainRegime::steering, 6), small_base());
  EXPECT_EQ(res.start_step, 3);
  EXPECT_EQ(res.steps.size(), 3u);
  EXPECT_EQ(slurp(whole / "ckpt_6.steerck"), slurp(split / "ckpt_6.steerck"));
  EXPECT_EQ(slurp(whole / "optim_6.steerck"), slurp(split / "optim_6.steerck"));
  EXPECT_EQ(log_without_time(whole), log_without_time(split));
  fs::remove_all(whole);
  fs::remove_all(split);
}

TEST(Train, ResumeRejectsAChangedConfig) {
  const auto d = fresh_dir("mismatch");
  train(small_job(d, TrainRegime::steering, 3), small_base());
  auto job = small_job(d, TrainRegime::steering, 6);
  job.resolved_config["train"]["learning_rate"] = 1.0;
  EXPECT_THROW(train(job, small_base()), ConfigError);
  fs::remove_all(d);
}

TEST(Train, ZeroStepsWritesTheInitialAdapter) {
  const auto d = fresh_dir("zero");
  const auto res = train(small_job(d, TrainRegime::steering, 0), small_base());
  EXPECT_EQ(res.final_step, 0);
  const auto ck = load_checkpoint(d / "ckpt_0.steerck");
  const auto s = steering_from_checkpoint(ck, small_model());
  for (const auto& v : s.vectors) {
    for (double x : v.data()) EXPECT_EQ(x, 0.0);
  }
  EXPECT_EQ(slurp(d / "train.log.jsonl"), "");
  fs::remove_all(d);
}

TEST(Train, LogHasOneRecordPerStep) {
  const auto d = fresh_dir("log");
  train(small_job(d, TrainRegime::lora, 4), small_base());
  std::istringstream in(slurp(d / "train.log.jsonl"));
  std::string line;
  int step = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["step"], ++step);
    for (const char* k : {"mean_reward", "baseline_mean", "mean_abs_advantage", "grad_norm", "loss", "lr", "elapsed_s"}) {
      EXPECT_TRUE(j.contains(k)) << k;
    }
    EXPECT_EQ(j["lr"], 5e-3);
  }
  EXPECT_EQ(step, 4);
  EXPECT_TRUE(fs::exists(d / "ckpt_3.steerck"));
  EXPECT_TRUE(fs::exists(d / "ckpt_4.steerck"));
  EXPECT_FALSE(fs::exists(d / "ckpt_2.steerck"));
  fs::remove_all(d);
}

TEST(Train, DefaultLearningRatesPerRegime) {
  EXPECT_EQ(default_learning_rate(TrainRegime::full), 2e-5);
  EXPECT_EQ(default_learning_rate(TrainRegime::steering), 5e-4);
  EXPECT_EQ(default_learning_rate(TrainRegime::lora), 5e-4);
  TrainConfig c;
  EXPECT_EQ(c.lr_for(TrainRegime::full), 2e-5);
  c.learning_rate = 0.1;
  EXPECT_EQ(c.lr_for(TrainRegime::full), 0.1);
}

// ---------------------------------------------------------------------------
// pretraining

namespace {

std::vector<Document> few_docs() {
  CorpusConfig c = small_corpus();
  c.documents = 200;
  return gen_pretrain_corpus(c);
}

}  // namespace

TEST(Pretrain, ZeroStepsReturnsTheInitialisation) {
  PretrainConfig pc;
  pc.steps = 0;
  pc.seed = 8;
  const auto p = pretrain(few_docs(), small_model(), pc);
  const auto init = init_params(small_model(), derive_seed(8, 0), pc.init_std);
  EXPECT_TRUE(p.token_embedding.bit_equal(init.token_embedding));
  EXPECT_TRUE(p.unembedding.bit_equal(init.unembedding));
}

TEST(Pretrain, LossFallsAndRunsRepeat) {
  PretrainConfig pc;
  pc.steps = 60;
  pc.lr = 1e-2;
  pc.seed = 8;
  PretrainReport r1, r2;
  const auto a = pretrain(few_docs(), small_model(), pc, &r1);
  const auto b = pretrain(few_docs(), small_model(), pc, &r2);
  EXPECT_LT(r1.final_heldout_loss, r1.initial_heldout_loss);
  EXPECT_LT(r1.train_loss.back(), r1.train_loss.front());
  EXPECT_TRUE(a.token_embedding.bit_equal(b.token_embedding));
  EXPECT_EQ(r1.train_loss, r2.train_loss);
}

TEST(Pretrain, WeightDecayShrinksMatrices) {
  PretrainConfig pc;
  pc.steps = 30;
  pc.lr = 1e-2;
  pc.seed = 8;
  pc.weight_decay = 0.0;
  const auto plain = pretrain(few_docs(), small_model(), pc);
  pc.weight_decay = 5.0;
  const auto decayed = pretrain(few_docs(), small_model(), pc);
  EXPECT_LT(squared_norm(decayed.layers[0].w_down.data()), squared_norm(plain.layers[0].w_down.data()));
  EXPECT_LT(squared_norm(decayed.token_embedding.data()), squared_norm(plain.token_embedding.data()));
}

TEST(Pretrain, RejectsVocabularyMismatch) {
  PretrainConfig pc;
  pc.steps = 1;
  auto m = small_model();
  m.vocab_size = 20;
  EXPECT_THROW(pretrain(few_docs(), m, pc), ConfigError);
}
