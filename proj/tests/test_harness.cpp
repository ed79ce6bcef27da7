#include <set>

#include <gtest/gtest.h>

#include "poisonbench/config.hpp"
#include "poisonbench/error.hpp"
#include "poisonbench/harness.hpp"

using namespace pb;

namespace {

HyperparamSet tiny_hp() {
  HyperparamSet hp;
  hp.id = "tiny";
  hp.initial_lr = 0.01;
  hp.epochs = 2;
  hp.optimizer = OptimizerKind::adam;
  hp.batch_size = 64;
  hp.weight_decay = 0.0;
  return hp;
}

// Randomly initialized checkpoints are enough for the protocol mechanics.
const BenchmarkEnv& small_env() {
  static const BenchmarkEnv env = [] {
    SynthConfig sc;
    sc.seed = 2;
    sc.per_class = 20;
    sc.test_per_class = 10;
    auto data = synth_generate(sc);
    BenchmarkEnv e;
    e.train = std::move(data.train);
    e.test = std::move(data.test);
    e.clean_stats = compute_channel_stats(e.train);
    for (std::uint64_t s = 0; s < 3; ++s) {
      Model<float> m(conv_small(10, 16), 10 + s);
      m.set_normalization(e.clean_stats);
      e.attacker.push_back(std::make_shared<const Model<float>>(std::move(m)));
    }
    e.attacker_spec = e.attacker.front()->spec();
    for (const auto* arch : {"conv_wide", "conv_strided"}) {
      Model<float> m(architecture_preset(arch, 10, 16), 99);
      m.set_normalization(e.clean_stats);
      e.held_out.push_back({std::make_shared<const Model<float>>(std::move(m))});
    }
    prepare_env(e);
    return e;
  }();
  return env;
}

Protocol small_protocol(const std::string& attack = "noop") {
  Protocol p;
  p.attack = attack;
  p.budget = 5;
  p.per_class = 20;
  p.victim_hp = tiny_hp();
  return p;
}

}  // namespace

TEST(Sampling, SameSeedSameTrial) {
  const auto p = small_protocol();
  const auto a = sample_trial(7, 3, p, small_env());
  const auto b = sample_trial(7, 3, p, small_env());
  EXPECT_EQ(a.to_json(), b.to_json());
  EXPECT_NE(a.to_json(), sample_trial(7, 4, p, small_env()).to_json());
  EXPECT_NE(a.to_json(), sample_trial(8, 3, p, small_env()).to_json());
}

TEST(Sampling, DrawsAreValidAndVaried) {
  const auto& env = small_env();
  const auto p = small_protocol();
  const auto pool = env.train.first_per_class(p.per_class);
  std::set<std::pair<int, int>> pairs;
  std::set<std::size_t> checkpoints;
  for (std::size_t i = 0; i < 100; ++i) {
    const auto t = sample_trial(1, i, p, env);
    ASSERT_NE(t.target_class, t.base_class);
    pairs.insert({t.target_class, t.base_class});
    checkpoints.insert(t.checkpoint_id);
    EXPECT_EQ(env.test.labels[t.target_index], t.target_class);
    EXPECT_EQ(env.test.ids[t.target_index], t.target_id);
    ASSERT_EQ(t.base_indices.size(), 5u);
    std::set<std::size_t> unique(t.base_indices.begin(), t.base_indices.end());
    EXPECT_EQ(unique.size(), 5u);
    for (std::size_t k = 0; k < 5; ++k) {
      EXPECT_EQ(pool.labels[t.base_indices[k]], t.base_class);
      EXPECT_EQ(pool.ids[t.base_indices[k]], t.base_ids[k]);
    }
    EXPECT_EQ(t.train_size, 200u);
  }
  EXPECT_GT(pairs.size(), 30u);
  EXPECT_EQ(checkpoints.size(), 3u);
}

TEST(Sampling, FixedPairAndBudgetLimits) {
  auto p = small_protocol();
  p.target_class = 6;
  p.base_class = 8;
  for (std::size_t i = 0; i < 10; ++i) {
    const auto t = sample_trial(3, i, p, small_env());
    EXPECT_EQ(t.target_class, 6);
    EXPECT_EQ(t.base_class, 8);
  }
  p.base_class = 6;
  EXPECT_THROW(sample_trial(3, 0, p, small_env()), ConfigError);
  p.base_class = 8;
  p.budget = 21;
  EXPECT_THROW(sample_trial(3, 0, p, small_env()), ConfigError);
}

TEST(Success, AlwaysBaseVictimSucceeds) {
  const auto p = small_protocol();
  const auto t = sample_trial(5, 0, p, small_env());
  Model<float> victim = *small_env().attacker.front();
  auto& params = victim.params();
  for (auto& v : params[params.size() - 2].value.data()) v = 0.0f;
  for (auto& v : params.back().value.data()) v = 0.0f;
  params.back().value.data()[t.base_class] = 1.0f;
  const auto target = small_env().test.image(t.target_index);
  int pred = -1;
  EXPECT_TRUE(evaluate_success(victim, t, target, std::nullopt, false, &pred));
  EXPECT_EQ(pred, t.base_class);
  EXPECT_TRUE(evaluate_success(victim, t, target, checkerboard_patch(5), true));
}

TEST(Trial, WhiteBoxFrozenVictimKeepsExtractor) {
  const auto& env = small_env();
  const auto p = small_protocol("fc");
  auto proto = p;
  proto.attack_config = {{"max_iters", 5}, {"epsilon", "8/255"}, {"step_size", 0.01}};
  const auto t = sample_trial(2, 0, proto, env);
  const auto r = run_trial(t, proto, env);
  ASSERT_FALSE(r.error);
  ASSERT_EQ(r.victims.size(), 1u);
  EXPECT_EQ(r.victims[0].extractor_hash, env.attacker[t.checkpoint_id]->hash(true));
  EXPECT_TRUE(std::isnan(r.clean_test_acc));
  EXPECT_GT(r.min_base_target_dist, 0.0);
}

TEST(Trial, FromScratchNeverStartsFromCheckpoint) {
  const auto& env = small_env();
  auto p = small_protocol();
  p.mode = TrainingMode::from_scratch;
  const auto t = sample_trial(2, 1, p, env);
  const auto r = run_trial(t, p, env);
  ASSERT_EQ(r.victims.size(), 1u);
  for (const auto& m : env.attacker) EXPECT_NE(r.victims[0].extractor_hash, m->hash(true));
}

TEST(Trial, BlackBoxAveragesHeldOutVictims) {
  const auto& env = small_env();
  auto p = small_protocol();
  p.threat = ThreatModel::black_box;
  p.record_clean_acc = true;
  const auto t = sample_trial(2, 2, p, env);
  const auto r = run_trial(t, p, env);
  ASSERT_EQ(r.victims.size(), 2u);
  EXPECT_EQ(r.victims[0].arch, "conv_wide");
  EXPECT_EQ(r.victims[1].arch, "conv_strided");
  double mean = 0.0;
  for (const auto& v : r.victims) {
    EXPECT_NE(v.param_hash, r.crafting_hash);
    EXPECT_NE(v.param_hash, env.attacker[t.checkpoint_id]->hash(false));
    mean += v.success / 2.0;
  }
  EXPECT_DOUBLE_EQ(r.success, mean);
  EXPECT_FALSE(std::isnan(r.clean_test_acc));
}

TEST(Benchmark, ParallelismDoesNotChangeResults) {
  const auto p = small_protocol();
  BenchmarkOptions opt;
  opt.master_seed = 11;
  opt.n_trials = 4;
  opt.config_hash = "h";
  const auto a = run_benchmark(p, small_env(), opt);
  opt.jobs = 3;
  const auto b = run_benchmark(p, small_env(), opt);
  std::vector<TrialRow> ra, rb;
  for (const auto& t : a.trials) ra.push_back(t.row(true));
  for (const auto& t : b.trials) rb.push_back(t.row(true));
  EXPECT_EQ(format_trials_csv(ra), format_trials_csv(rb));
  EXPECT_EQ(a.report.summary_json().dump(), b.report.summary_json().dump());
  EXPECT_EQ(a.report.n, 4u);
}

TEST(Benchmark, BudgetSweepHoldsRatio) {
  auto p = small_protocol();
  BenchmarkOptions opt;
  opt.n_trials = 1;
  const auto runs = run_budget_sweep(p, small_env(), opt, {1, 2}, 0.01);
  ASSERT_EQ(runs.size(), 2u);
  EXPECT_EQ(runs[0].report.train_size, 100u);
  EXPECT_EQ(runs[1].report.train_size, 200u);
  EXPECT_EQ(runs[1].report.budget, 2u);
  EXPECT_THROW(run_budget_sweep(p, small_env(), opt, {3}, 0.07), ConfigError);
}

TEST(RunConfigParsing, StrictAndRoundTrips) {
  EXPECT_THROW(RunConfig::from_json({{"extra", 1}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"benchmark", {{"trials", 3}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"attack", {{"name", "fc"}, {"radius", 1}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"benchmark", {{"mode", "sideways"}}}}), ConfigError);
  EXPECT_THROW(RunConfig::from_json({{"benchmark", {{"n_trials", "many"}}}}), ConfigError);
  const auto c = RunConfig::from_json({{"attack", {{"name", "cp"}}}, {"benchmark", {{"J", 10}}}});
  const auto again = RunConfig::from_json(c.to_json());
  EXPECT_EQ(again.to_json(), c.to_json());
  EXPECT_EQ(again.hash(), c.hash());
  EXPECT_DOUBLE_EQ(c.attack_fields.at("epsilon").get<double>(), 25.5 / 255.0);
}

TEST(RunConfigParsing, HashIgnoresRuntimeOnly) {
  auto a = RunConfig::from_json({{"runtime", {{"parallelism", 1}}}});
  auto b = RunConfig::from_json({{"runtime", {{"parallelism", 4}, {"out_dir", "x"}}}});
  EXPECT_EQ(a.hash(), b.hash());
  auto c = RunConfig::from_json({{"benchmark", {{"master_seed", 7}}}});
  EXPECT_NE(a.hash(), c.hash());
}

TEST(RunConfigParsing, ModeDefaultsForVictims) {
  const auto ffe = RunConfig::from_json(nlohmann::json::object());
  EXPECT_EQ(ffe.victim_hyperparams().id, "G");
  EXPECT_FALSE(ffe.protocol().victim_augment);
  const auto fst = RunConfig::from_json({{"benchmark", {{"mode", "from_scratch"}}}});
  EXPECT_EQ(fst.victim_hyperparams().id, "C/10");
  EXPECT_EQ(fst.victim_hyperparams().epochs, 20u);
  EXPECT_TRUE(fst.protocol().victim_augment);
  const auto fixed = RunConfig::from_json({{"benchmark", {{"target_class", 6}, {"base_class", 8}, {"patch", {{"size", 3}}}}}});
  EXPECT_EQ(fixed.protocol().target_class, 6);
  EXPECT_EQ(fixed.protocol().patch.size(), 3u);
}
