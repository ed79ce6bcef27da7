#include "poisonbench/harness.hpp"

#include <atomic>
#include <chrono>
#include <cmath>
#include <exception>
#include <mutex>
#include <thread>

#include "poisonbench/checkpoint.hpp"
#include "poisonbench/error.hpp"
#include "poisonbench/rng.hpp"

namespace pb {

std::string to_string(TrainingMode mode) {
  switch (mode) {
    case TrainingMode::transfer_ffe: return "transfer_ffe";
    case TrainingMode::transfer_e2e: return "transfer_e2e";
    default: return "from_scratch";
  }
}

std::string to_string(ThreatModel threat) {
  return threat == ThreatModel::white_box ? "white_box" : "black_box";
}

TrainingMode parse_training_mode(const std::string& name) {
  if (name == "transfer_ffe" || name == "ffe") return TrainingMode::transfer_ffe;
  if (name == "transfer_e2e" || name == "e2e") return TrainingMode::transfer_e2e;
  if (name == "from_scratch" || name == "fst") return TrainingMode::from_scratch;
  throw ConfigError("unknown training mode '" + name + "'");
}

ThreatModel parse_threat_model(const std::string& name) {
  if (name == "white_box" || name == "wb") return ThreatModel::white_box;
  if (name == "black_box" || name == "bb") return ThreatModel::black_box;
  throw ConfigError("unknown threat model '" + name + "'");
}

void prepare_env(BenchmarkEnv& env) {
  if (env.attacker.empty()) throw ConfigError("benchmark: no attacker checkpoints");
  if (env.attacker_heads.size() == env.attacker.size()) return;
  env.attacker_heads.clear();
  for (std::size_t i = 0; i < env.attacker.size(); ++i) {
    const auto& m = env.attacker[i];
    if (m->spec().num_classes == static_cast<std::size_t>(env.train.class_count)) {
      env.attacker_heads.push_back(m);
    } else {
      env.attacker_heads.push_back(std::make_shared<const Model<float>>(
          finetune_linear(*m, env.train, hyperparam_set("G"), false, mix64(0x70726f6265ULL, i))));
    }
  }
}

nlohmann::json TrialSpec::to_json() const {
  return {{"trial_index", trial_index}, {"master_seed", master_seed}, {"seed", seed},
          {"checkpoint_id", checkpoint_id}, {"target_index", target_index}, {"target_id", target_id},
          {"target_class", target_class}, {"base_class", base_class}, {"base_ids", base_ids},
          {"J", budget}, {"N", train_size}, {"mode", pb::to_string(mode)},
          {"threat", pb::to_string(threat)}, {"attack", attack}};
}

TrialSpec sample_trial(std::uint64_t master_seed, std::size_t trial_index, const Protocol& protocol,
                       const BenchmarkEnv& env) {
  const int classes = env.train.class_count;
  if (classes < 2) throw ConfigError("sample_trial: need at least two classes");
  if (env.attacker.empty()) throw ConfigError("sample_trial: no checkpoints");
  TrialSpec s;
  s.trial_index = trial_index;
  s.master_seed = master_seed;
  s.seed = mix64(master_seed, trial_index);
  s.mode = protocol.mode;
  s.threat = protocol.threat;
  s.attack = protocol.attack;
  s.budget = protocol.budget;
  Rng rng(s.seed);
  s.checkpoint_id = rng.uniform_index(env.attacker.size());

  auto check_class = [classes](int c, const char* what) {
    if (c < 0 || c >= classes) throw ConfigError(std::string("sample_trial: ") + what + " out of range");
  };
  if (protocol.target_class) check_class(*protocol.target_class, "target_class");
  if (protocol.base_class) check_class(*protocol.base_class, "base_class");
  if (protocol.target_class && protocol.base_class && *protocol.target_class == *protocol.base_class) {
    throw ConfigError("sample_trial: target and base class must differ");
  }
  // Draw the class pair without collision.
  auto other_than = [&](int avoid) {
    auto u = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes - 1)));
    return u >= avoid ? u + 1 : u;
  };
  if (protocol.target_class) {
    s.target_class = *protocol.target_class;
    s.base_class = protocol.base_class ? *protocol.base_class : other_than(s.target_class);
  } else if (protocol.base_class) {
    s.base_class = *protocol.base_class;
    s.target_class = other_than(s.base_class);
  } else {
    s.target_class = static_cast<int>(rng.uniform_index(static_cast<std::uint64_t>(classes)));
    s.base_class = other_than(s.target_class);
  }

  const auto targets = env.test.indices_of_class(s.target_class);
  if (targets.empty()) throw DataError("sample_trial: test split has no image of the target class");
  s.target_index = targets[rng.uniform_index(targets.size())];
  s.target_id = env.test.ids[s.target_index];

  // Bases come from the first per_class images of each class, the split the
  // victim trains on.
  const DatasetSplit pool = env.train.first_per_class(protocol.per_class);
  s.train_size = pool.size();
  const auto candidates = pool.indices_of_class(s.base_class);
  if (protocol.budget > candidates.size()) {
    throw ConfigError("sample_trial: budget J=" + std::to_string(protocol.budget) + " exceeds the " +
                      std::to_string(candidates.size()) + " training images of the base class");
  }
  for (std::size_t k : rng.sample_without_replacement(candidates.size(), protocol.budget)) {
    s.base_indices.push_back(candidates[k]);
    s.base_ids.push_back(pool.ids[candidates[k]]);
  }
  return s;
}

bool evaluate_success(const Model<float>& victim, const TrialSpec& spec, const Tensor<float>& target,
                      const std::optional<PatchSpec>& patch, bool flip, int* prediction) {
  Tensor<float> x = flip ? hflip(target) : target;
  if (patch) x = apply_patch(x, *patch);
  const int pred = victim.predict(x).at(0);
  if (prediction != nullptr) *prediction = pred;
  return pred == spec.base_class;
}

namespace {

double feature_distance(const Tensor<float>& a, std::size_t row, const Tensor<float>& b) {
  const std::size_t d = b.numel();
  double s = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double diff = static_cast<double>(a[row * d + i]) - static_cast<double>(b[i]);
    s += diff * diff;
  }
  return std::sqrt(s);
}

Model<float> train_victim(const TrialSpec& spec, const Protocol& protocol, const BenchmarkEnv& env,
                          const Model<float>& start, const DatasetSplit& data, std::uint64_t seed) {
  switch (spec.mode) {
    case TrainingMode::transfer_ffe:
      return finetune_linear(start, data, protocol.victim_hp, protocol.victim_augment, seed);
    case TrainingMode::transfer_e2e:
      return finetune_e2e(start, data, protocol.victim_hp, protocol.victim_augment, seed);
    default:
      // Fresh weights of the victim architecture; `start` only names it.
      return train_from_scratch(start.spec(), data, env.clean_stats, protocol.victim_hp,
                                protocol.victim_augment, seed);
  }
}

}  // namespace

CraftingContext crafting_context(const TrialSpec& spec, const Protocol& protocol, const BenchmarkEnv& env) {
  if (env.attacker_heads.size() != env.attacker.size()) {
    throw ConfigError("crafting_context: environment not prepared");
  }
  const DatasetSplit pool = env.train.first_per_class(protocol.per_class);
  CraftingContext ctx;
  ctx.ensemble = {CraftingModel::from(env.attacker_heads.at(spec.checkpoint_id))};
  ctx.target = env.test.image(spec.target_index);
  ctx.bases = pool.gather(spec.base_indices);
  ctx.base_ids = spec.base_ids;
  ctx.base_class = spec.base_class;
  ctx.target_class = spec.target_class;
  ctx.seed = mix64(spec.seed, 1);
  ctx.target_pool = pool.gather(pool.indices_of_class(spec.target_class));
  ctx.patch = protocol.patch;
  return ctx;
}

TrialResult run_trial(const TrialSpec& spec, const Protocol& protocol, const BenchmarkEnv& env) {
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&t0]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };
  TrialResult result;
  result.spec = spec;
  if (env.attacker_heads.size() != env.attacker.size()) {
    throw ConfigError("run_trial: environment not prepared");
  }
  if (spec.threat == ThreatModel::black_box && env.held_out.empty()) {
    throw ConfigError("run_trial: black-box mode needs held-out architectures");
  }

  const DatasetSplit pool = env.train.first_per_class(protocol.per_class);
  const auto crafting_model = env.attacker_heads.at(spec.checkpoint_id);
  const bool backdoor = is_backdoor_attack(spec.attack);

  const CraftingContext ctx = crafting_context(spec, protocol, env);
  result.crafting_hash = ctx.ensemble[0].param_hash;

  PoisonSet poisons;
  try {
    poisons = find_attack(spec.attack).crafter(ctx, protocol.attack_config);
  } catch (const AttackError& e) {
    result.error = e.what();
    result.wall_s = elapsed();
    return result;
  }
  if (poisons.label != spec.base_class || poisons.size() != spec.budget) {
    throw AttackError("attack '" + spec.attack + "' broke the clean-label contract");
  }
  result.craft_initial_loss = poisons.initial_objective;
  result.craft_final_loss = poisons.final_objective;
  {
    NoGradScope<float> no_grad;
    const Tensor<float> ft = crafting_model->features(ctx.target);
    const Tensor<float> fp = crafting_model->features(poisons.poisons);
    const Tensor<float> fb = crafting_model->features(ctx.bases);
    result.min_base_target_dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < spec.budget; ++j) {
      result.max_poison_target_dist = std::max(result.max_poison_target_dist, feature_distance(fp, j, ft));
      result.min_base_target_dist = std::min(result.min_base_target_dist, feature_distance(fb, j, ft));
    }
  }

  const DatasetSplit poisoned = assemble_poisoned_trainset(pool, poisons);

  std::vector<std::shared_ptr<const Model<float>>> starts;
  if (spec.threat == ThreatModel::white_box) {
    starts.push_back(env.attacker.at(spec.checkpoint_id));
  } else {
    for (const auto& arch : env.held_out) {
      if (arch.empty()) throw ConfigError("run_trial: held-out architecture without checkpoints");
      starts.push_back(arch[spec.checkpoint_id % arch.size()]);
    }
  }

  const std::optional<PatchSpec> patch = backdoor ? std::optional<PatchSpec>(protocol.patch) : std::nullopt;
  double clean_acc_sum = 0.0;
  for (std::size_t v = 0; v < starts.size(); ++v) {
    const std::uint64_t vseed = mix64(spec.seed, 2 + v);
    const Model<float> victim = train_victim(spec, protocol, env, *starts[v], poisoned, vseed);
    VictimOutcome out;
    out.arch = victim.spec().name;
    out.success = evaluate_success(victim, spec, ctx.target, patch, protocol.flip_target, &out.prediction) ? 1.0 : 0.0;
    Tensor<float> plain = protocol.flip_target ? hflip(ctx.target) : ctx.target;
    out.clean_prediction = victim.predict(plain).at(0);
    out.test_acc = accuracy(victim, env.test);
    out.param_hash = victim.hash(false);
    out.extractor_hash = victim.hash(true);
    if (protocol.whole_class_metric && patch) {
      const auto idx = env.test.indices_of_class(spec.target_class);
      const auto preds = victim.predict(apply_patch(env.test.gather(idx), *patch));
      std::size_t hits = 0;
      for (int p : preds) hits += p == spec.base_class ? 1 : 0;
      out.whole_class = static_cast<double>(hits) / static_cast<double>(idx.size());
    }
    if (protocol.record_clean_acc) {
      const Model<float> clean = train_victim(spec, protocol, env, *starts[v], pool, vseed);
      clean_acc_sum += accuracy(clean, env.test);
    }
    result.success += out.success;
    result.poisoned_test_acc += out.test_acc;
    result.victims.push_back(std::move(out));
  }
  const auto nv = static_cast<double>(starts.size());
  result.success /= nv;
  result.poisoned_test_acc /= nv;
  if (protocol.record_clean_acc) result.clean_test_acc = clean_acc_sum / nv;
  result.wall_s = elapsed();
  return result;
}

TrialRow TrialResult::row(bool deterministic) const {
  TrialRow r;
  r.trial_index = spec.trial_index;
  r.seed = spec.seed;
  r.attack = spec.attack;
  r.mode = pb::to_string(spec.mode);
  r.threat = pb::to_string(spec.threat);
  r.target_class = spec.target_class;
  r.base_class = spec.base_class;
  r.target_id = spec.target_id;
  r.budget = spec.budget;
  r.n = spec.train_size;
  r.success = success;
  r.clean_test_acc = clean_test_acc;
  r.poisoned_test_acc = poisoned_test_acc;
  r.craft_final_loss = craft_final_loss;
  r.wall_s = deterministic ? 0.0 : wall_s;
  return r;
}

BenchmarkRun run_benchmark(const Protocol& protocol, const BenchmarkEnv& env,
                           const BenchmarkOptions& options) {
  find_attack(protocol.attack);
  std::vector<TrialResult> results(options.n_trials);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= options.n_trials) return;
      {
        std::lock_guard lock(failure_mutex);
        if (failure) return;
      }
      try {
        results[i] = run_trial(sample_trial(options.master_seed, i, protocol, env), protocol, env);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(options.jobs, options.n_trials));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);

  std::vector<TrialRow> rows;
  std::size_t errors = 0;
  for (const auto& r : results) {
    if (r.error) {
      ++errors;
    } else {
      rows.push_back(r.row(options.deterministic));
    }
  }
  BenchmarkRun run;
  run.report = BenchmarkReport::from_rows(std::move(rows), errors, options.config_hash);
  run.report.attack = protocol.attack;
  run.report.mode = pb::to_string(protocol.mode);
  run.report.threat = pb::to_string(protocol.threat);
  run.report.budget = protocol.budget;
  run.report.train_size = protocol.per_class * static_cast<std::size_t>(env.train.class_count);
  run.trials = std::move(results);
  return run;
}

std::vector<BenchmarkRun> run_budget_sweep(const Protocol& protocol, const BenchmarkEnv& env,
                                           const BenchmarkOptions& options,
                                           const std::vector<std::size_t>& budgets, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("budget sweep: fraction must be in (0,1]");
  const auto classes = static_cast<std::size_t>(env.train.class_count);
  std::vector<BenchmarkRun> runs;
  for (std::size_t j : budgets) {
    const auto n = static_cast<std::size_t>(std::llround(static_cast<double>(j) / fraction));
    if (n % classes != 0) {
      throw ConfigError("budget sweep: N=" + std::to_string(n) + " is not a multiple of " +
                        std::to_string(classes) + " classes");
    }
    Protocol p = protocol;
    p.budget = j;
    p.per_class = n / classes;
    runs.push_back(run_benchmark(p, env, options));
  }
  return runs;
}

}  // namespace pb
