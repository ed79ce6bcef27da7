#pragma once

#include <cstdint>
#include <limits>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonbench/attacks.hpp"
#include "poisonbench/data.hpp"
#include "poisonbench/model.hpp"
#include "poisonbench/perturb.hpp"
#include "poisonbench/stats.hpp"

namespace pb {

enum class TrainingMode { transfer_ffe, transfer_e2e, from_scratch };
enum class ThreatModel { white_box, black_box };

std::string to_string(TrainingMode mode);
std::string to_string(ThreatModel threat);
TrainingMode parse_training_mode(const std::string& name);
ThreatModel parse_threat_model(const std::string& name);

// Everything that defines one benchmark cell.
struct Protocol {
  std::string attack = "fc";
  nlohmann::json attack_config = nlohmann::json::object();
  TrainingMode mode = TrainingMode::transfer_ffe;
  ThreatModel threat = ThreatModel::white_box;
  std::size_t budget = 25;      // J
  std::size_t per_class = 250;  // training images per class; N = per_class * classes
  // Fixed class pair; drawn per trial when unset.
  std::optional<int> target_class;
  std::optional<int> base_class;
  // Trigger shared by every trial of the run.
  PatchSpec patch = checkerboard_patch(5);
  bool flip_target = false;
  bool whole_class_metric = false;
  // Clean-victim accuracy needs a second victim training run; NaN when off.
  bool record_clean_acc = false;
  HyperparamSet victim_hp = hyperparam_set("G");
  bool victim_augment = false;
};

// Data and pretrained models shared read-only by all trials.
struct BenchmarkEnv {
  DatasetSplit train;  // victim training pool (first per_class of each class is used)
  DatasetSplit test;   // targets are drawn from here
  ChannelStats clean_stats;
  ArchitectureSpec attacker_spec;
  std::vector<std::shared_ptr<const Model<float>>> attacker;
  // Black-box victims, one list of checkpoints per held-out architecture.
  std::vector<std::vector<std::shared_ptr<const Model<float>>>> held_out;
  // Attacker checkpoints with a clean linear head for the victim classes;
  // backdoor crafting needs logits. Filled by prepare_env.
  std::vector<std::shared_ptr<const Model<float>>> attacker_heads;
};

// Fills `attacker_heads`: checkpoints whose head already matches the victim
// classes are used as is, the others get a linear probe (set G) fitted on the
// clean pool.
void prepare_env(BenchmarkEnv& env);

struct TrialSpec {
  std::size_t trial_index = 0;
  std::uint64_t master_seed = 0;
  std::uint64_t seed = 0;
  std::size_t checkpoint_id = 0;
  std::size_t target_index = 0;  // into env.test
  std::uint64_t target_id = 0;
  int target_class = -1;
  int base_class = -1;
  std::vector<std::size_t> base_indices;  // into the N-image training subset
  std::vector<std::uint64_t> base_ids;
  std::size_t budget = 0;
  std::size_t train_size = 0;
  TrainingMode mode = TrainingMode::transfer_ffe;
  ThreatModel threat = ThreatModel::white_box;
  std::string attack;

  nlohmann::json to_json() const;
};

// Per-trial seed mix64(master_seed, trial_index) drives every draw: the
// checkpoint, the class pair (distinct), the target (test split) and J bases
// without replacement (training split).
TrialSpec sample_trial(std::uint64_t master_seed, std::size_t trial_index, const Protocol& protocol,
                       const BenchmarkEnv& env);

struct VictimOutcome {
  std::string arch;
  int prediction = -1;        // on the evaluated (patched / flipped) target
  int clean_prediction = -1;  // on the untouched target
  double success = 0.0;
  double test_acc = 0.0;
  double whole_class = std::numeric_limits<double>::quiet_NaN();
  std::uint64_t param_hash = 0;
  std::uint64_t extractor_hash = 0;
};

struct TrialResult {
  TrialSpec spec;
  std::optional<std::string> error;  // crafting failure; excluded from N
  double success = 0.0;              // mean over victims
  std::vector<VictimOutcome> victims;
  double clean_test_acc = std::numeric_limits<double>::quiet_NaN();
  double poisoned_test_acc = 0.0;
  double craft_initial_loss = 0.0;
  double craft_final_loss = 0.0;
  // Feature distances on the first crafting model.
  double max_poison_target_dist = 0.0;
  double min_base_target_dist = 0.0;
  std::uint64_t crafting_hash = 0;
  double wall_s = 0.0;

  TrialRow row(bool deterministic) const;
};

// Success of one victim: argmax on x_t (optionally flipped, patched for
// backdoor attacks) equals the base class.
bool evaluate_success(const Model<float>& victim, const TrialSpec& spec, const Tensor<float>& target,
                      const std::optional<PatchSpec>& patch, bool flip, int* prediction = nullptr);

// What the attacker sees in a trial: the crafting checkpoint (with head), the
// target, the bases and the target-class pool. Crafting uses mix64(seed, 1).
CraftingContext crafting_context(const TrialSpec& spec, const Protocol& protocol, const BenchmarkEnv& env);

TrialResult run_trial(const TrialSpec& spec, const Protocol& protocol, const BenchmarkEnv& env);

struct BenchmarkOptions {
  std::uint64_t master_seed = 0;
  std::size_t n_trials = 100;
  std::size_t jobs = 1;
  bool deterministic = true;
  std::string config_hash;
};

struct BenchmarkRun {
  BenchmarkReport report;
  std::vector<TrialResult> trials;  // in trial-index order, errors included
};

BenchmarkRun run_benchmark(const Protocol& protocol, const BenchmarkEnv& env,
                           const BenchmarkOptions& options);

// One run per budget J with N = J / fraction images (per_class scaled to
// match), so J/N stays constant.
std::vector<BenchmarkRun> run_budget_sweep(const Protocol& protocol, const BenchmarkEnv& env,
                                           const BenchmarkOptions& options,
                                           const std::vector<std::size_t>& budgets,
                                           double fraction = 0.01);

}  // namespace pb
