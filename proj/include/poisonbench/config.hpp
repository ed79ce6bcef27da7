#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonbench/checkpoint.hpp"
#include "poisonbench/harness.hpp"

namespace pb {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar_binary
  std::uint64_t seed = 0;
  int classes = 10;
  std::size_t per_class = 250;  // victim training images per class available
  std::size_t test_per_class = 100;
  std::size_t pretrain_per_class = 250;
  std::size_t image_size = 16;
  // cifar_binary only.
  std::vector<std::string> train_paths;
  std::vector<std::string> test_paths;
  std::vector<std::string> pretrain_paths;
  int pretrain_classes = 10;
};

struct PretrainConfig {
  std::string arch = "conv_small";
  std::vector<std::string> held_out = {"conv_wide", "conv_strided"};
  std::string hp_set = "D";
  std::size_t epoch_divisor = 10;
  std::size_t n_checkpoints = 10;
  std::optional<std::size_t> held_out_checkpoints;  // defaults to n_checkpoints
  bool augment = true;
  std::uint64_t seed = 1;
  std::string checkpoint_dir;  // cache; empty disables
};

struct BenchmarkConfig {
  std::string mode = "transfer_ffe";
  std::string threat = "white_box";
  std::uint64_t master_seed = 0;
  std::size_t n_trials = 100;
  std::size_t budget = 25;
  std::optional<std::size_t> per_class;  // defaults to data.per_class
  std::size_t patch_size = 5;
  std::string patch_file;
  std::optional<int> target_class;
  std::optional<int> base_class;
  bool flip_target = false;
  bool whole_class_metric = false;
  bool record_clean_acc = false;
  // Set name (A-G, fc_baseline, ...) or a full object; per-mode default.
  nlohmann::json victim_hp;
  std::optional<std::size_t> victim_epoch_divisor;
  std::optional<bool> victim_augment;
  std::vector<std::size_t> budget_sweep;
  double sweep_fraction = 0.01;
};

struct RuntimeConfig {
  bool deterministic = true;
  std::size_t parallelism = 1;
  std::string out_dir;
};

struct RunConfig {
  DataConfig data;
  PretrainConfig pretrain;
  std::string attack = "fc";
  nlohmann::json attack_fields = nlohmann::json::object();
  BenchmarkConfig benchmark;
  RuntimeConfig runtime;

  // Unknown keys anywhere are a ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  // Fully resolved document; from_json(to_json()) round-trips.
  nlohmann::json to_json() const;
  // Hash of everything except the runtime section.
  std::string hash() const;

  TrainingMode mode() const;
  HyperparamSet victim_hyperparams() const;
  HyperparamSet pretrain_hyperparams() const;
  Protocol protocol() const;
};

RunConfig load_run_config(const std::filesystem::path& path);

struct CheckpointSets {
  std::vector<ModelCheckpoint> attacker;
  std::vector<std::vector<ModelCheckpoint>> held_out;  // per pretrain.held_out entry
};

// Attacker checkpoints, plus the held-out architectures when `held_out` is set.
CheckpointSets obtain_all_checkpoints(const RunConfig& config, bool held_out, std::ostream* log = nullptr);

// Loads or generates the data and loads (from the cache) or trains every
// checkpoint. Progress goes to `log` when given.
BenchmarkEnv build_env(const RunConfig& config, std::ostream* log = nullptr);

// Checkpoints of one architecture for `config`, trained on `split` when not
// cached.
std::vector<ModelCheckpoint> obtain_checkpoints(const RunConfig& config, const std::string& arch,
                                                const DatasetSplit& train, const DatasetSplit* test,
                                                std::uint64_t seed, std::size_t count,
                                                std::ostream* log);

}  // namespace pb
