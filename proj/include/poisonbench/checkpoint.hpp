#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "poisonbench/data.hpp"
#include "poisonbench/model.hpp"

namespace pb {

struct ManifestEntry {
  std::string name;
  Shape shape;
  std::size_t offset = 0;  // bytes into the parameter buffer
  ParamRole role = ParamRole::extractor;
};

// A trained float32 model plus how it was produced.
struct ModelCheckpoint {
  static constexpr std::uint32_t kFormatVersion = 1;

  std::uint32_t version = kFormatVersion;
  ArchitectureSpec spec;
  ChannelStats normalization;
  std::string hp_id;
  std::uint64_t seed = 0;
  std::size_t epoch = 0;
  double train_acc = 0.0;
  double test_acc = 0.0;
  std::vector<ManifestEntry> manifest;
  std::vector<float> buffer;

  static ModelCheckpoint from_model(const Model<float>& model, std::string hp_id, std::uint64_t seed,
                                    std::size_t epoch);
  Model<float> to_model() const;
};

// "PBCK", u32 version, u32 header length, JSON header, float32 LE parameters.
void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Training modes

// Checkpoint `index` of `pretrain` alone.
ModelCheckpoint pretrain_one(const ArchitectureSpec& spec, const DatasetSplit& train,
                             const DatasetSplit* test, const HyperparamSet& hp, bool augment,
                             std::uint64_t seed, std::size_t index);
// `n_checkpoints` independently seeded models trained on clean data. The seed
// of checkpoint i is mix64(seed, i). Normalization statistics come from
// `train`. Accuracies on `train` and (when given) `test` are recorded.
std::vector<ModelCheckpoint> pretrain(const ArchitectureSpec& spec, const DatasetSplit& train,
                                      const DatasetSplit* test, const HyperparamSet& hp,
                                      bool augment, std::uint64_t seed, std::size_t n_checkpoints);

// Frozen extractor; only the linear head trains. A fresh head is drawn when
// the class count differs from the checkpoint's.
Model<float> finetune_linear(const ModelCheckpoint& ckpt, const DatasetSplit& poisoned,
                             const HyperparamSet& hp, bool augment, std::uint64_t seed);
Model<float> finetune_linear(const Model<float>& model, const DatasetSplit& poisoned,
                             const HyperparamSet& hp, bool augment, std::uint64_t seed);

// Every parameter trains.
Model<float> finetune_e2e(const ModelCheckpoint& ckpt, const DatasetSplit& poisoned,
                          const HyperparamSet& hp, bool augment, std::uint64_t seed);
Model<float> finetune_e2e(const Model<float>& model, const DatasetSplit& poisoned,
                          const HyperparamSet& hp, bool augment, std::uint64_t seed);

// Fresh initialization from `seed`; never sees any checkpoint.
Model<float> train_from_scratch(const ArchitectureSpec& spec, const DatasetSplit& poisoned,
                                const ChannelStats& normalization, const HyperparamSet& hp,
                                bool augment, std::uint64_t seed);

}  // namespace pb
