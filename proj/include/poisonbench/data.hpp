#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonbench/rng.hpp"
#include "poisonbench/tensor.hpp"

namespace pb {

// Images [N,C,H,W] with pixels in [0,1], integer labels and stable ids.
struct DatasetSplit {
  Tensor<float> images;
  std::vector<int> labels;
  int class_count = 0;
  std::vector<std::uint64_t> ids;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t height() const { return images.dim(2); }
  std::size_t width() const { return images.dim(3); }
  std::size_t image_numel() const { return channels() * height() * width(); }

  // [1,C,H,W] copy of image `index`.
  Tensor<float> image(std::size_t index) const { return images.slice0(index, index + 1); }
  std::vector<std::size_t> indices_of_class(int label) const;
  std::optional<std::size_t> index_of_id(std::uint64_t id) const;
  DatasetSplit subset(const std::vector<std::size_t>& indices) const;
  // The first `per_class` images of every class, in dataset order.
  DatasetSplit first_per_class(std::size_t per_class) const;
  // Images and labels for `indices`, as a batch.
  Tensor<float> gather(const std::vector<std::size_t>& indices) const;

  // Throws DataError when any invariant is broken.
  void validate() const;
};

// Per-channel statistics used for input normalization.
struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> stddev;

  nlohmann::json to_json() const;
  static ChannelStats from_json(const nlohmann::json& j);
  static ChannelStats identity(std::size_t channels);
};

ChannelStats compute_channel_stats(const DatasetSplit& split);

struct AugmentationPolicy {
  bool random_crop = false;
  std::size_t crop_pad = 4;
  bool horizontal_flip = false;
  double flip_p = 0.5;
  std::optional<ChannelStats> normalization;

  // Crops, flips and normalization: the pretraining recipe.
  static AugmentationPolicy standard(ChannelStats stats) {
    return {true, 4, true, 0.5, std::move(stats)};
  }
  static AugmentationPolicy normalize_only(ChannelStats stats) {
    return {false, 4, false, 0.5, std::move(stats)};
  }
  bool augments() const { return random_crop || horizontal_flip; }
};

struct CropOffset {
  std::size_t dy = 0;
  std::size_t dx = 0;
};

// Offsets of the crop window inside the zero-padded image, uniform on
// {0..2*pad}^2.
CropOffset draw_crop_offset(std::size_t pad, Rng& rng);
// Pads image [C,H,W] (or batch item) by `pad` zeros and takes the window at
// `offset`, writing into `dst`.
void crop_padded(const float* src, std::size_t channels, std::size_t height, std::size_t width,
                 std::size_t pad, CropOffset offset, float* dst);
// Mirrors every image of [N,C,H,W] left-right.
Tensor<float> hflip(const Tensor<float>& images);
Tensor<float> normalize(const Tensor<float>& images, const ChannelStats& stats);

// Training-time transform: crop, flip, then normalization. With crops and
// flips disabled it only normalizes.
Tensor<float> augment_batch(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng);

// ---------------------------------------------------------------------------
// Record files: one label byte followed by C*H*W pixel bytes (channel planes,
// row-major). CIFAR-10 binaries are the 3x32x32 instance.

inline constexpr std::size_t kCifarRecordBytes = 3073;

DatasetSplit load_cifar_binary(const std::filesystem::path& path);
DatasetSplit load_cifar_binaries(const std::vector<std::filesystem::path>& paths);

struct RecordLayout {
  std::size_t channels = 3;
  std::size_t height = 32;
  std::size_t width = 32;
  int class_count = 10;
};

DatasetSplit load_records(const std::filesystem::path& path, const RecordLayout& layout);
// Pixels are quantized to round(255 x).
void save_records(const std::filesystem::path& path, const DatasetSplit& split);

// Record file plus `<path>.json` sidecar (layout, generator seed/version).
void save_dataset(const std::filesystem::path& path, const DatasetSplit& split,
                  const nlohmann::json& provenance);
DatasetSplit load_dataset(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Synthetic class-conditional images: coloured shapes on textured noise.

enum class SynthVariant { pretrain, finetune };

struct SynthConfig {
  std::uint64_t seed = 0;
  int class_count = 10;
  std::size_t per_class = 250;
  std::size_t test_per_class = 100;
  std::size_t image_size = 16;
  SynthVariant variant = SynthVariant::finetune;
};

inline constexpr int kSynthGeneratorVersion = 1;

struct SynthDataset {
  DatasetSplit train;
  DatasetSplit test;
};

// Image `i` of class `k` depends only on (seed, variant, split, k, i), so a
// larger per_class extends a smaller one. Pixels lie on the 1/255 grid.
SynthDataset synth_generate(const SynthConfig& config);

// ---------------------------------------------------------------------------
// Poisons

// J perturbed copies of training images, all carrying the base-class label.
struct PoisonSet {
  Tensor<float> poisons;  // [J,C,H,W]
  std::vector<std::uint64_t> base_ids;
  int label = -1;
  std::optional<double> epsilon;
  std::string attack;
  nlohmann::json config = nlohmann::json::object();
  double initial_objective = 0.0;
  double final_objective = 0.0;
  std::vector<double> objective_trace;
  std::vector<double> coefficients;  // CP only

  std::size_t size() const { return base_ids.size(); }
};

// Replaces each base image (looked up by id) with its poison. Everything else,
// including labels, is untouched.
DatasetSplit assemble_poisoned_trainset(const DatasetSplit& clean, const PoisonSet& poisons);

// JSON manifest at `dir/poisons.json` plus record buffer `dir/poisons.bin`.
// Pixels are quantized towards the base image so the epsilon bound survives.
void save_poison_set(const std::filesystem::path& dir, const PoisonSet& set,
                     const Tensor<float>& bases);
PoisonSet load_poison_set(const std::filesystem::path& dir);

}  // namespace pb
