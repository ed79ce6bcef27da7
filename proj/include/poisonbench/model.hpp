#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonbench/data.hpp"
#include "poisonbench/ops.hpp"
#include "poisonbench/optim.hpp"
#include "poisonbench/tensor.hpp"

namespace pb {

struct ConvBlock {
  std::size_t out_channels = 16;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  bool pool = true;  // 2x2 max pool, stride 2

  bool operator==(const ConvBlock&) const = default;
};

// Convolutional feature extractor followed by a linear head. Each block is
// conv (padding kernel/2) -> [batchnorm] -> relu -> [maxpool]; the flattened
// output of the last block is the feature vector.
struct ArchitectureSpec {
  std::string name;
  std::size_t input_channels = 3;
  std::size_t input_size = 16;
  std::vector<ConvBlock> blocks;
  std::size_t feature_dim = 0;
  std::size_t num_classes = 10;
  bool use_batchnorm = false;

  std::size_t computed_feature_dim() const;
  // Throws ConfigError when the blocks do not fit the input or feature_dim is
  // inconsistent.
  void validate() const;

  nlohmann::json to_json() const;
  static ArchitectureSpec from_json(const nlohmann::json& j);
  bool operator==(const ArchitectureSpec&) const = default;
};

// Three conv blocks, no batchnorm. The attacker's architecture by default.
ArchitectureSpec conv_small(std::size_t num_classes = 10, std::size_t input_size = 16);
// Four conv blocks with batchnorm.
ArchitectureSpec conv_wide(std::size_t num_classes = 10, std::size_t input_size = 16);
// Strided convolutions instead of pooling, no batchnorm.
ArchitectureSpec conv_strided(std::size_t num_classes = 10, std::size_t input_size = 16);
ArchitectureSpec architecture_preset(const std::string& name, std::size_t num_classes,
                                     std::size_t input_size);
std::vector<std::string> architecture_names();

enum class ParamRole { extractor, head, buffer };

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
  ParamRole role;
};

// Copies are deep: two Model objects never share parameter storage.
template <typename T>
class Model {
 public:
  Model() = default;
  // He fan-in initialization from `seed`.
  Model(ArchitectureSpec spec, std::uint64_t seed);

  Model(const Model& other);
  Model& operator=(const Model& other);
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  const ArchitectureSpec& spec() const { return spec_; }
  const ChannelStats& normalization() const { return norm_; }
  void set_normalization(ChannelStats stats);

  std::vector<NamedParam<T>>& params() { return params_; }
  const std::vector<NamedParam<T>>& params() const { return params_; }
  const NamedParam<T>& param(const std::string& name) const;

  // Handles (shared storage) of the parameters with the given role.
  std::vector<Tensor<T>> tensors(ParamRole role) const;
  std::vector<Tensor<T>> trainable(bool head_only) const;

  // Features of already-normalized input. `training` selects batch statistics
  // for batchnorm and updates its running buffers.
  Tensor<T> features_normalized(const Tensor<T>& x, bool training = false) const;
  // Features of pixel-space images in [0,1]; normalization is differentiable.
  Tensor<T> features(const Tensor<T>& pixels) const;
  Tensor<T> head(const Tensor<T>& features) const;
  Tensor<T> logits(const Tensor<T>& pixels) const;
  Tensor<T> logits_normalized(const Tensor<T>& x, bool training = false) const;
  std::vector<int> predict(const Tensor<T>& pixels) const;

  // Fresh head for `num_classes` classes.
  void reset_head(std::size_t num_classes, std::uint64_t seed);

  // FNV-1a over the bytes of the selected parameters, in declaration order.
  std::uint64_t hash(bool extractor_only) const;

  template <typename U>
  Model<U> cast() const {
    Model<U> out;
    out.spec_ = spec_;
    out.norm_ = norm_;
    for (const auto& p : params_) out.params_.push_back({p.name, p.value.template cast<U>(), p.role});
    return out;
  }

 private:
  template <typename U>
  friend class Model;

  Tensor<T> forward_blocks(const Tensor<T>& x, bool training) const;

  ArchitectureSpec spec_;
  ChannelStats norm_;
  std::vector<NamedParam<T>> params_;
};

extern template class Model<float>;
extern template class Model<double>;

// ---------------------------------------------------------------------------
// Training recipes

// One learning-rate recipe. The rate at epoch e is
// initial_lr * decay_factor^(number of milestones <= e).
struct HyperparamSet {
  std::string id;
  double initial_lr = 0.1;
  double decay_factor = 0.1;
  std::vector<std::size_t> milestones;
  std::size_t epochs = 1;
  OptimizerKind optimizer = OptimizerKind::sgd_momentum;
  std::size_t batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 2e-4;

  double lr_at(std::size_t epoch) const;
  // Shrinks epochs and milestones by `divisor`, keeping relative decay positions.
  HyperparamSet scaled(std::size_t divisor) const;

  nlohmann::json to_json() const;
  static HyperparamSet from_json(const nlohmann::json& j);
};

// Sets A-G.
HyperparamSet hyperparam_set(const std::string& id);
// FC baseline fine-tuning: ADAM, constant 0.00015625 for 20 epochs.
HyperparamSet fc_baseline_finetune();
// CP baseline fine-tuning: ADAM at 0.1 for 10 epochs.
HyperparamSet cp_baseline_finetune();
// HTBD baseline: SGD 0.5, decay 0.1 after epochs 5, 10, 15, 20 epochs.
HyperparamSet htbd_baseline_finetune();
// Resolves "A".."G" or one of the baseline recipe names above.
HyperparamSet resolve_hyperparams(const std::string& name);

struct TrainLog {
  std::vector<double> lr_per_epoch;
  std::vector<double> loss_per_epoch;
};

// Minibatch training of `model` on `data`. With head_only the extractor is
// frozen (evaluated in inference mode) and only the linear head updates.
void train_model(Model<float>& model, const DatasetSplit& data, const HyperparamSet& hp,
                 const AugmentationPolicy& aug, std::uint64_t seed, bool head_only,
                 TrainLog* log = nullptr);

// Fraction of argmax predictions equal to the label (ties -> lowest class).
double accuracy(const Model<float>& model, const DatasetSplit& data);

}  // namespace pb
