#include "poisonbench/model.hpp"

#include <algorithm>

#include <cmath>
#include <cstring>

#include "poisonbench/error.hpp"
#include "poisonbench/rng.hpp"

namespace pb {

namespace {

std::size_t conv_out(std::size_t size, const ConvBlock& b) {
  const std::size_t pad = b.kernel / 2;
  if (size + 2 * pad < b.kernel || b.stride == 0) return 0;
  return (size + 2 * pad - b.kernel) / b.stride + 1;
}

}  // namespace

std::size_t ArchitectureSpec::computed_feature_dim() const {
  std::size_t size = input_size;
  std::size_t channels = input_channels;
  for (const auto& b : blocks) {
    size = conv_out(size, b);
    if (size == 0) return 0;
    if (b.pool) {
      if (size < 2) return 0;
      size /= 2;
    }
    channels = b.out_channels;
  }
  return channels * size * size;
}

void ArchitectureSpec::validate() const {
  if (name.empty()) throw ConfigError("architecture: empty name");
  if (blocks.empty()) throw ConfigError("architecture " + name + ": no conv blocks");
  if (num_classes < 2) throw ConfigError("architecture " + name + ": need at least two classes");
  for (const auto& b : blocks) {
    if (b.out_channels == 0 || b.kernel == 0 || b.stride == 0) {
      throw ConfigError("architecture " + name + ": zero-sized block");
    }
  }
  const std::size_t computed = computed_feature_dim();
  if (computed == 0) {
    throw ConfigError("architecture " + name + ": blocks do not fit a " +
                      std::to_string(input_size) + "x" + std::to_string(input_size) + " input");
  }
  if (computed != feature_dim) {
    throw ConfigError("architecture " + name + ": feature_dim " + std::to_string(feature_dim) +
                      " but blocks produce " + std::to_string(computed));
  }
}

nlohmann::json ArchitectureSpec::to_json() const {
  nlohmann::json jb = nlohmann::json::array();
  for (const auto& b : blocks) {
    jb.push_back({{"out_channels", b.out_channels}, {"kernel", b.kernel}, {"stride", b.stride},
                  {"pool", b.pool}});
  }
  return {{"name", name},           {"input_channels", input_channels},
          {"input_size", input_size}, {"conv_blocks", jb},
          {"feature_dim", feature_dim}, {"num_classes", num_classes},
          {"use_batchnorm", use_batchnorm}};
}

ArchitectureSpec ArchitectureSpec::from_json(const nlohmann::json& j) {
  ArchitectureSpec s;
  s.name = j.at("name").get<std::string>();
  s.input_channels = j.at("input_channels").get<std::size_t>();
  s.input_size = j.at("input_size").get<std::size_t>();
  for (const auto& b : j.at("conv_blocks")) {
    s.blocks.push_back({b.at("out_channels").get<std::size_t>(), b.at("kernel").get<std::size_t>(),
                        b.at("stride").get<std::size_t>(), b.at("pool").get<bool>()});
  }
  s.feature_dim = j.at("feature_dim").get<std::size_t>();
  s.num_classes = j.at("num_classes").get<std::size_t>();
  s.use_batchnorm = j.at("use_batchnorm").get<bool>();
  s.validate();
  return s;
}

namespace {

ArchitectureSpec finish(ArchitectureSpec s) {
  s.feature_dim = s.computed_feature_dim();
  s.validate();
  return s;
}

}  // namespace

ArchitectureSpec conv_small(std::size_t num_classes, std::size_t input_size) {
  return finish({"conv_small", 3, input_size, {{16, 3, 1, true}, {32, 3, 1, true}, {32, 3, 1, true}},
                 0, num_classes, true});
}

ArchitectureSpec conv_wide(std::size_t num_classes, std::size_t input_size) {
  return finish({"conv_wide",
                 3,
                 input_size,
                 {{24, 3, 1, true}, {48, 3, 1, true}, {64, 3, 1, true}, {64, 3, 1, false}},
                 0,
                 num_classes,
                 true});
}

ArchitectureSpec conv_strided(std::size_t num_classes, std::size_t input_size) {
  return finish({"conv_strided",
                 3,
                 input_size,
                 {{16, 3, 2, false}, {32, 3, 2, false}, {48, 3, 2, false}},
                 0,
                 num_classes,
                 true});
}

ArchitectureSpec architecture_preset(const std::string& name, std::size_t num_classes,
                                     std::size_t input_size) {
  if (name == "conv_small") return conv_small(num_classes, input_size);
  if (name == "conv_wide") return conv_wide(num_classes, input_size);
  if (name == "conv_strided") return conv_strided(num_classes, input_size);
  throw ConfigError("unknown architecture '" + name + "'");
}

std::vector<std::string> architecture_names() { return {"conv_small", "conv_wide", "conv_strided"}; }

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> he_normal(Shape shape, std::size_t fan_in, double gain, Rng& rng) {
  Tensor<T> t(std::move(shape));
  const double stddev = std::sqrt(gain / static_cast<double>(fan_in));
  for (auto& v : t.data()) v = static_cast<T>(rng.normal(0.0, stddev));
  return t;
}

}  // namespace

template <typename T>
Model<T>::Model(ArchitectureSpec spec, std::uint64_t seed) : spec_(std::move(spec)) {
  spec_.validate();
  norm_ = ChannelStats::identity(spec_.input_channels);
  Rng rng(seed);
  std::size_t in = spec_.input_channels;
  for (std::size_t i = 0; i < spec_.blocks.size(); ++i) {
    const auto& b = spec_.blocks[i];
    const std::string idx = std::to_string(i);
    params_.push_back({"conv" + idx + ".weight",
                       he_normal<T>({b.out_channels, in, b.kernel, b.kernel}, in * b.kernel * b.kernel,
                                    2.0, rng),
                       ParamRole::extractor});
    if (spec_.use_batchnorm) {
      params_.push_back({"bn" + idx + ".weight", Tensor<T>::ones({b.out_channels}), ParamRole::extractor});
      params_.push_back({"bn" + idx + ".bias", Tensor<T>::zeros({b.out_channels}), ParamRole::extractor});
      params_.push_back({"bn" + idx + ".running_mean", Tensor<T>::zeros({b.out_channels}), ParamRole::buffer});
      params_.push_back({"bn" + idx + ".running_var", Tensor<T>::ones({b.out_channels}), ParamRole::buffer});
    } else {
      params_.push_back({"conv" + idx + ".bias", Tensor<T>::zeros({b.out_channels}), ParamRole::extractor});
    }
    in = b.out_channels;
  }
  params_.push_back({"head.weight", he_normal<T>({spec_.num_classes, spec_.feature_dim}, spec_.feature_dim, 1.0, rng),
                     ParamRole::head});
  params_.push_back({"head.bias", Tensor<T>::zeros({spec_.num_classes}), ParamRole::head});
}

template <typename T>
Model<T>::Model(const Model& other) : spec_(other.spec_), norm_(other.norm_) {
  for (const auto& p : other.params_) params_.push_back({p.name, p.value.clone(), p.role});
}

template <typename T>
Model<T>& Model<T>::operator=(const Model& other) {
  if (this != &other) {
    Model copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
void Model<T>::set_normalization(ChannelStats stats) {
  if (stats.mean.size() != spec_.input_channels || stats.stddev.size() != spec_.input_channels) {
    throw ShapeError("set_normalization: expected " + std::to_string(spec_.input_channels) +
                     " channels");
  }
  norm_ = std::move(stats);
}

template <typename T>
const NamedParam<T>& Model<T>::param(const std::string& name) const {
  for (const auto& p : params_)
    if (p.name == name) return p;
  throw Error("model: no parameter named '" + name + "'");
}

template <typename T>
std::vector<Tensor<T>> Model<T>::tensors(ParamRole role) const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_)
    if (p.role == role) out.push_back(p.value);
  return out;
}

template <typename T>
std::vector<Tensor<T>> Model<T>::trainable(bool head_only) const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) {
    if (p.role == ParamRole::head || (!head_only && p.role == ParamRole::extractor)) {
      out.push_back(p.value);
    }
  }
  return out;
}

template <typename T>
Tensor<T> Model<T>::forward_blocks(const Tensor<T>& x, bool training) const {
  Tensor<T> h = x;
  std::size_t k = 0;
  for (const auto& b : spec_.blocks) {
    h = conv2d(h, params_[k++].value, b.stride, b.kernel / 2);
    if (spec_.use_batchnorm) {
      const Tensor<T>& gamma = params_[k++].value;
      const Tensor<T>& beta = params_[k++].value;
      Tensor<T> running_mean = params_[k++].value;
      Tensor<T> running_var = params_[k++].value;
      h = batch_norm(h, gamma, beta, running_mean, running_var, BatchNormOptions{training, 0.1, 1e-5});
    } else {
      h = add_channel_bias(h, params_[k++].value);
    }
    h = relu(h);
    if (b.pool) h = max_pool2d(h, 2, 2);
  }
  return flatten(h);
}

template <typename T>
Tensor<T> Model<T>::features_normalized(const Tensor<T>& x, bool training) const {
  if (x.rank() != 4 || x.dim(1) != spec_.input_channels || x.dim(2) != spec_.input_size ||
      x.dim(3) != spec_.input_size) {
    throw ShapeError("model " + spec_.name + ": input " + shape_str(x.shape()) +
                     " does not match [N," + std::to_string(spec_.input_channels) + "," +
                     std::to_string(spec_.input_size) + "," + std::to_string(spec_.input_size) + "]");
  }
  return forward_blocks(x, training);
}

template <typename T>
Tensor<T> Model<T>::features(const Tensor<T>& pixels) const {
  std::vector<T> mean(norm_.mean.begin(), norm_.mean.end());
  std::vector<T> stddev(norm_.stddev.begin(), norm_.stddev.end());
  return features_normalized(normalize_channels<T>(pixels, mean, stddev), false);
}

template <typename T>
Tensor<T> Model<T>::head(const Tensor<T>& features) const {
  const std::size_t n = params_.size();
  return linear(features, params_[n - 2].value, params_[n - 1].value);
}

template <typename T>
Tensor<T> Model<T>::logits(const Tensor<T>& pixels) const {
  return head(features(pixels));
}

template <typename T>
Tensor<T> Model<T>::logits_normalized(const Tensor<T>& x, bool training) const {
  return head(features_normalized(x, training));
}

template <typename T>
std::vector<int> Model<T>::predict(const Tensor<T>& pixels) const {
  NoGradScope<T> no_grad;
  return argmax_rows(logits(pixels));
}

template <typename T>
void Model<T>::reset_head(std::size_t num_classes, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("reset_head: need at least two classes");
  Rng rng(seed);
  const std::size_t n = params_.size();
  spec_.num_classes = num_classes;
  params_[n - 2].value = he_normal<T>({num_classes, spec_.feature_dim}, spec_.feature_dim, 1.0, rng);
  params_[n - 1].value = Tensor<T>::zeros({num_classes});
}

template <typename T>
std::uint64_t Model<T>::hash(bool extractor_only) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& p : params_) {
    if (extractor_only && p.role == ParamRole::head) continue;
    const auto* bytes = reinterpret_cast<const unsigned char*>(p.value.ptr());
    for (std::size_t i = 0; i < p.value.numel() * sizeof(T); ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------

double HyperparamSet::lr_at(std::size_t epoch) const {
  double lr = initial_lr;
  for (std::size_t m : milestones)
    if (epoch >= m) lr *= decay_factor;
  return lr;
}

HyperparamSet HyperparamSet::scaled(std::size_t divisor) const {
  if (divisor <= 1) return *this;
  HyperparamSet s = *this;
  s.epochs = std::max<std::size_t>(1, (epochs + divisor / 2) / divisor);
  s.milestones.clear();
  for (std::size_t m : milestones) {
    const std::size_t scaled_m = (m * s.epochs + epochs / 2) / epochs;
    if (scaled_m < s.epochs && (s.milestones.empty() || scaled_m > s.milestones.back())) {
      s.milestones.push_back(scaled_m);
    }
  }
  s.id = id + "/" + std::to_string(divisor);
  return s;
}

nlohmann::json HyperparamSet::to_json() const {
  return {{"id", id},
          {"initial_lr", initial_lr},
          {"decay_factor", decay_factor},
          {"milestones", milestones},
          {"epochs", epochs},
          {"optimizer", to_string(optimizer)},
          {"batch_size", batch_size},
          {"momentum", momentum},
          {"weight_decay", weight_decay}};
}

HyperparamSet HyperparamSet::from_json(const nlohmann::json& j) {
  static const char* const kKeys[] = {"id", "initial_lr", "decay_factor", "milestones", "epochs",
                                      "optimizer", "batch_size", "momentum", "weight_decay"};
  if (!j.is_object()) throw ConfigError("hyperparameters: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw ConfigError("hyperparameters: unknown key '" + key + "'");
    }
  }
  HyperparamSet h;
  h.id = j.value("id", std::string("custom"));
  h.initial_lr = j.at("initial_lr").get<double>();
  h.decay_factor = j.value("decay_factor", 1.0);
  h.milestones = j.value("milestones", std::vector<std::size_t>{});
  h.epochs = j.at("epochs").get<std::size_t>();
  const auto opt = j.value("optimizer", std::string("sgd"));
  if (opt != "sgd" && opt != "adam") throw ConfigError("hyperparameters: unknown optimizer '" + opt + "'");
  h.optimizer = opt == "adam" ? OptimizerKind::adam : OptimizerKind::sgd_momentum;
  h.batch_size = j.value("batch_size", std::size_t{128});
  h.momentum = j.value("momentum", 0.9);
  h.weight_decay = j.value("weight_decay", 2e-4);
  return h;
}

HyperparamSet hyperparam_set(const std::string& id) {
  using enum OptimizerKind;
  if (id == "A") return {"A", 0.001, 0.5, {32, 64, 96, 128, 160, 192}, 200, adam};
  if (id == "B") return {"B", 0.01, 0.1, {100, 150}, 200, sgd_momentum};
  if (id == "C") return {"C", 0.1, 0.1, {100, 150}, 200, sgd_momentum};
  if (id == "D") return {"D", 0.1, 0.1, {200, 300, 350}, 400, sgd_momentum};
  if (id == "E") return {"E", 0.1, 0.1, {40, 60}, 100, sgd_momentum};
  if (id == "F") return {"F", 0.1, 0.1, {75, 90}, 100, sgd_momentum};
  if (id == "G") return {"G", 0.01, 0.1, {30}, 40, sgd_momentum};
  throw ConfigError("unknown hyperparameter set '" + id + "' (expected A-G)");
}

HyperparamSet fc_baseline_finetune() {
  // Fixed at 0.00015625; note 0.001 * 0.5^6 would be ten times smaller.
  return {"fc_baseline", 0.00015625, 1.0, {}, 20, OptimizerKind::adam};
}

HyperparamSet cp_baseline_finetune() {
  return {"cp_baseline", 0.1, 1.0, {}, 10, OptimizerKind::adam};
}

HyperparamSet htbd_baseline_finetune() {
  return {"htbd_baseline", 0.5, 0.1, {5, 10, 15}, 20, OptimizerKind::sgd_momentum};
}

HyperparamSet resolve_hyperparams(const std::string& name) {
  if (name == "fc_baseline") return fc_baseline_finetune();
  if (name == "cp_baseline") return cp_baseline_finetune();
  if (name == "htbd_baseline") return htbd_baseline_finetune();
  return hyperparam_set(name);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::size_t> batch_slice(const std::vector<std::size_t>& order, std::size_t begin,
                                     std::size_t end) {
  return {order.begin() + static_cast<std::ptrdiff_t>(begin), order.begin() + static_cast<std::ptrdiff_t>(end)};
}

Tensor<float> gather_rows(const Tensor<float>& m, const std::vector<std::size_t>& rows) {
  const std::size_t d = m.dim(1);
  Tensor<float> out({rows.size(), d});
  for (std::size_t r = 0; r < rows.size(); ++r)
    std::copy(m.ptr() + rows[r] * d, m.ptr() + (rows[r] + 1) * d, out.ptr() + r * d);
  return out;
}

}  // namespace

void train_model(Model<float>& model, const DatasetSplit& data, const HyperparamSet& hp,
                 const AugmentationPolicy& aug, std::uint64_t seed, bool head_only, TrainLog* log) {
  if (data.size() == 0) throw DataError("train_model: empty dataset");
  if (static_cast<std::size_t>(data.class_count) != model.spec().num_classes) {
    throw ConfigError("train_model: dataset has " + std::to_string(data.class_count) +
                      " classes but model head has " + std::to_string(model.spec().num_classes));
  }
  if (hp.batch_size == 0 || hp.epochs == 0) throw ConfigError("train_model: zero batch size or epochs");
  AugmentationPolicy policy = aug;
  policy.normalization = model.normalization();

  std::vector<Tensor<float>> params = model.trainable(head_only);
  for (auto& p : params) p.set_requires_grad(true);

  OptimizerState<float> opt;
  opt.kind = hp.optimizer;
  opt.momentum = hp.momentum;
  opt.weight_decay = hp.weight_decay;

  Rng rng(seed);
  const std::size_t n = data.size();

  // Frozen extractor without augmentation: features are fixed, compute once.
  std::optional<Tensor<float>> cached;
  if (head_only && !policy.augments()) {
    NoGradScope<float> no_grad;
    std::vector<Tensor<float>> parts;
    for (std::size_t b = 0; b < n; b += 256) {
      std::vector<std::size_t> idx;
      for (std::size_t i = b; i < std::min(n, b + 256); ++i) idx.push_back(i);
      parts.push_back(model.features(data.gather(idx)));
    }
    cached = concat(parts);
  }

  for (std::size_t epoch = 0; epoch < hp.epochs; ++epoch) {
    opt.learning_rate = hp.lr_at(epoch);
    const std::vector<std::size_t> order = rng.permutation(n);
    double loss_sum = 0.0;
    for (std::size_t b = 0; b < n; b += hp.batch_size) {
      const auto idx = batch_slice(order, b, std::min(n, b + hp.batch_size));
      std::vector<int> labels;
      labels.reserve(idx.size());
      for (std::size_t i : idx) labels.push_back(data.labels[i]);

      Tape<float> tape;
      TapeScope<float> scope(tape);
      Tensor<float> logits;
      if (cached) {
        logits = model.head(gather_rows(*cached, idx));
      } else {
        Tensor<float> x = augment_batch(data.gather(idx), policy, rng);
        logits = head_only ? model.head(model.features_normalized(x, false))
                           : model.logits_normalized(x, true);
      }
      Tensor<float> loss = softmax_cross_entropy(logits, labels);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(idx.size());
      tape.backward(loss);
      optimizer_step(opt, params);
      for (auto& p : params) p.zero_grad();
    }
    if (log != nullptr) {
      log->lr_per_epoch.push_back(opt.learning_rate);
      log->loss_per_epoch.push_back(loss_sum / static_cast<double>(n));
    }
  }
  for (auto& p : params) {
    p.set_requires_grad(false);
    p.clear_grad();
  }
}

double accuracy(const Model<float>& model, const DatasetSplit& data) {
  if (data.size() == 0) return 0.0;
  std::size_t correct = 0;
  for (std::size_t b = 0; b < data.size(); b += 256) {
    std::vector<std::size_t> idx;
    for (std::size_t i = b; i < std::min(data.size(), b + 256); ++i) idx.push_back(i);
    const auto pred = model.predict(data.gather(idx));
    for (std::size_t k = 0; k < idx.size(); ++k)
      if (pred[k] == data.labels[idx[k]]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

}  // namespace pb
