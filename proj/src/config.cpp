#include "poisonbench/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <ostream>
#include <set>

#include "poisonbench/error.hpp"
#include "poisonbench/ops.hpp"
#include "poisonbench/rng.hpp"
#include "poisonbench/stats.hpp"

namespace pb {

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(where + "." + key + ": wrong type");
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, std::optional<T>& out, const std::string& where) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
    return;
  }
  T v{};
  read(j, key, v, where);
  out = v;
}

template <typename T>
nlohmann::json opt(const std::optional<T>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

static RunConfig parse_run_config(const nlohmann::json& j);

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  try {
    return parse_run_config(j);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

static RunConfig parse_run_config(const nlohmann::json& j) {
  reject_unknown(j, {"data", "pretrain", "attack", "benchmark", "runtime"}, "config");
  RunConfig c;
  if (j.contains("data")) {
    const auto& d = j.at("data");
    reject_unknown(d, {"source", "seed", "classes", "per_class", "test_per_class", "pretrain_per_class",
                       "image_size", "train_paths", "test_paths", "pretrain_paths", "pretrain_classes"},
                   "data");
    read(d, "source", c.data.source, "data");
    read(d, "seed", c.data.seed, "data");
    read(d, "classes", c.data.classes, "data");
    read(d, "per_class", c.data.per_class, "data");
    read(d, "test_per_class", c.data.test_per_class, "data");
    read(d, "pretrain_per_class", c.data.pretrain_per_class, "data");
    read(d, "image_size", c.data.image_size, "data");
    read(d, "train_paths", c.data.train_paths, "data");
    read(d, "test_paths", c.data.test_paths, "data");
    read(d, "pretrain_paths", c.data.pretrain_paths, "data");
    read(d, "pretrain_classes", c.data.pretrain_classes, "data");
    if (c.data.source != "synthetic" && c.data.source != "cifar_binary") {
      throw ConfigError("data.source must be 'synthetic' or 'cifar_binary'");
    }
  }
  if (j.contains("pretrain")) {
    const auto& p = j.at("pretrain");
    reject_unknown(p, {"arch", "held_out", "hp_set", "epoch_divisor", "n_checkpoints", "held_out_checkpoints",
                       "augment", "seed", "checkpoint_dir"},
                   "pretrain");
    read(p, "arch", c.pretrain.arch, "pretrain");
    read(p, "held_out", c.pretrain.held_out, "pretrain");
    read(p, "hp_set", c.pretrain.hp_set, "pretrain");
    read(p, "epoch_divisor", c.pretrain.epoch_divisor, "pretrain");
    read(p, "n_checkpoints", c.pretrain.n_checkpoints, "pretrain");
    read_opt(p, "held_out_checkpoints", c.pretrain.held_out_checkpoints, "pretrain");
    read(p, "augment", c.pretrain.augment, "pretrain");
    read(p, "seed", c.pretrain.seed, "pretrain");
    read(p, "checkpoint_dir", c.pretrain.checkpoint_dir, "pretrain");
    if (c.pretrain.n_checkpoints == 0) throw ConfigError("pretrain.n_checkpoints must be positive");
  }
  if (j.contains("attack")) {
    const auto& a = j.at("attack");
    if (!a.is_object()) throw ConfigError("attack: expected an object");
    read(a, "name", c.attack, "attack");
    c.attack_fields = a;
    c.attack_fields.erase("name");
  }
  // Typed attacks validate their fields strictly here; extensions get them raw.
  static const std::set<std::string> typed = {"fc", "cp", "clbd", "htbd", "noop"};
  if (typed.count(c.attack)) {
    c.attack_fields = attack_config_to_json(attack_config_from_json(c.attack, c.attack_fields));
  } else {
    find_attack(c.attack);
  }
  if (j.contains("benchmark")) {
    const auto& b = j.at("benchmark");
    reject_unknown(b, {"mode", "threat", "master_seed", "n_trials", "J", "per_class", "patch", "target_class", "base_class",
                       "flip_target", "whole_class_metric", "record_clean_acc", "victim_hp",
                       "victim_epoch_divisor", "victim_augment", "budget_sweep", "sweep_fraction"},
                   "benchmark");
    auto& o = c.benchmark;
    read(b, "mode", o.mode, "benchmark");
    read(b, "threat", o.threat, "benchmark");
    read(b, "master_seed", o.master_seed, "benchmark");
    read(b, "n_trials", o.n_trials, "benchmark");
    read(b, "J", o.budget, "benchmark");
    read_opt(b, "per_class", o.per_class, "benchmark");
    if (b.contains("patch")) {
      const auto& p = b.at("patch");
      reject_unknown(p, {"size", "file"}, "benchmark.patch");
      read(p, "size", o.patch_size, "benchmark.patch");
      read(p, "file", o.patch_file, "benchmark.patch");
    }
    read_opt(b, "target_class", o.target_class, "benchmark");
    read_opt(b, "base_class", o.base_class, "benchmark");
    read(b, "flip_target", o.flip_target, "benchmark");
    read(b, "whole_class_metric", o.whole_class_metric, "benchmark");
    read(b, "record_clean_acc", o.record_clean_acc, "benchmark");
    if (b.contains("victim_hp")) o.victim_hp = b.at("victim_hp");
    read_opt(b, "victim_epoch_divisor", o.victim_epoch_divisor, "benchmark");
    read_opt(b, "victim_augment", o.victim_augment, "benchmark");
    read(b, "budget_sweep", o.budget_sweep, "benchmark");
    read(b, "sweep_fraction", o.sweep_fraction, "benchmark");
    parse_training_mode(o.mode);
    parse_threat_model(o.threat);
    if (o.budget == 0) throw ConfigError("benchmark.J must be positive");
    if (o.patch_size == 0) throw ConfigError("benchmark.patch.size must be positive");
  }
  if (j.contains("runtime")) {
    const auto& r = j.at("runtime");
    reject_unknown(r, {"deterministic", "parallelism", "out_dir"}, "runtime");
    read(r, "deterministic", c.runtime.deterministic, "runtime");
    read(r, "parallelism", c.runtime.parallelism, "runtime");
    read(r, "out_dir", c.runtime.out_dir, "runtime");
    if (c.runtime.parallelism == 0) throw ConfigError("runtime.parallelism must be positive");
  }
  // Resolve defaults that depend on other sections so the echo is explicit.
  auto& b = c.benchmark;
  if (!b.per_class) b.per_class = c.data.per_class;
  const bool scratch = c.mode() == TrainingMode::from_scratch;
  if (b.victim_hp.is_null()) b.victim_hp = scratch ? "C" : "G";
  if (!b.victim_epoch_divisor) b.victim_epoch_divisor = scratch ? c.pretrain.epoch_divisor : 1;
  if (!b.victim_augment) b.victim_augment = scratch;
  if (!c.pretrain.held_out_checkpoints) c.pretrain.held_out_checkpoints = c.pretrain.n_checkpoints;
  c.victim_hyperparams();
  c.pretrain_hyperparams();
  return c;
}

nlohmann::json RunConfig::to_json() const {
  nlohmann::json attack_json = attack_fields;
  attack_json["name"] = attack;
  const auto& b = benchmark;
  return {
      {"data",
       {{"source", data.source},
        {"seed", data.seed},
        {"classes", data.classes},
        {"per_class", data.per_class},
        {"test_per_class", data.test_per_class},
        {"pretrain_per_class", data.pretrain_per_class},
        {"image_size", data.image_size},
        {"train_paths", data.train_paths},
        {"test_paths", data.test_paths},
        {"pretrain_paths", data.pretrain_paths},
        {"pretrain_classes", data.pretrain_classes}}},
      {"pretrain",
       {{"arch", pretrain.arch},
        {"held_out", pretrain.held_out},
        {"hp_set", pretrain.hp_set},
        {"epoch_divisor", pretrain.epoch_divisor},
        {"n_checkpoints", pretrain.n_checkpoints},
        {"held_out_checkpoints", opt(pretrain.held_out_checkpoints)},
        {"augment", pretrain.augment},
        {"seed", pretrain.seed},
        {"checkpoint_dir", pretrain.checkpoint_dir}}},
      {"attack", attack_json},
      {"benchmark",
       {{"mode", b.mode},
        {"threat", b.threat},
        {"master_seed", b.master_seed},
        {"n_trials", b.n_trials},
        {"J", b.budget},
        {"per_class", opt(b.per_class)},
        {"patch", {{"size", b.patch_size}, {"file", b.patch_file}}},
        {"target_class", opt(b.target_class)},
        {"base_class", opt(b.base_class)},
        {"flip_target", b.flip_target},
        {"whole_class_metric", b.whole_class_metric},
        {"record_clean_acc", b.record_clean_acc},
        {"victim_hp", b.victim_hp},
        {"victim_epoch_divisor", opt(b.victim_epoch_divisor)},
        {"victim_augment", opt(b.victim_augment)},
        {"budget_sweep", b.budget_sweep},
        {"sweep_fraction", b.sweep_fraction}}},
      {"runtime",
       {{"deterministic", runtime.deterministic},
        {"parallelism", runtime.parallelism},
        {"out_dir", runtime.out_dir}}}};
}

std::string RunConfig::hash() const {
  nlohmann::json j = to_json();
  j.erase("runtime");
  return fnv1a_hex(j.dump());
}

TrainingMode RunConfig::mode() const { return parse_training_mode(benchmark.mode); }

HyperparamSet RunConfig::victim_hyperparams() const {
  const auto& v = benchmark.victim_hp;
  HyperparamSet hp;
  if (v.is_string()) {
    hp = resolve_hyperparams(v.get<std::string>());
  } else if (v.is_object()) {
    hp = HyperparamSet::from_json(v);
  } else {
    throw ConfigError("benchmark.victim_hp must be a set name or an object");
  }
  return hp.scaled(benchmark.victim_epoch_divisor.value_or(1));
}

HyperparamSet RunConfig::pretrain_hyperparams() const {
  return resolve_hyperparams(pretrain.hp_set).scaled(pretrain.epoch_divisor);
}

Protocol RunConfig::protocol() const {
  Protocol p;
  p.attack = attack;
  p.attack_config = attack_fields;
  p.mode = mode();
  p.threat = parse_threat_model(benchmark.threat);
  p.budget = benchmark.budget;
  p.per_class = benchmark.per_class.value_or(data.per_class);
  p.target_class = benchmark.target_class;
  p.base_class = benchmark.base_class;
  p.patch = benchmark.patch_file.empty() ? checkerboard_patch(benchmark.patch_size)
                                         : load_patch(benchmark.patch_file);
  p.flip_target = benchmark.flip_target;
  p.whole_class_metric = benchmark.whole_class_metric;
  p.record_clean_acc = benchmark.record_clean_acc;
  p.victim_hp = victim_hyperparams();
  p.victim_augment = benchmark.victim_augment.value_or(false);
  return p;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return RunConfig::from_json(j);
}

// ---------------------------------------------------------------------------

namespace {

std::vector<std::filesystem::path> as_paths(const std::vector<std::string>& v) {
  return {v.begin(), v.end()};
}

std::size_t required_per_class(const RunConfig& c) {
  std::size_t n = std::max(c.data.per_class, c.benchmark.per_class.value_or(0));
  for (std::size_t j : c.benchmark.budget_sweep) {
    const auto total = static_cast<std::size_t>(std::llround(static_cast<double>(j) / c.benchmark.sweep_fraction));
    n = std::max(n, (total + static_cast<std::size_t>(c.data.classes) - 1) / static_cast<std::size_t>(c.data.classes));
  }
  return n;
}

struct Splits {
  DatasetSplit train, test, pretrain_train, pretrain_test;
};

Splits load_splits(const RunConfig& c) {
  Splits s;
  if (c.data.source == "synthetic") {
    SynthConfig sc;
    sc.seed = c.data.seed;
    sc.class_count = c.data.classes;
    sc.per_class = required_per_class(c);
    sc.test_per_class = c.data.test_per_class;
    sc.image_size = c.data.image_size;
    sc.variant = SynthVariant::finetune;
    auto ft = synth_generate(sc);
    s.train = std::move(ft.train);
    s.test = std::move(ft.test);
    sc.class_count = c.data.pretrain_classes;
    sc.per_class = c.data.pretrain_per_class;
    sc.variant = SynthVariant::pretrain;
    auto pt = synth_generate(sc);
    s.pretrain_train = std::move(pt.train);
    s.pretrain_test = std::move(pt.test);
    return s;
  }
  if (c.data.train_paths.empty() || c.data.test_paths.empty()) {
    throw ConfigError("data: cifar_binary needs train_paths and test_paths");
  }
  s.train = load_cifar_binaries(as_paths(c.data.train_paths));
  s.test = load_cifar_binaries(as_paths(c.data.test_paths));
  if (!c.data.pretrain_paths.empty()) {
    const RecordLayout layout{3, 32, 32, c.data.pretrain_classes};
    std::vector<Tensor<float>> parts;
    DatasetSplit& pt = s.pretrain_train;
    pt.class_count = c.data.pretrain_classes;
    for (const auto& path : c.data.pretrain_paths) {
      DatasetSplit more = load_records(path, layout);
      for (int label : more.labels) {
        pt.labels.push_back(label);
        pt.ids.push_back(pt.ids.size());
      }
      parts.push_back(more.images);
    }
    pt.images = concat(parts);
  }
  return s;
}

}  // namespace

std::vector<ModelCheckpoint> obtain_checkpoints(const RunConfig& config, const std::string& arch,
                                                const DatasetSplit& train, const DatasetSplit* test,
                                                std::uint64_t seed, std::size_t count,
                                                std::ostream* log) {
  const ArchitectureSpec spec =
      architecture_preset(arch, static_cast<std::size_t>(train.class_count), train.height());
  const HyperparamSet hp = config.pretrain_hyperparams();
  // Cache key: everything the weights depend on except the checkpoint index.
  // The training split enters through a digest of its labels and pixels.
  std::string digest(reinterpret_cast<const char*>(train.labels.data()), train.labels.size() * sizeof(int));
  digest.append(reinterpret_cast<const char*>(train.images.ptr()), train.images.numel() * sizeof(float));
  nlohmann::json key = {{"spec", spec.to_json()},  {"hp", hp.to_json()},
                        {"augment", config.pretrain.augment}, {"seed", seed},
                        {"train", fnv1a_hex(digest)}, {"train_size", train.size()},
                        {"train_classes", train.class_count}};
  const std::filesystem::path dir =
      config.pretrain.checkpoint_dir.empty()
          ? std::filesystem::path()
          : std::filesystem::path(config.pretrain.checkpoint_dir) / (arch + "-" + fnv1a_hex(key.dump()));
  std::vector<ModelCheckpoint> out;
  for (std::size_t i = 0; i < count; ++i) {
    const auto file = dir / ("ckpt_" + std::to_string(i) + ".pbck");
    if (!dir.empty() && std::filesystem::exists(file)) {
      out.push_back(load_checkpoint(file));
      continue;
    }
    if (log) *log << "pretraining " << arch << " checkpoint " << i + 1 << "/" << count << std::endl;
    out.push_back(pretrain_one(spec, train, test, hp, config.pretrain.augment, seed, i));
    if (log) {
      *log << "  train_acc=" << out.back().train_acc << " test_acc=" << out.back().test_acc << std::endl;
    }
    if (!dir.empty()) save_checkpoint(file, out.back());
  }
  return out;
}

namespace {

struct AttackerData {
  DatasetSplit train;
  const DatasetSplit* test = nullptr;
};

// Transfer attackers pretrain on the disjoint class set; from-scratch
// attackers train on the victim's own clean data.
AttackerData attacker_data(const RunConfig& config, const Splits& s) {
  AttackerData d;
  if (config.mode() == TrainingMode::from_scratch) {
    d.train = s.train.first_per_class(config.benchmark.per_class.value_or(config.data.per_class));
    d.test = &s.test;
  } else {
    d.train = s.pretrain_train;
    d.test = s.pretrain_test.size() ? &s.pretrain_test : nullptr;
  }
  if (d.train.size() == 0) throw ConfigError("data: no pretraining split for transfer modes");
  return d;
}

CheckpointSets obtain_from(const RunConfig& config, const Splits& s, bool held_out, std::ostream* log) {
  const AttackerData d = attacker_data(config, s);
  CheckpointSets out;
  out.attacker = obtain_checkpoints(config, config.pretrain.arch, d.train, d.test, config.pretrain.seed,
                                    config.pretrain.n_checkpoints, log);
  if (!held_out) return out;
  for (std::size_t a = 0; a < config.pretrain.held_out.size(); ++a) {
    const auto& arch = config.pretrain.held_out[a];
    if (arch == config.pretrain.arch) throw ConfigError("pretrain.held_out must differ from pretrain.arch");
    out.held_out.push_back(obtain_checkpoints(config, arch, d.train, d.test, mix64(config.pretrain.seed, 1 + a),
                                              config.pretrain.held_out_checkpoints.value_or(config.pretrain.n_checkpoints),
                                              log));
  }
  return out;
}

}  // namespace

CheckpointSets obtain_all_checkpoints(const RunConfig& config, bool held_out, std::ostream* log) {
  return obtain_from(config, load_splits(config), held_out, log);
}

BenchmarkEnv build_env(const RunConfig& config, std::ostream* log) {
  Splits s = load_splits(config);
  const bool black_box = parse_threat_model(config.benchmark.threat) == ThreatModel::black_box;
  const CheckpointSets sets = obtain_from(config, s, black_box, log);
  auto models = [](const std::vector<ModelCheckpoint>& ckpts) {
    std::vector<std::shared_ptr<const Model<float>>> out;
    for (const auto& ck : ckpts) out.push_back(std::make_shared<const Model<float>>(ck.to_model()));
    return out;
  };
  BenchmarkEnv env;
  env.clean_stats = compute_channel_stats(s.train);
  env.attacker = models(sets.attacker);
  env.attacker_spec = env.attacker.front()->spec();
  for (const auto& h : sets.held_out) env.held_out.push_back(models(h));
  if (black_box && env.held_out.empty()) throw ConfigError("black_box threat needs pretrain.held_out architectures");
  env.train = std::move(s.train);
  env.test = std::move(s.test);
  if (log) *log << "fitting crafting heads" << std::endl;
  prepare_env(env);
  return env;
}

}  // namespace pb
