#include "poisonbench/checkpoint.hpp"

#include <array>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "poisonbench/error.hpp"
#include "poisonbench/rng.hpp"

namespace pb {

namespace {

constexpr std::array<char, 4> kMagic = {'P', 'B', 'C', 'K'};

const char* role_name(ParamRole r) {
  switch (r) {
    case ParamRole::extractor: return "extractor";
    case ParamRole::head: return "head";
    default: return "buffer";
  }
}

ParamRole role_from(const std::string& s) {
  if (s == "extractor") return ParamRole::extractor;
  if (s == "head") return ParamRole::head;
  if (s == "buffer") return ParamRole::buffer;
  throw IoError("checkpoint: unknown parameter role '" + s + "'");
}

void put_u32(std::ostream& out, std::uint32_t v) {
  const std::array<char, 4> le = {static_cast<char>(v & 0xFF), static_cast<char>((v >> 8) & 0xFF),
                                  static_cast<char>((v >> 16) & 0xFF), static_cast<char>((v >> 24) & 0xFF)};
  out.write(le.data(), 4);
}

std::uint32_t get_u32(std::istream& in, const std::string& what) {
  std::array<unsigned char, 4> le{};
  if (!in.read(reinterpret_cast<char*>(le.data()), 4)) throw IoError(what + ": truncated header");
  return le[0] | (le[1] << 8) | (le[2] << 16) | (static_cast<std::uint32_t>(le[3]) << 24);
}

}  // namespace

ModelCheckpoint ModelCheckpoint::from_model(const Model<float>& model, std::string hp_id,
                                            std::uint64_t seed, std::size_t epoch) {
  ModelCheckpoint c;
  c.spec = model.spec();
  c.normalization = model.normalization();
  c.hp_id = std::move(hp_id);
  c.seed = seed;
  c.epoch = epoch;
  for (const auto& p : model.params()) {
    c.manifest.push_back({p.name, p.value.shape(), c.buffer.size() * sizeof(float), p.role});
    c.buffer.insert(c.buffer.end(), p.value.data().begin(), p.value.data().end());
  }
  return c;
}

Model<float> ModelCheckpoint::to_model() const {
  Model<float> m(spec, 0);
  m.set_normalization(normalization);
  auto& params = m.params();
  if (params.size() != manifest.size()) {
    throw IoError("checkpoint: manifest has " + std::to_string(manifest.size()) +
                  " entries but architecture " + spec.name + " has " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& e = manifest[i];
    if (e.name != params[i].name || e.shape != params[i].value.shape()) {
      throw IoError("checkpoint: entry " + e.name + " " + shape_str(e.shape) + " does not match " +
                    params[i].name + " " + shape_str(params[i].value.shape()));
    }
    const std::size_t first = e.offset / sizeof(float);
    const std::size_t n = shape_numel(e.shape);
    if (e.offset % sizeof(float) != 0 || first + n > buffer.size()) {
      throw IoError("checkpoint: entry " + e.name + " lies outside the parameter buffer");
    }
    std::copy(buffer.begin() + static_cast<std::ptrdiff_t>(first),
              buffer.begin() + static_cast<std::ptrdiff_t>(first + n), params[i].value.ptr());
  }
  return m;
}

void save_checkpoint(const std::filesystem::path& path, const ModelCheckpoint& ckpt) {
  nlohmann::json manifest = nlohmann::json::array();
  for (const auto& e : ckpt.manifest) {
    manifest.push_back({{"name", e.name}, {"shape", e.shape}, {"offset", e.offset}, {"role", role_name(e.role)}});
  }
  const nlohmann::json header = {{"spec", ckpt.spec.to_json()},
                                 {"normalization", ckpt.normalization.to_json()},
                                 {"hp_id", ckpt.hp_id},
                                 {"seed", ckpt.seed},
                                 {"epoch", ckpt.epoch},
                                 {"train_acc", ckpt.train_acc},
                                 {"test_acc", ckpt.test_acc},
                                 {"manifest", manifest},
                                 {"param_count", ckpt.buffer.size()}};
  const std::string text = header.dump();
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(kMagic.data(), 4);
  put_u32(out, ckpt.version);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (float v : ckpt.buffer) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
  }
  if (!out) throw IoError("write failed: " + path.string());
}

ModelCheckpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), 4) || magic != kMagic) throw IoError(path.string() + ": not a PBCK checkpoint");
  ModelCheckpoint c;
  c.version = get_u32(in, path.string());
  if (c.version != ModelCheckpoint::kFormatVersion) {
    throw IoError(path.string() + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  const std::uint32_t len = get_u32(in, path.string());
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw IoError(path.string() + ": truncated header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(text);
    c.spec = ArchitectureSpec::from_json(h.at("spec"));
    c.normalization = ChannelStats::from_json(h.at("normalization"));
    c.hp_id = h.at("hp_id").get<std::string>();
    c.seed = h.at("seed").get<std::uint64_t>();
    c.epoch = h.at("epoch").get<std::size_t>();
    c.train_acc = h.at("train_acc").get<double>();
    c.test_acc = h.at("test_acc").get<double>();
    for (const auto& e : h.at("manifest")) {
      c.manifest.push_back({e.at("name").get<std::string>(), e.at("shape").get<Shape>(),
                            e.at("offset").get<std::size_t>(), role_from(e.at("role").get<std::string>())});
    }
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": bad checkpoint header: " + e.what());
  }
  const auto count = h.at("param_count").get<std::size_t>();
  c.buffer.resize(count);
  for (auto& v : c.buffer) {
    const std::uint32_t bits = get_u32(in, path.string() + " parameters");
    std::memcpy(&v, &bits, 4);
  }
  return c;
}

// ---------------------------------------------------------------------------

namespace {

AugmentationPolicy policy_for(const Model<float>& m, bool augment) {
  return augment ? AugmentationPolicy::standard(m.normalization())
                 : AugmentationPolicy::normalize_only(m.normalization());
}

// Salt for the head re-draw so it never reuses the training stream.
constexpr std::uint64_t kHeadSalt = 0x6865616400000000ULL;

Model<float> finetune(Model<float> model, const DatasetSplit& data, const HyperparamSet& hp,
                      bool augment, std::uint64_t seed, bool head_only) {
  if (data.size() == 0) throw DataError("finetune: empty dataset");
  if (static_cast<std::size_t>(data.class_count) != model.spec().num_classes) {
    model.reset_head(static_cast<std::size_t>(data.class_count), mix64(seed, kHeadSalt));
  }
  train_model(model, data, hp, policy_for(model, augment), seed, head_only);
  return model;
}

}  // namespace

ModelCheckpoint pretrain_one(const ArchitectureSpec& spec, const DatasetSplit& train,
                             const DatasetSplit* test, const HyperparamSet& hp, bool augment,
                             std::uint64_t seed, std::size_t index) {
  if (train.size() == 0) throw DataError("pretrain: empty dataset");
  ArchitectureSpec s = spec;
  s.num_classes = static_cast<std::size_t>(train.class_count);
  const std::uint64_t model_seed = mix64(seed, index);
  Model<float> model(s, model_seed);
  model.set_normalization(compute_channel_stats(train));
  train_model(model, train, hp, policy_for(model, augment), model_seed, false);
  auto ckpt = ModelCheckpoint::from_model(model, hp.id, model_seed, hp.epochs);
  ckpt.train_acc = accuracy(model, train);
  ckpt.test_acc = test != nullptr ? accuracy(model, *test) : 0.0;
  return ckpt;
}

std::vector<ModelCheckpoint> pretrain(const ArchitectureSpec& spec, const DatasetSplit& train,
                                      const DatasetSplit* test, const HyperparamSet& hp,
                                      bool augment, std::uint64_t seed, std::size_t n_checkpoints) {
  if (train.size() == 0) throw DataError("pretrain: empty dataset");
  if (n_checkpoints == 0) throw ConfigError("pretrain: n_checkpoints must be positive");
  std::vector<ModelCheckpoint> out;
  for (std::size_t i = 0; i < n_checkpoints; ++i) {
    out.push_back(pretrain_one(spec, train, test, hp, augment, seed, i));
  }
  return out;
}

Model<float> finetune_linear(const Model<float>& model, const DatasetSplit& poisoned,
                             const HyperparamSet& hp, bool augment, std::uint64_t seed) {
  return finetune(model, poisoned, hp, augment, seed, true);
}

Model<float> finetune_linear(const ModelCheckpoint& ckpt, const DatasetSplit& poisoned,
                             const HyperparamSet& hp, bool augment, std::uint64_t seed) {
  return finetune(ckpt.to_model(), poisoned, hp, augment, seed, true);
}

Model<float> finetune_e2e(const Model<float>& model, const DatasetSplit& poisoned,
                          const HyperparamSet& hp, bool augment, std::uint64_t seed) {
  return finetune(model, poisoned, hp, augment, seed, false);
}

Model<float> finetune_e2e(const ModelCheckpoint& ckpt, const DatasetSplit& poisoned,
                          const HyperparamSet& hp, bool augment, std::uint64_t seed) {
  return finetune(ckpt.to_model(), poisoned, hp, augment, seed, false);
}

Model<float> train_from_scratch(const ArchitectureSpec& spec, const DatasetSplit& poisoned,
                                const ChannelStats& normalization, const HyperparamSet& hp,
                                bool augment, std::uint64_t seed) {
  if (poisoned.size() == 0) throw DataError("train_from_scratch: empty dataset");
  ArchitectureSpec s = spec;
  s.num_classes = static_cast<std::size_t>(poisoned.class_count);
  Model<float> model(s, seed);
  model.set_normalization(normalization);
  train_model(model, poisoned, hp, policy_for(model, augment), seed, false);
  return model;
}

}  // namespace pb
