#include "poisonbench/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <unordered_map>

#include "poisonbench/error.hpp"

namespace pb {

std::vector<std::size_t> DatasetSplit::indices_of_class(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (labels[i] == label) out.push_back(i);
  return out;
}

std::optional<std::size_t> DatasetSplit::index_of_id(std::uint64_t id) const {
  auto it = std::find(ids.begin(), ids.end(), id);
  if (it == ids.end()) return std::nullopt;
  return static_cast<std::size_t>(std::distance(ids.begin(), it));
}

Tensor<float> DatasetSplit::gather(const std::vector<std::size_t>& indices) const {
  if (indices.empty()) throw DataError("gather: empty index list");
  const std::size_t stride = image_numel();
  std::vector<float> out;
  out.reserve(indices.size() * stride);
  const float* src = images.ptr();
  for (std::size_t i : indices) {
    if (i >= size()) throw DataError("gather: index " + std::to_string(i) + " out of range");
    out.insert(out.end(), src + i * stride, src + (i + 1) * stride);
  }
  return Tensor<float>({indices.size(), channels(), height(), width()}, std::move(out));
}

DatasetSplit DatasetSplit::subset(const std::vector<std::size_t>& indices) const {
  DatasetSplit out;
  out.images = gather(indices);
  out.class_count = class_count;
  for (std::size_t i : indices) {
    out.labels.push_back(labels[i]);
    out.ids.push_back(ids[i]);
  }
  return out;
}

DatasetSplit DatasetSplit::first_per_class(std::size_t per_class) const {
  std::vector<std::size_t> taken(static_cast<std::size_t>(class_count), 0);
  std::vector<std::size_t> keep;
  for (std::size_t i = 0; i < size(); ++i) {
    auto& t = taken[static_cast<std::size_t>(labels[i])];
    if (t < per_class) {
      keep.push_back(i);
      ++t;
    }
  }
  for (int k = 0; k < class_count; ++k) {
    if (taken[static_cast<std::size_t>(k)] < per_class) {
      throw DataError("first_per_class: class " + std::to_string(k) + " has only " +
                      std::to_string(taken[static_cast<std::size_t>(k)]) + " images, need " +
                      std::to_string(per_class));
    }
  }
  return subset(keep);
}

void DatasetSplit::validate() const {
  if (images.rank() != 4) throw DataError("dataset: images must be [N,C,H,W]");
  if (images.dim(0) != labels.size() || ids.size() != labels.size()) {
    throw DataError("dataset: " + std::to_string(images.dim(0)) + " images, " +
                    std::to_string(labels.size()) + " labels, " + std::to_string(ids.size()) +
                    " ids");
  }
  for (float v : images.data()) {
    if (!(v >= 0.0f && v <= 1.0f)) throw DataError("dataset: pixel outside [0,1]");
  }
  for (int y : labels) {
    if (y < 0 || y >= class_count) {
      throw DataError("dataset: label " + std::to_string(y) + " outside [0," +
                      std::to_string(class_count) + ")");
    }
  }
  std::vector<std::uint64_t> sorted = ids;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw DataError("dataset: duplicate image id");
  }
}

// ---------------------------------------------------------------------------

nlohmann::json ChannelStats::to_json() const { return {{"mean", mean}, {"std", stddev}}; }

ChannelStats ChannelStats::from_json(const nlohmann::json& j) {
  ChannelStats s;
  s.mean = j.at("mean").get<std::vector<float>>();
  s.stddev = j.at("std").get<std::vector<float>>();
  if (s.mean.size() != s.stddev.size()) throw DataError("channel stats: mean/std size mismatch");
  return s;
}

ChannelStats ChannelStats::identity(std::size_t channels) {
  return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
}

ChannelStats compute_channel_stats(const DatasetSplit& split) {
  const std::size_t n = split.size(), c = split.channels();
  const std::size_t plane = split.height() * split.width();
  ChannelStats s;
  for (std::size_t ch = 0; ch < c; ++ch) {
    double acc = 0.0, acc2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const float* p = split.images.ptr() + (i * c + ch) * plane;
      for (std::size_t k = 0; k < plane; ++k) {
        acc += p[k];
        acc2 += static_cast<double>(p[k]) * p[k];
      }
    }
    const double count = static_cast<double>(n * plane);
    const double m = acc / count;
    const double var = std::max(acc2 / count - m * m, 1e-12);
    s.mean.push_back(static_cast<float>(m));
    s.stddev.push_back(static_cast<float>(std::sqrt(var)));
  }
  return s;
}

// ---------------------------------------------------------------------------

CropOffset draw_crop_offset(std::size_t pad, Rng& rng) {
  const std::size_t span = 2 * pad + 1;
  CropOffset o;
  o.dy = rng.uniform_index(span);
  o.dx = rng.uniform_index(span);
  return o;
}

void crop_padded(const float* src, std::size_t channels, std::size_t height, std::size_t width,
                 std::size_t pad, CropOffset offset, float* dst) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y) {
      const auto sy = static_cast<std::ptrdiff_t>(y + offset.dy) - static_cast<std::ptrdiff_t>(pad);
      for (std::size_t x = 0; x < width; ++x) {
        const auto sx =
            static_cast<std::ptrdiff_t>(x + offset.dx) - static_cast<std::ptrdiff_t>(pad);
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(height) &&
                            sx < static_cast<std::ptrdiff_t>(width);
        dst[(c * height + y) * width + x] =
            inside ? src[(c * height + static_cast<std::size_t>(sy)) * width +
                         static_cast<std::size_t>(sx)]
                   : 0.0f;
      }
    }
}

namespace {

void flip_one(const float* src, std::size_t channels, std::size_t height, std::size_t width,
              float* dst) {
  for (std::size_t c = 0; c < channels; ++c)
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        dst[(c * height + y) * width + x] = src[(c * height + y) * width + (width - 1 - x)];
}

}  // namespace

Tensor<float> hflip(const Tensor<float>& images) {
  if (images.rank() != 4) throw ShapeError("hflip: expected NCHW, got " + shape_str(images.shape()));
  const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
  Tensor<float> out(images.shape());
  for (std::size_t i = 0; i < n; ++i)
    flip_one(images.ptr() + i * c * h * w, c, h, w, out.ptr() + i * c * h * w);
  return out;
}

Tensor<float> normalize(const Tensor<float>& images, const ChannelStats& stats) {
  if (stats.mean.size() != images.dim(1)) {
    throw ShapeError("normalize: " + std::to_string(stats.mean.size()) +
                     " channel statistics for " + shape_str(images.shape()));
  }
  const std::size_t n = images.dim(0), c = images.dim(1), plane = images.dim(2) * images.dim(3);
  Tensor<float> out(images.shape());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float m = stats.mean[ch], inv = 1.0f / stats.stddev[ch];
      const std::size_t base = (i * c + ch) * plane;
      for (std::size_t p = 0; p < plane; ++p) out[base + p] = (images[base + p] - m) * inv;
    }
  return out;
}

Tensor<float> augment_batch(const Tensor<float>& batch, const AugmentationPolicy& policy, Rng& rng) {
  if (batch.rank() != 4) throw ShapeError("augment_batch: expected NCHW, got " + shape_str(batch.shape()));
  Tensor<float> out = batch.clone();
  if (policy.augments()) {
    const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
    const std::size_t stride = c * h * w;
    std::vector<float> tmp(stride);
    for (std::size_t i = 0; i < n; ++i) {
      float* img = out.ptr() + i * stride;
      if (policy.random_crop) {
        const CropOffset o = draw_crop_offset(policy.crop_pad, rng);
        crop_padded(img, c, h, w, policy.crop_pad, o, tmp.data());
        std::copy(tmp.begin(), tmp.end(), img);
      }
      if (policy.horizontal_flip && rng.bernoulli(policy.flip_p)) {
        flip_one(img, c, h, w, tmp.data());
        std::copy(tmp.begin(), tmp.end(), img);
      }
    }
  }
  if (policy.normalization) return normalize(out, *policy.normalization);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

DatasetSplit load_records(const std::filesystem::path& path, const RecordLayout& layout) {
  const auto bytes = read_file(path);
  const std::size_t pixels = layout.channels * layout.height * layout.width;
  const std::size_t record = pixels + 1;
  if (bytes.empty() || bytes.size() % record != 0) {
    throw DataError(path.string() + ": length " + std::to_string(bytes.size()) +
                    " is not a positive multiple of the " + std::to_string(record) +
                    "-byte record size");
  }
  const std::size_t n = bytes.size() / record;
  DatasetSplit split;
  split.class_count = layout.class_count;
  std::vector<float> data(n * pixels);
  for (std::size_t i = 0; i < n; ++i) {
    const unsigned char* rec = bytes.data() + i * record;
    if (rec[0] >= layout.class_count) {
      throw DataError(path.string() + ": record " + std::to_string(i) + " has label " +
                      std::to_string(rec[0]) + " >= " + std::to_string(layout.class_count));
    }
    split.labels.push_back(rec[0]);
    split.ids.push_back(i);
    for (std::size_t p = 0; p < pixels; ++p) data[i * pixels + p] = static_cast<float>(rec[1 + p]) / 255.0f;
  }
  split.images = Tensor<float>({n, layout.channels, layout.height, layout.width}, std::move(data));
  return split;
}

DatasetSplit load_cifar_binary(const std::filesystem::path& path) {
  return load_records(path, RecordLayout{});
}

DatasetSplit load_cifar_binaries(const std::vector<std::filesystem::path>& paths) {
  if (paths.empty()) throw DataError("no CIFAR files given");
  std::vector<Tensor<float>> parts;
  DatasetSplit out;
  out.class_count = 10;
  for (const auto& p : paths) {
    DatasetSplit s = load_cifar_binary(p);
    for (std::size_t i = 0; i < s.size(); ++i) {
      out.labels.push_back(s.labels[i]);
      out.ids.push_back(out.ids.size());
    }
    parts.push_back(s.images);
  }
  std::vector<float> all;
  for (const auto& t : parts) all.insert(all.end(), t.data().begin(), t.data().end());
  out.images = Tensor<float>({out.labels.size(), 3, 32, 32}, std::move(all));
  return out;
}

namespace {

unsigned char quantize(float v) {
  return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

}  // namespace

void save_records(const std::filesystem::path& path, const DatasetSplit& split) {
  if (split.class_count > 256) throw DataError("record format holds at most 256 classes");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  const std::size_t pixels = split.image_numel();
  std::vector<unsigned char> rec(pixels + 1);
  for (std::size_t i = 0; i < split.size(); ++i) {
    rec[0] = static_cast<unsigned char>(split.labels[i]);
    const float* src = split.images.ptr() + i * pixels;
    for (std::size_t p = 0; p < pixels; ++p) rec[1 + p] = quantize(src[p]);
    out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
  if (!out) throw IoError("short write to " + path.string());
}

namespace {

std::filesystem::path sidecar(const std::filesystem::path& path) {
  return std::filesystem::path(path.string() + ".json");
}

}  // namespace

void save_dataset(const std::filesystem::path& path, const DatasetSplit& split,
                  const nlohmann::json& provenance) {
  save_records(path, split);
  nlohmann::json meta = {{"channels", split.channels()}, {"height", split.height()},
                         {"width", split.width()},       {"class_count", split.class_count},
                         {"count", split.size()},         {"ids", split.ids},
                         {"provenance", provenance}};
  std::ofstream out(sidecar(path));
  if (!out) throw IoError("cannot write " + sidecar(path).string());
  out << meta.dump(2) << '\n';
}

DatasetSplit load_dataset(const std::filesystem::path& path) {
  std::ifstream in(sidecar(path));
  if (!in) throw IoError("missing sidecar " + sidecar(path).string());
  const auto meta = nlohmann::json::parse(in);
  RecordLayout layout{meta.at("channels").get<std::size_t>(), meta.at("height").get<std::size_t>(),
                      meta.at("width").get<std::size_t>(), meta.at("class_count").get<int>()};
  DatasetSplit split = load_records(path, layout);
  if (meta.contains("ids")) {
    split.ids = meta.at("ids").get<std::vector<std::uint64_t>>();
    if (split.ids.size() != split.size()) throw DataError(path.string() + ": id list length mismatch");
  }
  return split;
}

// ---------------------------------------------------------------------------

DatasetSplit assemble_poisoned_trainset(const DatasetSplit& clean, const PoisonSet& poisons) {
  DatasetSplit out = clean;
  out.images = clean.images.clone();
  if (poisons.size() == 0) return out;
  if (poisons.poisons.rank() != 4 || poisons.poisons.dim(0) != poisons.size() ||
      poisons.poisons.numel() / poisons.size() != clean.image_numel()) {
    throw ShapeError("assemble_poisoned_trainset: poison tensor " +
                     shape_str(poisons.poisons.shape()) + " does not match " +
                     std::to_string(poisons.size()) + " images of the training set");
  }
  std::unordered_map<std::uint64_t, std::size_t> by_id;
  for (std::size_t i = 0; i < clean.size(); ++i) by_id.emplace(clean.ids[i], i);
  const std::size_t stride = clean.image_numel();
  for (std::size_t j = 0; j < poisons.size(); ++j) {
    auto it = by_id.find(poisons.base_ids[j]);
    if (it == by_id.end()) {
      throw DataError("assemble_poisoned_trainset: base id " + std::to_string(poisons.base_ids[j]) +
                      " not in training set");
    }
    if (clean.labels[it->second] != poisons.label) {
      throw DataError("assemble_poisoned_trainset: base id " + std::to_string(poisons.base_ids[j]) +
                      " has label " + std::to_string(clean.labels[it->second]) +
                      " but poison label is " + std::to_string(poisons.label) +
                      " (clean-label contract)");
    }
    std::copy(poisons.poisons.ptr() + j * stride, poisons.poisons.ptr() + (j + 1) * stride,
              out.images.ptr() + it->second * stride);
  }
  return out;
}

void save_poison_set(const std::filesystem::path& dir, const PoisonSet& set,
                     const Tensor<float>& bases) {
  std::filesystem::create_directories(dir);
  const std::size_t j = set.size();
  DatasetSplit records;
  records.class_count = std::max(set.label + 1, 1);
  records.images = set.poisons.clone();
  records.labels.assign(j, set.label);
  for (std::size_t i = 0; i < j; ++i) records.ids.push_back(set.base_ids[i]);
  if (j > 0 && set.epsilon && std::isfinite(*set.epsilon)) {
    // Round each pixel, then step one level back towards the base if the
    // rounded value left the ball.
    const float eps = static_cast<float>(*set.epsilon) + 1e-6f;
    for (std::size_t i = 0; i < records.images.numel(); ++i) {
      float q = static_cast<float>(quantize(records.images[i])) / 255.0f;
      const float b = bases[i];
      if (q - b > eps) q -= 1.0f / 255.0f;
      if (b - q > eps) q += 1.0f / 255.0f;
      records.images[i] = std::clamp(q, 0.0f, 1.0f);
    }
  }
  if (j > 0) save_records(dir / "poisons.bin", records);
  nlohmann::json manifest = {
      {"attack", set.attack},
      {"config", set.config},
      {"base_ids", set.base_ids},
      {"label", set.label},
      {"epsilon", set.epsilon ? nlohmann::json(*set.epsilon) : nlohmann::json(nullptr)},
      {"initial_objective", set.initial_objective},
      {"final_objective", set.final_objective},
      {"coefficients", set.coefficients},
      {"count", j},
      {"channels", j > 0 ? set.poisons.dim(1) : 0},
      {"height", j > 0 ? set.poisons.dim(2) : 0},
      {"width", j > 0 ? set.poisons.dim(3) : 0}};
  std::ofstream out(dir / "poisons.json");
  if (!out) throw IoError("cannot write " + (dir / "poisons.json").string());
  out << manifest.dump(2) << '\n';
}

PoisonSet load_poison_set(const std::filesystem::path& dir) {
  std::ifstream in(dir / "poisons.json");
  if (!in) throw IoError("cannot open " + (dir / "poisons.json").string());
  const auto m = nlohmann::json::parse(in);
  PoisonSet set;
  set.attack = m.at("attack").get<std::string>();
  set.config = m.at("config");
  set.base_ids = m.at("base_ids").get<std::vector<std::uint64_t>>();
  set.label = m.at("label").get<int>();
  if (!m.at("epsilon").is_null()) set.epsilon = m.at("epsilon").get<double>();
  set.initial_objective = m.value("initial_objective", 0.0);
  set.final_objective = m.value("final_objective", 0.0);
  set.coefficients = m.value("coefficients", std::vector<double>{});
  if (!set.base_ids.empty()) {
    RecordLayout layout{m.at("channels").get<std::size_t>(), m.at("height").get<std::size_t>(),
                        m.at("width").get<std::size_t>(), std::max(set.label + 1, 1)};
    set.poisons = load_records(dir / "poisons.bin", layout).images;
  }
  return set;
}

}  // namespace pb
