#include <algorithm>
#include <array>
#include <cmath>

#include "poisonbench/data.hpp"
#include "poisonbench/error.hpp"

namespace pb {

namespace {

constexpr int kShapeCount = 10;

// u, v are offsets from the shape centre in units of its radius.
bool inside_shape(int shape, double u, double v) {
  const double au = std::abs(u), av = std::abs(v);
  const double box = std::max(au, av);
  const double rho = std::sqrt(u * u + v * v);
  switch (shape) {
    case 0:  // disk
      return rho <= 1.0;
    case 1:  // square
      return box <= 0.8;
    case 2:  // triangle, apex up
      return v >= -0.85 && v <= 0.85 && au <= (v + 0.85) / 1.7 * 0.95;
    case 3:  // plus
      return (au <= 0.3 && av <= 0.95) || (av <= 0.3 && au <= 0.95);
    case 4:  // ring
      return rho >= 0.6 && rho <= 1.0;
    case 5:  // horizontal bars
      return box <= 0.9 && static_cast<int>(std::floor((v + 0.9) / 0.36)) % 2 == 0;
    case 6:  // vertical bars
      return box <= 0.9 && static_cast<int>(std::floor((u + 0.9) / 0.36)) % 2 == 0;
    case 7:  // diamond
      return au + av <= 1.0;
    case 8:  // X
      return box <= 0.9 && (std::abs(u - v) <= 0.35 || std::abs(u + v) <= 0.35);
    default:  // hollow square
      return box <= 0.9 && box >= 0.55;
  }
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = std::fmod(h, 1.0) * 6.0;
  const int i = static_cast<int>(std::floor(h));
  const double f = h - i;
  const double p = v * (1 - s), q = v * (1 - s * f), t = v * (1 - s * (1 - f));
  switch (i % 6) {
    case 0: return {v, t, p};
    case 1: return {q, v, p};
    case 2: return {p, v, t};
    case 3: return {p, q, v};
    case 4: return {t, p, v};
    default: return {v, p, q};
  }
}

struct ClassLook {
  int shape;
  std::array<double, 3> color;
};

// Pretrain and finetune classes use different shape assignments and palettes
// so the two label sets are disjoint.
ClassLook class_look(SynthVariant variant, int k, int class_count) {
  const double frac = static_cast<double>(k) / class_count;
  if (variant == SynthVariant::finetune) {
    return {k % kShapeCount, hsv_to_rgb(frac, 0.85, 0.95)};
  }
  return {(3 * k + 1) % kShapeCount, hsv_to_rgb(frac + 0.5 / class_count, 0.55, 0.75)};
}

void render(const ClassLook& look, std::size_t size, Rng& rng, float* out) {
  const double s = static_cast<double>(size);
  const std::array<double, 3> bg = {rng.uniform(0.15, 0.55), rng.uniform(0.15, 0.55),
                                    rng.uniform(0.15, 0.55)};
  const double tex_amp = rng.uniform(0.03, 0.12);
  const double fx = rng.uniform(0.3, 1.6), fy = rng.uniform(0.3, 1.6);
  const double phase = rng.uniform(0.0, 2.0 * M_PI);
  const double cx = rng.uniform(0.38, 0.62) * s, cy = rng.uniform(0.38, 0.62) * s;
  const double radius = rng.uniform(0.24, 0.36) * s;
  std::array<double, 3> fg;
  for (int c = 0; c < 3; ++c) fg[c] = std::clamp(look.color[c] + rng.uniform(-0.1, 0.1), 0.0, 1.0);
  const double contrast = rng.uniform(0.2, 0.4);
  const std::size_t plane = size * size;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double u = (static_cast<double>(x) + 0.5 - cx) / radius;
      const double v = (static_cast<double>(y) + 0.5 - cy) / radius;
      const bool on = inside_shape(look.shape, u, v);
      const double tex = tex_amp * std::sin(fx * x + fy * y + phase);
      for (std::size_t c = 0; c < 3; ++c) {
        double val = bg[c] + tex;
        if (on) val += contrast * (fg[c] - val);
        val += rng.uniform(-0.02, 0.02);
        val = std::clamp(val, 0.0, 1.0);
        out[c * plane + y * size + x] = static_cast<float>(std::lround(val * 255.0)) / 255.0f;
      }
    }
}

DatasetSplit generate_split(const SynthConfig& cfg, std::uint64_t split_tag, std::size_t per_class) {
  const std::size_t size = cfg.image_size;
  const std::size_t stride = 3 * size * size;
  const std::size_t n = per_class * static_cast<std::size_t>(cfg.class_count);
  std::vector<float> data(n * stride);
  DatasetSplit split;
  split.class_count = cfg.class_count;
  const std::uint64_t base =
      mix64(mix64(cfg.seed, static_cast<std::uint64_t>(cfg.variant)), split_tag);
  // Interleave classes so that every prefix is close to balanced.
  std::size_t slot = 0;
  for (std::size_t i = 0; i < per_class; ++i)
    for (int k = 0; k < cfg.class_count; ++k) {
      Rng rng(mix64(base, (static_cast<std::uint64_t>(k) << 32) | i));
      render(class_look(cfg.variant, k, cfg.class_count), size, rng, data.data() + slot * stride);
      split.labels.push_back(k);
      split.ids.push_back(slot);
      ++slot;
    }
  split.images = Tensor<float>({n, 3, size, size}, std::move(data));
  return split;
}

}  // namespace

SynthDataset synth_generate(const SynthConfig& config) {
  if (config.class_count < 2) throw DataError("synth_generate: class_count must be >= 2");
  if (config.class_count > 256) throw DataError("synth_generate: class_count must be <= 256");
  if (config.per_class == 0 || config.test_per_class == 0 || config.image_size < 4) {
    throw DataError("synth_generate: empty split or image_size < 4");
  }
  return {generate_split(config, 0, config.per_class),
          generate_split(config, 1, config.test_per_class)};
}

}  // namespace pb
