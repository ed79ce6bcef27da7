#include "poisonbench/perturb.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <numeric>

#include <nlohmann/json.hpp>

#include "poisonbench/ops.hpp"

namespace pb {

Eigen::VectorXd project_simplex(const Eigen::VectorXd& c) {
  if (c.size() == 0) throw Error("project_simplex: empty vector");
  std::vector<double> u(c.data(), c.data() + c.size());
  std::sort(u.begin(), u.end(), std::greater<>());
  double running = 0.0, theta = 0.0;
  for (std::size_t j = 0; j < u.size(); ++j) {
    running += u[j];
    const double t = (running - 1.0) / static_cast<double>(j + 1);
    if (u[j] - t > 0.0) theta = t;
  }
  return (c.array() - theta).max(0.0).matrix();
}

PatchSpec checkerboard_patch(std::size_t size, std::size_t channels) {
  if (size == 0) throw Error("checkerboard_patch: size must be positive");
  static constexpr std::array<std::array<float, 3>, 4> kColors = {
      {{1.0f, 0.0f, 0.0f}, {0.0f, 1.0f, 0.0f}, {0.0f, 0.0f, 1.0f}, {1.0f, 1.0f, 0.0f}}};
  Tensor<float> px({channels, size, size});
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const auto& col = kColors[(y % 2) * 2 + (x + y / 2) % 2];
      for (std::size_t c = 0; c < channels; ++c) px[(c * size + y) * size + x] = col[c % 3];
    }
  return PatchSpec{px, 0, 0};
}

Tensor<float> apply_patch(const Tensor<float>& images, const PatchSpec& patch) {
  const bool single = images.rank() == 3;
  if (!single && images.rank() != 4) {
    throw ShapeError("apply_patch: expected [N,C,H,W] or [C,H,W], got " + shape_str(images.shape()));
  }
  const std::size_t n = single ? 1 : images.dim(0);
  const std::size_t c = images.dim(single ? 0 : 1);
  const std::size_t h = images.dim(single ? 1 : 2), w = images.dim(single ? 2 : 3);
  if (patch.pixels.rank() != 3 || patch.pixels.dim(0) != c) {
    throw ShapeError("apply_patch: patch " + shape_str(patch.pixels.shape()) + " vs image " +
                     shape_str(images.shape()));
  }
  const std::size_t ph = patch.pixels.dim(1), pw = patch.pixels.dim(2);
  if (ph + patch.offset_bottom > h || pw + patch.offset_right > w) {
    throw ShapeError("apply_patch: " + std::to_string(ph) + "x" + std::to_string(pw) +
                     " patch at offset (" + std::to_string(patch.offset_bottom) + "," +
                     std::to_string(patch.offset_right) + ") does not fit a " +
                     std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  const std::size_t top = h - ph - patch.offset_bottom, left = w - pw - patch.offset_right;
  Tensor<float> out = images.clone();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t y = 0; y < ph; ++y)
        for (std::size_t x = 0; x < pw; ++x)
          out[((i * c + ch) * h + top + y) * w + left + x] = patch.pixels[(ch * ph + y) * pw + x];
  return out;
}

Tensor<float> blend_watermark(const Tensor<float>& base, const Tensor<float>& target,
                              double opacity) {
  if (!(opacity >= 0.0 && opacity <= 1.0)) {
    throw Error("blend_watermark: opacity " + std::to_string(opacity) + " outside [0,1]");
  }
  // A single target may be blended into a whole batch of bases.
  bool conforms = base.shape() == target.shape();
  if (!conforms && base.rank() >= 2) {
    const Shape tail(base.shape().begin() + 1, base.shape().end());
    Shape tail1 = tail;
    tail1.insert(tail1.begin(), 1);
    conforms = target.shape() == tail || target.shape() == tail1;
  }
  if (!conforms) {
    throw ShapeError("blend_watermark: shape mismatch " + shape_str(base.shape()) + " vs " +
                     shape_str(target.shape()));
  }
  const auto a = static_cast<float>(1.0 - opacity), b = static_cast<float>(opacity);
  Tensor<float> out(base.shape());
  const std::size_t inner = target.numel();
  for (std::size_t i = 0; i < base.numel(); ++i)
    out[i] = std::clamp(a * base[i] + b * target[i % inner], 0.0f, 1.0f);
  return out;
}

void save_patch(const std::filesystem::path& path, const PatchSpec& patch) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  for (float v : patch.pixels.data()) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    const std::array<char, 4> le = {static_cast<char>(bits & 0xFF), static_cast<char>((bits >> 8) & 0xFF),
                                    static_cast<char>((bits >> 16) & 0xFF),
                                    static_cast<char>((bits >> 24) & 0xFF)};
    out.write(le.data(), 4);
  }
  nlohmann::json meta = {{"channels", patch.pixels.dim(0)},
                         {"height", patch.pixels.dim(1)},
                         {"width", patch.pixels.dim(2)},
                         {"offset_bottom", patch.offset_bottom},
                         {"offset_right", patch.offset_right}};
  std::ofstream side(path.string() + ".json");
  side << meta.dump(2) << '\n';
}

PatchSpec load_patch(const std::filesystem::path& path) {
  std::ifstream side(path.string() + ".json");
  if (!side) throw IoError("missing patch sidecar " + path.string() + ".json");
  const auto meta = nlohmann::json::parse(side);
  const auto c = meta.at("channels").get<std::size_t>();
  const auto h = meta.at("height").get<std::size_t>();
  const auto w = meta.at("width").get<std::size_t>();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::vector<float> px(c * h * w);
  for (auto& v : px) {
    std::array<unsigned char, 4> le{};
    if (!in.read(reinterpret_cast<char*>(le.data()), 4)) {
      throw IoError(path.string() + ": truncated patch buffer");
    }
    const std::uint32_t bits = le[0] | (le[1] << 8) | (le[2] << 16) | (static_cast<std::uint32_t>(le[3]) << 24);
    std::memcpy(&v, &bits, 4);
    if (!(v >= 0.0f && v <= 1.0f)) throw IoError(path.string() + ": patch pixel outside [0,1]");
  }
  return PatchSpec{Tensor<float>({c, h, w}, std::move(px)), meta.value("offset_bottom", std::size_t{0}),
                   meta.value("offset_right", std::size_t{0})};
}

Tensor<float> pgd_maximize_loss(const Tensor<float>& x0, std::span<const int> labels,
                                const std::vector<LogitsFn>& models, const PgdOptions& options) {
  if (models.empty()) throw Error("pgd_maximize_loss: no models");
  if (!std::isfinite(options.epsilon)) throw Error("pgd_maximize_loss: epsilon must be finite");
  Tensor<float> x = x0.clone();
  for (std::size_t step = 0; step < options.steps; ++step) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    Tensor<float> var = x.clone();
    var.set_requires_grad();
    Tensor<float> loss = softmax_cross_entropy(models[0](var), labels);
    for (std::size_t m = 1; m < models.size(); ++m)
      loss = add(loss, softmax_cross_entropy(models[m](var), labels));
    if (models.size() > 1) loss = scale(loss, 1.0f / static_cast<float>(models.size()));
    tape.backward(loss);
    auto g = var.grad();
    const auto step_size = static_cast<float>(options.step_size);
    for (std::size_t i = 0; i < x.numel(); ++i) {
      const float s = g[i] > 0.0f ? 1.0f : (g[i] < 0.0f ? -1.0f : 0.0f);
      x[i] += step_size * s;
    }
    x = project_linf(x, x0, options.epsilon);
  }
  return x;
}

}  // namespace pb
