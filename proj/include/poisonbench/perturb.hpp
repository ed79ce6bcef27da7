#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <limits>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "poisonbench/error.hpp"
#include "poisonbench/tensor.hpp"

namespace pb {

inline constexpr double kUnboundedEpsilon = std::numeric_limits<double>::infinity();

// Elementwise clamp to [center - eps, center + eps], then to the [0,1] pixel
// box. An infinite radius only applies the box.
template <typename T>
Tensor<T> project_linf(const Tensor<T>& x, const Tensor<T>& center, double epsilon) {
  if (x.shape() != center.shape()) {
    throw ShapeError("project_linf: shape mismatch " + shape_str(x.shape()) + " vs " +
                     shape_str(center.shape()));
  }
  if (std::isnan(epsilon) || epsilon < 0.0) throw Error("project_linf: epsilon must be >= 0");
  Tensor<T> out(x.shape());
  const bool bounded = std::isfinite(epsilon);
  const T eps = bounded ? static_cast<T>(epsilon) : T(0);
  for (std::size_t i = 0; i < x.numel(); ++i) {
    T v = x[i];
    if (bounded) v = std::clamp(v, center[i] - eps, center[i] + eps);
    out[i] = std::clamp(v, T(0), T(1));
  }
  return out;
}

// Largest |x - center| over all entries.
template <typename T>
double linf_distance(const Tensor<T>& x, const Tensor<T>& center) {
  double d = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i)
    d = std::max(d, std::abs(static_cast<double>(x[i]) - static_cast<double>(center[i])));
  return d;
}

// Euclidean projection onto {c : c >= 0, sum c = 1} by the sort-and-threshold
// method.
Eigen::VectorXd project_simplex(const Eigen::VectorXd& c);

// Square trigger pasted at a corner. Offsets are measured from the bottom-right
// corner; (0,0) puts the patch flush with it.
struct PatchSpec {
  Tensor<float> pixels;  // [C,h,w] in [0,1]
  std::size_t offset_bottom = 0;
  std::size_t offset_right = 0;

  std::size_t size() const { return pixels.dim(1); }
};

// Checkerboard of saturated colours; the default trigger.
PatchSpec checkerboard_patch(std::size_t size, std::size_t channels = 3);

// Overwrites the patch region of every image in [N,C,H,W] (or a single
// [C,H,W]); no blending.
Tensor<float> apply_patch(const Tensor<float>& images, const PatchSpec& patch);

// (1 - opacity) * base + opacity * target, clamped to [0,1].
Tensor<float> blend_watermark(const Tensor<float>& base, const Tensor<float>& target,
                              double opacity);

// Raw float32 little-endian pixels at `path` with `<path>.json` sidecar
// (channels, size, offsets).
void save_patch(const std::filesystem::path& path, const PatchSpec& patch);
PatchSpec load_patch(const std::filesystem::path& path);

using LogitsFn = std::function<Tensor<float>(const Tensor<float>&)>;

struct PgdOptions {
  std::size_t steps = 20;
  double step_size = 4.0 / 255.0;
  double epsilon = 16.0 / 255.0;
};

// Sign-gradient ascent on the mean cross-entropy over `models`, projected on
// the epsilon ball around x0 after each step. Returns the final iterate.
Tensor<float> pgd_maximize_loss(const Tensor<float>& x0, std::span<const int> labels,
                                const std::vector<LogitsFn>& models, const PgdOptions& options);

}  // namespace pb
