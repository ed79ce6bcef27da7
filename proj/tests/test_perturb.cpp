#include <cmath>
#include <filesystem>
#include <limits>
#include <vector>

#include <gtest/gtest.h>

#include "poisonbench/ops.hpp"
#include "poisonbench/perturb.hpp"
#include "poisonbench/rng.hpp"

using namespace pb;

namespace {

// Nearest point of the probability simplex by exhaustive grid search.
Eigen::VectorXd brute_force_simplex(const Eigen::VectorXd& c, double step) {
  const auto n = c.size();
  Eigen::VectorXd best(n);
  double best_d = std::numeric_limits<double>::infinity();
  const int m = static_cast<int>(std::lround(1.0 / step));
  auto consider = [&](const Eigen::VectorXd& p) {
    const double d = (p - c).squaredNorm();
    if (d < best_d) {
      best_d = d;
      best = p;
    }
  };
  if (n == 1) return Eigen::VectorXd::Ones(1);
  for (int i = 0; i <= m; ++i) {
    if (n == 2) {
      Eigen::VectorXd p(2);
      p << i * step, 1.0 - i * step;
      consider(p);
      continue;
    }
    for (int j = 0; i + j <= m; ++j) {
      Eigen::VectorXd p(3);
      p << i * step, j * step, 1.0 - (i + j) * step;
      consider(p);
    }
  }
  return best;
}

Tensor<float> uniform_tensor(Shape shape, Rng& rng, double lo = 0.0, double hi = 1.0) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

}  // namespace

TEST(Simplex, FeasiblePointIsFixed) {
  Eigen::VectorXd c(2);
  c << 0.5, 0.5;
  EXPECT_TRUE(project_simplex(c).isApprox(c));
}

TEST(Simplex, OutsideTwoPointCase) {
  Eigen::VectorXd c(2);
  c << 1.2, -0.2;
  const auto p = project_simplex(c);
  EXPECT_NEAR(p[0], 1.0, 1e-12);
  EXPECT_NEAR(p[1], 0.0, 1e-12);
  const auto b = brute_force_simplex(c, 1e-4);
  EXPECT_NEAR((p - b).lpNorm<Eigen::Infinity>(), 0.0, 1e-4);
}

TEST(Simplex, SingleCoordinateIsOne) {
  for (double v : {-3.0, 0.0, 0.4, 7.0}) {
    Eigen::VectorXd c(1);
    c << v;
    EXPECT_EQ(project_simplex(c)[0], 1.0);
  }
}

TEST(Simplex, MatchesBruteForceOnRandomInstances) {
  Rng rng(11);
  for (int t = 0; t < 100; ++t) {
    const auto n = static_cast<Eigen::Index>(1 + t % 3);
    Eigen::VectorXd c(n);
    for (Eigen::Index i = 0; i < n; ++i) c[i] = rng.uniform(-1.0, 2.0);
    const auto p = project_simplex(c);
    EXPECT_NEAR(p.sum(), 1.0, 1e-12);
    EXPECT_GE(p.minCoeff(), 0.0);
    const auto b = brute_force_simplex(c, n == 3 ? 2e-4 : 1e-4);
    EXPECT_LE((p - b).lpNorm<Eigen::Infinity>(), 1e-3) << "instance " << t;
    // The brute-force point is never closer than the projection.
    EXPECT_LE((p - c).squaredNorm(), (b - c).squaredNorm() + 1e-12);
  }
}

TEST(LinfBall, InsidePointUnchanged) {
  Rng rng(3);
  const auto center = uniform_tensor({2, 3, 4, 4}, rng, 0.2, 0.8);
  auto x = center.clone();
  for (auto& v : x.data()) v += static_cast<float>(rng.uniform(-0.01, 0.01));
  EXPECT_TRUE(bitwise_equal(project_linf(x, center, 8.0 / 255.0), x));
}

TEST(LinfBall, ClampEndpoint) {
  Tensor<float> center({1}, 0.5f), x({1}, 1.0f);
  EXPECT_FLOAT_EQ(project_linf(x, center, 8.0 / 255.0)[0], static_cast<float>(0.5 + 8.0 / 255.0));
}

TEST(LinfBall, IdempotentAndFeasible) {
  Rng rng(4);
  const double eps = 8.0 / 255.0;
  for (int t = 0; t < 1000; ++t) {
    const auto center = uniform_tensor({1, 3, 4, 4}, rng);
    const auto x = uniform_tensor({1, 3, 4, 4}, rng, -0.5, 1.5);
    const auto p = project_linf(x, center, eps);
    ASSERT_TRUE(bitwise_equal(project_linf(p, center, eps), p));
    ASSERT_LE(linf_distance(p, center), eps + 1e-6);
    for (float v : p.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(LinfBall, ProjectionBeatsSampledFeasiblePoints) {
  Rng rng(5);
  const double eps = 8.0 / 255.0;
  const auto center = uniform_tensor({1, 1, 2, 2}, rng);
  const auto x = uniform_tensor({1, 1, 2, 2}, rng);
  const auto p = project_linf(x, center, eps);
  auto dist = [&x](const Tensor<float>& y) {
    double d = 0.0;
    for (std::size_t i = 0; i < y.numel(); ++i) d += std::pow(static_cast<double>(y[i]) - x[i], 2);
    return d;
  };
  const double dp = dist(p);
  for (int s = 0; s < 10000; ++s) {
    Tensor<float> y(center.shape());
    for (std::size_t i = 0; i < y.numel(); ++i) {
      const double lo = std::max(0.0, center[i] - eps), hi = std::min(1.0, center[i] + eps);
      y[i] = static_cast<float>(rng.uniform(lo, hi));
    }
    ASSERT_LE(dp, dist(y) + 1e-9);
  }
}

TEST(Patch, IdempotentAndLowerRight) {
  Rng rng(6);
  const auto imgs = uniform_tensor({2, 3, 32, 32}, rng, 0.1, 0.9);
  const auto patch = checkerboard_patch(3);
  const auto once = apply_patch(imgs, patch);
  EXPECT_TRUE(bitwise_equal(apply_patch(once, patch), once));
  std::size_t changed = 0;
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t r = 0; r < 32; ++r)
      for (std::size_t q = 0; q < 32; ++q) {
        const std::size_t i = (c * 32 + r) * 32 + q;
        if (once[i] != imgs[i]) {
          ++changed;
          EXPECT_GE(r, 29u);
          EXPECT_GE(q, 29u);
        }
      }
  EXPECT_EQ(changed, 9u * 3u);
}

TEST(Patch, OffsetsShiftPlacement) {
  Tensor<float> img({1, 3, 8, 8}, 0.5f);
  auto patch = checkerboard_patch(2);
  patch.offset_bottom = 1;
  patch.offset_right = 2;
  const auto out = apply_patch(img, patch);
  // Rows 5..6, columns 4..5.
  EXPECT_NE(out[5 * 8 + 4], 0.5f);
  EXPECT_EQ(out[7 * 8 + 7], 0.5f);
  EXPECT_EQ(out[5 * 8 + 6], 0.5f);
}

TEST(Patch, FileRoundTrip) {
  const auto path = std::filesystem::temp_directory_path() / "poisonbench_tests" / "patch.f32";
  std::filesystem::create_directories(path.parent_path());
  auto patch = checkerboard_patch(5);
  patch.offset_bottom = 1;
  save_patch(path, patch);
  const auto back = load_patch(path);
  EXPECT_TRUE(bitwise_equal(back.pixels, patch.pixels));
  EXPECT_EQ(back.offset_bottom, 1u);
  EXPECT_EQ(back.offset_right, 0u);
}

TEST(Watermark, AffineEndpoints) {
  Rng rng(7);
  const auto base = uniform_tensor({1, 3, 4, 4}, rng);
  const auto target = uniform_tensor({1, 3, 4, 4}, rng);
  EXPECT_TRUE(bitwise_equal(blend_watermark(base, target, 0.0), base));
  EXPECT_TRUE(bitwise_equal(blend_watermark(base, target, 1.0), target));
  const auto mid = blend_watermark(Tensor<float>({1, 3, 4, 4}, 0.0f), Tensor<float>({1, 3, 4, 4}, 1.0f), 0.3);
  for (float v : mid.data()) EXPECT_FLOAT_EQ(v, 0.3f);
}

namespace {

// Two-class linear model on flattened pixels.
LogitsFn linear_model(const Tensor<float>& w) {
  return [w](const Tensor<float>& x) { return linear(flatten(x), w, Tensor<float>({2}, 0.0f)); };
}

}  // namespace

TEST(Pgd, ZeroStepsReturnsStart) {
  Rng rng(8);
  const auto x0 = uniform_tensor({1, 1, 2, 2}, rng);
  const auto w = uniform_tensor({2, 4}, rng, -1.0, 1.0);
  const std::vector<int> labels = {0};
  PgdOptions opt;
  opt.steps = 0;
  EXPECT_TRUE(bitwise_equal(pgd_maximize_loss(x0, labels, {linear_model(w)}, opt), x0));
}

TEST(Pgd, LinearModelReachesSignCorner) {
  Rng rng(9);
  Tensor<float> x0({1, 1, 3, 3}, 0.5f);
  auto w = uniform_tensor({2, 9}, rng, -1.0, 1.0);
  for (std::size_t d = 0; d < 9; ++d) {
    if (std::abs(w[9 + d] - w[d]) < 0.05f) w[9 + d] += 0.2f;
  }
  const std::vector<int> labels = {0};
  PgdOptions opt;
  const auto x = pgd_maximize_loss(x0, labels, {linear_model(w)}, opt);
  EXPECT_LE(linf_distance(x, x0), opt.epsilon + 1e-6);
  for (std::size_t d = 0; d < 9; ++d) {
    const double dir = w[9 + d] > w[d] ? 1.0 : -1.0;
    EXPECT_NEAR(x[d], 0.5 + opt.epsilon * dir, 1e-6) << d;
  }
}
