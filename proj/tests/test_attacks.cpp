#include <cmath>
#include <memory>

#include <gtest/gtest.h>

#include "poisonbench/attacks.hpp"
#include "poisonbench/error.hpp"
#include "poisonbench/ops.hpp"

using namespace pb;

namespace {

constexpr double kEps8 = 8.0 / 255.0;

Tensor<float> uniform(Shape shape, Rng& rng, double lo, double hi) {
  Tensor<float> t(std::move(shape));
  for (auto& v : t.data()) v = static_cast<float>(rng.uniform(lo, hi));
  return t;
}

CraftingContext identity_context(const Tensor<float>& target, const Tensor<float>& bases) {
  CraftingContext ctx;
  ctx.ensemble = {CraftingModel::identity()};
  ctx.target = target;
  ctx.bases = bases;
  for (std::size_t j = 0; j < bases.dim(0); ++j) ctx.base_ids.push_back(100 + j);
  ctx.base_class = 1;
  ctx.target_class = 0;
  ctx.seed = 5;
  return ctx;
}

double l2(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) s += std::pow(static_cast<double>(a[i]) - b[i], 2);
  return std::sqrt(s);
}

// Small trained-looking model: random conv_small on 8x8 inputs.
struct Fixture {
  std::shared_ptr<const Model<float>> model;
  Tensor<float> target, bases, pool;
};

Fixture model_fixture(std::size_t j) {
  Rng rng(21);
  Model<float> m(conv_small(10, 8), 3);
  m.set_normalization(ChannelStats::identity(3));
  Fixture f;
  f.model = std::make_shared<const Model<float>>(std::move(m));
  f.target = uniform({1, 3, 8, 8}, rng, 0.0, 1.0);
  f.bases = uniform({j, 3, 8, 8}, rng, 0.0, 1.0);
  f.pool = uniform({4, 3, 8, 8}, rng, 0.0, 1.0);
  return f;
}

CraftingContext model_context(const Fixture& f) {
  CraftingContext ctx = identity_context(f.target, f.bases);
  ctx.ensemble = {CraftingModel::from(f.model)};
  ctx.target_pool = f.pool;
  ctx.patch = checkerboard_patch(3);
  return ctx;
}

void expect_box(const Tensor<float>& x) {
  for (float v : x.data()) {
    ASSERT_GE(v, 0.0f);
    ASSERT_LE(v, 1.0f);
  }
}

}  // namespace

TEST(Config, DefaultSettings) {
  const auto cp = std::get<CpConfig>(attack_config_from_json("cp", nlohmann::json::object()));
  EXPECT_DOUBLE_EQ(cp.epsilon, 25.5 / 255.0);
  EXPECT_DOUBLE_EQ(cp.lr, 0.04);
  EXPECT_EQ(cp.max_iters, 4000u);
  const auto fc = std::get<FcConfig>(attack_config_from_json("fc", nlohmann::json::object()));
  EXPECT_DOUBLE_EQ(fc.step_size, 1e-4);
  EXPECT_EQ(fc.max_iters, 1200u);
  EXPECT_FALSE(fc.epsilon.has_value());
  const auto clbd = std::get<ClbdConfig>(attack_config_from_json("clbd", nlohmann::json::object()));
  EXPECT_DOUBLE_EQ(clbd.epsilon, 16.0 / 255.0);
  EXPECT_EQ(clbd.patch_size, 3u);
  const auto htbd = std::get<HtbdConfig>(attack_config_from_json("htbd", nlohmann::json::object()));
  EXPECT_EQ(htbd.patch_size, 8u);
  EXPECT_EQ(htbd.max_iters, 5000u);
}

TEST(Config, FractionStringsAndStrictKeys) {
  const auto fc = std::get<FcConfig>(attack_config_from_json("fc", {{"epsilon", "8/255"}}));
  ASSERT_TRUE(fc.epsilon.has_value());
  EXPECT_DOUBLE_EQ(*fc.epsilon, kEps8);
  EXPECT_THROW(attack_config_from_json("fc", {{"epsilon", 0.1}, {"radius", 1}}), ConfigError);
  EXPECT_THROW(attack_config_from_json("nope", nlohmann::json::object()), ConfigError);
  const auto back = attack_config_from_json("fc", attack_config_to_json(fc));
  EXPECT_DOUBLE_EQ(*std::get<FcConfig>(back).epsilon, kEps8);
}

TEST(Registry, DuplicateAndListing) {
  EXPECT_THROW(register_attack("fc", [](const CraftingContext&, const nlohmann::json&) { return PoisonSet{}; }),
               ConfigError);
  register_attack("unit_test_attack",
                  [](const CraftingContext& ctx, const nlohmann::json&) { return craft_noop(ctx); });
  const auto names = attack_names();
  EXPECT_NE(std::find(names.begin(), names.end(), "unit_test_attack"), names.end());
  for (const char* n : {"fc", "cp", "clbd", "htbd", "noop"}) {
    EXPECT_NE(std::find(names.begin(), names.end(), n), names.end()) << n;
  }
  EXPECT_TRUE(is_backdoor_attack("htbd"));
  EXPECT_FALSE(is_backdoor_attack("cp"));
  EXPECT_THROW(find_attack("missing"), ConfigError);
}

TEST(Noop, PoisonsAreBases) {
  Rng rng(1);
  const auto ctx = identity_context(uniform({1, 3, 4, 4}, rng, 0, 1), uniform({3, 3, 4, 4}, rng, 0, 1));
  const auto set = craft_noop(ctx);
  EXPECT_TRUE(bitwise_equal(set.poisons, ctx.bases));
  EXPECT_EQ(set.label, 1);
  EXPECT_EQ(set.base_ids, ctx.base_ids);
}

TEST(FeatureCollision, IdentityExtractorReachesTarget) {
  Rng rng(2);
  const auto target = uniform({1, 3, 8, 8}, rng, 0, 1);
  const auto ctx = identity_context(target, uniform({2, 3, 8, 8}, rng, 0, 1));
  FcConfig cfg;
  cfg.beta = 0.0;
  cfg.step_size = 0.01;
  const auto set = craft_fc(ctx, cfg);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_LT(l2(set.poisons.slice0(j, j + 1), target), 1e-3);
  EXPECT_EQ(set.objective_trace.size(), 1201u);
  EXPECT_LT(set.final_objective, set.initial_objective);
}

TEST(FeatureCollision, HugePenaltyStaysAtBase) {
  Rng rng(3);
  const auto ctx = identity_context(uniform({1, 3, 8, 8}, rng, 0, 1), uniform({2, 3, 8, 8}, rng, 0, 1));
  FcConfig cfg;
  cfg.beta = 1e9;
  cfg.max_iters = 50;
  const auto set = craft_fc(ctx, cfg);
  EXPECT_LT(linf_distance(set.poisons, ctx.bases), 1e-3);
}

TEST(FeatureCollision, ConstrainedFormStaysInBall) {
  const auto f = model_fixture(4);
  FcConfig cfg;
  cfg.epsilon = kEps8;
  cfg.step_size = 0.05;
  cfg.max_iters = 40;
  const auto set = craft_fc(model_context(f), cfg);
  EXPECT_LE(linf_distance(set.poisons, f.bases), kEps8 + 1e-6);
  expect_box(set.poisons);
  EXPECT_LE(set.final_objective, set.initial_objective);
}

TEST(ConvexPolytope, MidpointConstruction) {
  Rng rng(4);
  const auto target = uniform({1, 3, 6, 6}, rng, 0.2, 0.8);
  Tensor<float> bases({2, 3, 6, 6});
  const std::size_t m = target.numel();
  for (std::size_t i = 0; i < m; ++i) {
    const float d = static_cast<float>(rng.uniform(-0.05, 0.05));
    bases[i] = target[i] + d;
    bases[m + i] = target[i] - d;
  }
  const auto set = craft_cp(identity_context(target, bases), CpConfig{});
  ASSERT_EQ(set.coefficients.size(), 2u);
  EXPECT_NEAR(set.coefficients[0], 0.5, 1e-3);
  EXPECT_NEAR(set.coefficients[1], 0.5, 1e-3);
  EXPECT_LT(set.final_objective, 1e-6);
  EXPECT_LE(linf_distance(set.poisons, bases), 25.5 / 255.0 + 1e-6);
}

TEST(ConvexPolytope, ReachableAsymmetricTarget) {
  Rng rng(5);
  const auto target = uniform({1, 3, 6, 6}, rng, 0.3, 0.7);
  Tensor<float> bases({3, 3, 6, 6});
  for (std::size_t j = 0; j < 3; ++j)
    for (std::size_t i = 0; i < target.numel(); ++i)
      bases[j * target.numel() + i] = target[i] + static_cast<float>(rng.uniform(-0.08, 0.08));
  const auto set = craft_cp(identity_context(target, bases), CpConfig{});
  EXPECT_LT(set.final_objective, 1e-6);
  double sum = 0.0;
  for (double c : set.coefficients) {
    EXPECT_GE(c, -1e-9);
    sum += c;
  }
  EXPECT_NEAR(sum, 1.0, 1e-6);
  EXPECT_LE(linf_distance(set.poisons, bases), 25.5 / 255.0 + 1e-6);
  expect_box(set.poisons);
}

TEST(ConvexPolytope, ModelPoisonsRespectBall) {
  const auto f = model_fixture(3);
  CpConfig cfg;
  cfg.epsilon = kEps8;
  cfg.max_iters = 30;
  const auto set = craft_cp(model_context(f), cfg);
  EXPECT_LE(linf_distance(set.poisons, f.bases), kEps8 + 1e-6);
  expect_box(set.poisons);
  EXPECT_LE(set.final_objective, set.initial_objective);
}

TEST(ConvexPolytope, ResidualHelper) {
  Tensor<float> t({1, 2}, {1.0f, 0.0f});
  Tensor<float> p({2, 2}, {2.0f, 0.0f, 0.0f, 2.0f});
  Eigen::VectorXd c(2);
  c << 0.5, 0.5;
  // 0.5 * ||(1,0) - (1,1)||^2 / ||(1,0)||^2
  EXPECT_NEAR(cp_residual(t, p, c), 0.5, 1e-12);
}

TEST(CleanLabelBackdoor, ZeroStepsGivesPatchedBases) {
  const auto f = model_fixture(3);
  ClbdConfig cfg;
  cfg.pgd_steps = 0;
  auto ctx = model_context(f);
  const auto set = craft_clbd(ctx, cfg);
  EXPECT_TRUE(bitwise_equal(set.poisons, apply_patch(f.bases, *ctx.patch)));
}

TEST(CleanLabelBackdoor, AscentRaisesLossAndRespectsBall) {
  const auto f = model_fixture(4);
  auto ctx = model_context(f);
  const auto set = craft_clbd(ctx, ClbdConfig{});
  const auto before = f.model->logits(f.bases);
  const auto after = f.model->logits(set.poisons);
  const std::size_t c = before.dim(1);
  for (std::size_t j = 0; j < 4; ++j) {
    const std::vector<int> label = {ctx.base_class};
    const double lb = softmax_cross_entropy(before.slice0(j, j + 1), label).item();
    const double la = softmax_cross_entropy(after.slice0(j, j + 1), label).item();
    EXPECT_GE(la + 1e-5, lb) << "poison " << j << " of " << c << " classes";
  }
  EXPECT_LE(linf_distance(set.poisons, apply_patch(f.bases, *ctx.patch)), 16.0 / 255.0 + 1e-6);
  expect_box(set.poisons);
}

TEST(HiddenTrigger, IdentityExtractorReachesPatchedTarget) {
  Rng rng(6);
  const auto target = uniform({1, 3, 8, 8}, rng, 0, 1);
  auto patch = checkerboard_patch(2);
  const auto patched = apply_patch(target, patch);
  Tensor<float> base(patched.shape());
  for (std::size_t i = 0; i < base.numel(); ++i) {
    base[i] = std::clamp(patched[i] + static_cast<float>(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
  }
  auto ctx = identity_context(target, base);
  ctx.target_pool = target;
  ctx.patch = patch;
  const auto set = craft_htbd(ctx, HtbdConfig{});
  EXPECT_LT(l2(set.poisons, patched), 1e-3);
}

TEST(HiddenTrigger, WithReplacementAlsoConverges) {
  Rng rng(7);
  const auto target = uniform({1, 3, 8, 8}, rng, 0, 1);
  auto patch = checkerboard_patch(2);
  const auto patched = apply_patch(target, patch);
  Tensor<float> bases({2, 3, 8, 8});
  for (std::size_t j = 0; j < 2; ++j)
    for (std::size_t i = 0; i < patched.numel(); ++i)
      bases[j * patched.numel() + i] =
          std::clamp(patched[i] + static_cast<float>(rng.uniform(-0.05, 0.05)), 0.0f, 1.0f);
  auto ctx = identity_context(target, bases);
  ctx.target_pool = target;
  ctx.patch = patch;
  HtbdConfig cfg;
  cfg.with_replacement = true;
  const auto set = craft_htbd(ctx, cfg);
  for (std::size_t j = 0; j < 2; ++j) EXPECT_LT(l2(set.poisons.slice0(j, j + 1), patched), 1e-3);
}

TEST(HiddenTrigger, PoisonsHideTheTrigger) {
  const auto f = model_fixture(3);
  auto ctx = model_context(f);
  HtbdConfig cfg;
  cfg.max_iters = 60;
  cfg.patch_size = 3;
  const auto set = craft_htbd(ctx, cfg);
  EXPECT_LE(linf_distance(set.poisons, f.bases), 16.0 / 255.0 + 1e-6);
  expect_box(set.poisons);
  // The patch region is never pasted verbatim.
  for (std::size_t j = 0; j < 3; ++j) {
    const auto x = set.poisons.slice0(j, j + 1);
    EXPECT_GT(linf_distance(apply_patch(x, *ctx.patch), x), 0.0);
  }
}

TEST(Context, ValidationRejectsMismatches) {
  Rng rng(8);
  auto ctx = identity_context(uniform({1, 3, 4, 4}, rng, 0, 1), uniform({2, 3, 5, 5}, rng, 0, 1));
  EXPECT_THROW(ctx.validate(), AttackError);
  ctx = identity_context(uniform({1, 3, 4, 4}, rng, 0, 1), uniform({2, 3, 4, 4}, rng, 0, 1));
  ctx.base_ids.pop_back();
  EXPECT_THROW(ctx.validate(), AttackError);
  ctx.ensemble.clear();
  EXPECT_THROW(craft_fc(ctx, FcConfig{}), AttackError);
}
