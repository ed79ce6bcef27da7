#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <nlohmann/json.hpp>

#include "poisonbench/data.hpp"
#include "poisonbench/model.hpp"
#include "poisonbench/perturb.hpp"

namespace pb {

// Feature collision. Without epsilon the l2 penalty beta*||x - x_b||^2 is
// handled by its proximal map; with epsilon the penalty is dropped and each
// step projects onto the l-inf ball.
struct FcConfig {
  std::optional<double> beta;  // default 0.25 * (feature_dim / input_dim)^2
  double step_size = 1e-4;
  std::size_t max_iters = 1200;
  double watermark_opacity = 0.3;
  std::optional<double> epsilon;
};

// Convex polytope.
struct CpConfig {
  double lr = 0.04;
  std::size_t max_iters = 4000;
  double loss_tol = 1e-6;
  double epsilon = 25.5 / 255.0;
  std::size_t inner_steps = 200;
  double inner_tol = 1e-9;
};

// Clean-label backdoor: PGD away from the base class, then the trigger.
struct ClbdConfig {
  std::size_t pgd_steps = 20;
  double pgd_step = 4.0 / 255.0;
  double epsilon = 16.0 / 255.0;
  std::size_t patch_size = 3;
};

// Hidden-trigger backdoor.
struct HtbdConfig {
  double lr0 = 1e-3;
  double lr_decay = 0.95;
  std::size_t decay_every = 2000;
  std::size_t max_iters = 5000;
  double epsilon = 16.0 / 255.0;
  std::size_t patch_size = 8;
  std::size_t pairing_refresh = 100;
  bool with_replacement = false;
};

// Poisons are the unmodified bases; the control arm.
struct NoopConfig {};

using AttackConfig = std::variant<FcConfig, CpConfig, ClbdConfig, HtbdConfig, NoopConfig>;

// Strict parse: unknown keys are a ConfigError. `name` selects the variant.
AttackConfig attack_config_from_json(const std::string& name, const nlohmann::json& j);
nlohmann::json attack_config_to_json(const AttackConfig& config);
std::string attack_name(const AttackConfig& config);
// l-inf radius the poisons obey, if any.
std::optional<double> attack_epsilon(const AttackConfig& config);
// Trigger size for backdoor configs, nullopt for triggerless ones.
std::optional<std::size_t> attack_patch_size(const AttackConfig& config);

// One feature extractor the attacker differentiates through.
struct CraftingModel {
  std::function<Tensor<float>(const Tensor<float>&)> features;
  std::function<Tensor<float>(const Tensor<float>&)> logits;
  std::uint64_t param_hash = 0;

  static CraftingModel from(std::shared_ptr<const Model<float>> model);
  // f(x) = flatten(x); has no classifier head.
  static CraftingModel identity();
};

struct CraftingContext {
  std::vector<CraftingModel> ensemble;
  Tensor<float> target;  // [1,C,H,W]
  Tensor<float> bases;   // [J,C,H,W]
  std::vector<std::uint64_t> base_ids;
  int base_class = -1;
  int target_class = -1;
  std::uint64_t seed = 0;
  // Target-class training images that HTBD patches.
  std::optional<Tensor<float>> target_pool;
  // Trigger used by backdoor attacks; the config's default size otherwise.
  std::optional<PatchSpec> patch;

  std::size_t budget() const { return base_ids.size(); }
  // Throws AttackError on inconsistent shapes or an empty ensemble.
  void validate() const;
};

PoisonSet craft_fc(const CraftingContext& ctx, const FcConfig& cfg);
PoisonSet craft_cp(const CraftingContext& ctx, const CpConfig& cfg);
PoisonSet craft_clbd(const CraftingContext& ctx, const ClbdConfig& cfg);
PoisonSet craft_htbd(const CraftingContext& ctx, const HtbdConfig& cfg);
PoisonSet craft_noop(const CraftingContext& ctx);

// The trigger a backdoor attack uses in `ctx`.
PatchSpec resolve_patch(const CraftingContext& ctx, std::size_t default_size);

// CP objective 0.5 * ||f(x_t) - sum_j c_j f(x_j)||^2 / ||f(x_t)||^2 for one
// extractor; exposed for tests.
double cp_residual(const Tensor<float>& target_features, const Tensor<float>& poison_features,
                   const Eigen::VectorXd& c);

// ---------------------------------------------------------------------------
// Registry

using Crafter = std::function<PoisonSet(const CraftingContext&, const nlohmann::json& config)>;

struct AttackInfo {
  std::string name;
  Crafter crafter;
  bool backdoor = false;
};

// Throws ConfigError when `name` is taken. fc, cp, clbd, htbd and noop are
// registered on first use.
void register_attack(const std::string& name, Crafter crafter, bool backdoor = false);
AttackInfo find_attack(const std::string& name);
std::vector<std::string> attack_names();
bool is_backdoor_attack(const std::string& name);

}  // namespace pb
