#include "poisonbench/attacks.hpp"

#include <cmath>
#include <map>
#include <mutex>
#include <set>

#include "poisonbench/error.hpp"
#include "poisonbench/ops.hpp"
#include "poisonbench/optim.hpp"
#include "poisonbench/rng.hpp"

namespace pb {

// ---------------------------------------------------------------------------
// Config parsing

namespace {

void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed,
                    const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) throw ConfigError(where + ": unknown key '" + key + "'");
  }
}

// Numbers, or strings of the form "a/b" (e.g. "8/255").
double parse_ratio(const nlohmann::json& v, const std::string& key) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const auto s = v.get<std::string>();
    const auto slash = s.find('/');
    try {
      if (slash == std::string::npos) return std::stod(s);
      return std::stod(s.substr(0, slash)) / std::stod(s.substr(slash + 1));
    } catch (const std::exception&) {
    }
  }
  throw ConfigError("attack config: '" + key + "' must be a number or \"a/b\"");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (!j.contains(key)) return;
  try {
    if constexpr (std::is_same_v<T, double>) {
      out = parse_ratio(j.at(key), key);
    } else {
      out = j.at(key).get<T>();
    }
  } catch (const nlohmann::json::exception&) {
    throw ConfigError(std::string("attack config: bad value for '") + key + "'");
  }
}

void read_opt(const nlohmann::json& j, const char* key, std::optional<double>& out) {
  if (!j.contains(key)) return;
  if (j.at(key).is_null()) {
    out.reset();
  } else {
    out = parse_ratio(j.at(key), key);
  }
}

void check_epsilon(double eps, const char* attack) {
  if (!(eps >= 0.0)) throw ConfigError(std::string(attack) + ": epsilon must be >= 0");
}

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

}  // namespace

AttackConfig attack_config_from_json(const std::string& name, const nlohmann::json& raw) {
  const nlohmann::json j = raw.is_null() ? nlohmann::json::object() : raw;
  if (name == "fc") {
    reject_unknown(j, {"beta", "step_size", "max_iters", "watermark_opacity", "epsilon"}, "fc");
    FcConfig c;
    read_opt(j, "beta", c.beta);
    read(j, "step_size", c.step_size);
    read(j, "max_iters", c.max_iters);
    read(j, "watermark_opacity", c.watermark_opacity);
    read_opt(j, "epsilon", c.epsilon);
    if (c.step_size <= 0.0) throw ConfigError("fc: step_size must be positive");
    if (c.beta && *c.beta < 0.0) throw ConfigError("fc: beta must be >= 0");
    if (c.epsilon) check_epsilon(*c.epsilon, "fc");
    return c;
  }
  if (name == "cp") {
    reject_unknown(j, {"lr", "max_iters", "loss_tol", "epsilon", "inner_steps", "inner_tol"}, "cp");
    CpConfig c;
    read(j, "lr", c.lr);
    read(j, "max_iters", c.max_iters);
    read(j, "loss_tol", c.loss_tol);
    read(j, "epsilon", c.epsilon);
    read(j, "inner_steps", c.inner_steps);
    read(j, "inner_tol", c.inner_tol);
    check_epsilon(c.epsilon, "cp");
    return c;
  }
  if (name == "clbd") {
    reject_unknown(j, {"pgd_steps", "pgd_step", "epsilon", "patch_size"}, "clbd");
    ClbdConfig c;
    read(j, "pgd_steps", c.pgd_steps);
    read(j, "pgd_step", c.pgd_step);
    read(j, "epsilon", c.epsilon);
    read(j, "patch_size", c.patch_size);
    check_epsilon(c.epsilon, "clbd");
    if (!std::isfinite(c.epsilon)) throw ConfigError("clbd: epsilon must be finite");
    return c;
  }
  if (name == "htbd") {
    reject_unknown(j, {"lr0", "lr_decay", "decay_every", "max_iters", "epsilon", "patch_size",
                       "pairing_refresh", "with_replacement"},
                   "htbd");
    HtbdConfig c;
    read(j, "lr0", c.lr0);
    read(j, "lr_decay", c.lr_decay);
    read(j, "decay_every", c.decay_every);
    read(j, "max_iters", c.max_iters);
    read(j, "epsilon", c.epsilon);
    read(j, "patch_size", c.patch_size);
    read(j, "pairing_refresh", c.pairing_refresh);
    read(j, "with_replacement", c.with_replacement);
    check_epsilon(c.epsilon, "htbd");
    if (c.pairing_refresh == 0 || c.decay_every == 0) {
      throw ConfigError("htbd: pairing_refresh and decay_every must be positive");
    }
    return c;
  }
  if (name == "noop") {
    reject_unknown(j, {}, "noop");
    return NoopConfig{};
  }
  throw ConfigError("no typed configuration for attack '" + name + "'");
}

nlohmann::json attack_config_to_json(const AttackConfig& config) {
  return std::visit(
      [](const auto& c) -> nlohmann::json {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, FcConfig>) {
          return {{"beta", opt_json(c.beta)},
                  {"step_size", c.step_size},
                  {"max_iters", c.max_iters},
                  {"watermark_opacity", c.watermark_opacity},
                  {"epsilon", opt_json(c.epsilon)}};
        } else if constexpr (std::is_same_v<C, CpConfig>) {
          return {{"lr", c.lr},           {"max_iters", c.max_iters},     {"loss_tol", c.loss_tol},
                  {"epsilon", c.epsilon}, {"inner_steps", c.inner_steps}, {"inner_tol", c.inner_tol}};
        } else if constexpr (std::is_same_v<C, ClbdConfig>) {
          return {{"pgd_steps", c.pgd_steps},
                  {"pgd_step", c.pgd_step},
                  {"epsilon", c.epsilon},
                  {"patch_size", c.patch_size}};
        } else if constexpr (std::is_same_v<C, HtbdConfig>) {
          return {{"lr0", c.lr0},
                  {"lr_decay", c.lr_decay},
                  {"decay_every", c.decay_every},
                  {"max_iters", c.max_iters},
                  {"epsilon", c.epsilon},
                  {"patch_size", c.patch_size},
                  {"pairing_refresh", c.pairing_refresh},
                  {"with_replacement", c.with_replacement}};
        } else {
          return nlohmann::json::object();
        }
      },
      config);
}

std::string attack_name(const AttackConfig& config) {
  static const char* names[] = {"fc", "cp", "clbd", "htbd", "noop"};
  return names[config.index()];
}

std::optional<double> attack_epsilon(const AttackConfig& config) {
  return std::visit(
      [](const auto& c) -> std::optional<double> {
        using C = std::decay_t<decltype(c)>;
        if constexpr (std::is_same_v<C, FcConfig>) {
          return c.epsilon;
        } else if constexpr (std::is_same_v<C, NoopConfig>) {
          return std::nullopt;
        } else {
          return std::isfinite(c.epsilon) ? std::optional<double>(c.epsilon) : std::nullopt;
        }
      },
      config);
}

std::optional<std::size_t> attack_patch_size(const AttackConfig& config) {
  if (const auto* c = std::get_if<ClbdConfig>(&config)) return c->patch_size;
  if (const auto* c = std::get_if<HtbdConfig>(&config)) return c->patch_size;
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Context

CraftingModel CraftingModel::from(std::shared_ptr<const Model<float>> model) {
  CraftingModel m;
  m.param_hash = model->hash(false);
  m.features = [model](const Tensor<float>& x) { return model->features(x); };
  m.logits = [model](const Tensor<float>& x) { return model->logits(x); };
  return m;
}

CraftingModel CraftingModel::identity() {
  CraftingModel m;
  m.features = [](const Tensor<float>& x) { return flatten(x); };
  m.logits = [](const Tensor<float>&) -> Tensor<float> {
    throw AttackError("identity crafting model has no classifier head");
  };
  return m;
}

void CraftingContext::validate() const {
  if (ensemble.empty()) throw AttackError("crafting: empty model ensemble");
  if (target.rank() != 4 || target.dim(0) != 1) {
    throw AttackError("crafting: target must be [1,C,H,W], got " + shape_str(target.shape()));
  }
  if (bases.rank() != 4 || bases.dim(0) == 0 ||
      !std::equal(bases.shape().begin() + 1, bases.shape().end(), target.shape().begin() + 1)) {
    throw AttackError("crafting: bases " + shape_str(bases.shape()) + " do not match target " +
                      shape_str(target.shape()));
  }
  if (base_ids.size() != bases.dim(0)) {
    throw AttackError("crafting: " + std::to_string(base_ids.size()) + " base ids for " +
                      std::to_string(bases.dim(0)) + " base images");
  }
  if (base_class >= 0 && base_class == target_class) {
    throw AttackError("crafting: base class equals target class");
  }
}

PatchSpec resolve_patch(const CraftingContext& ctx, std::size_t default_size) {
  if (ctx.patch) return *ctx.patch;
  return checkerboard_patch(default_size, ctx.target.dim(1));
}

namespace {

PoisonSet start_set(const CraftingContext& ctx, const AttackConfig& cfg) {
  PoisonSet set;
  set.base_ids = ctx.base_ids;
  set.label = ctx.base_class;
  set.epsilon = attack_epsilon(cfg);
  set.attack = attack_name(cfg);
  set.config = attack_config_to_json(cfg);
  return set;
}

void check_finite(double v, const char* attack, std::size_t iter) {
  if (!std::isfinite(v)) {
    throw AttackError(std::string(attack) + ": objective became non-finite at iteration " +
                      std::to_string(iter));
  }
}

std::vector<Tensor<float>> ensemble_features(const std::vector<CraftingModel>& ensemble,
                                             const Tensor<float>& x) {
  NoGradScope<float> no_grad;
  std::vector<Tensor<float>> out;
  for (const auto& m : ensemble) out.push_back(m.features(x));
  return out;
}

// Mean over members of sum_j ||f_m(x_j) - goal_m[j or 0]||^2, recorded on the
// active tape.
Tensor<float> collision_loss(const std::vector<CraftingModel>& ensemble, const Tensor<float>& x,
                             const std::vector<Tensor<float>>& goals) {
  Tensor<float> loss;
  for (std::size_t m = 0; m < ensemble.size(); ++m) {
    Tensor<float> term = squared_norm(sub(ensemble[m].features(x), goals[m]));
    loss = m == 0 ? term : add(loss, term);
  }
  if (ensemble.size() > 1) loss = scale(loss, 1.0f / static_cast<float>(ensemble.size()));
  return loss;
}

// Loss value and gradient wrt x of collision_loss.
std::pair<double, Tensor<float>> collision_step(const std::vector<CraftingModel>& ensemble,
                                                const Tensor<float>& x,
                                                const std::vector<Tensor<float>>& goals) {
  Tape<float> tape;
  TapeScope<float> scope(tape);
  Tensor<float> var = x.clone();
  var.set_requires_grad();
  Tensor<float> loss = collision_loss(ensemble, var, goals);
  const double value = loss.item();
  tape.backward(loss);
  Tensor<float> g(x.shape());
  if (var.has_grad()) std::copy(var.grad().begin(), var.grad().end(), g.ptr());
  return {value, g};
}

double squared_distance(const Tensor<float>& a, const Tensor<float>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    s += d * d;
  }
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// FC

PoisonSet craft_fc(const CraftingContext& ctx, const FcConfig& cfg) {
  ctx.validate();
  const auto goals = ensemble_features(ctx.ensemble, ctx.target);
  const double feature_dim = static_cast<double>(goals[0].numel());
  const double input_dim = static_cast<double>(ctx.target.numel());
  const double beta = cfg.beta.value_or(0.25 * (feature_dim / input_dim) * (feature_dim / input_dim));
  FcConfig resolved = cfg;
  resolved.beta = beta;
  PoisonSet set = start_set(ctx, resolved);

  const double lambda = cfg.step_size;
  const bool constrained = cfg.epsilon.has_value();
  Tensor<float> x = blend_watermark(ctx.bases, ctx.target, cfg.watermark_opacity);
  if (constrained) x = project_linf(x, ctx.bases, *cfg.epsilon);

  auto objective = [&](double collision) {
    return constrained ? collision : collision + beta * squared_distance(x, ctx.bases);
  };
  const auto shrink = static_cast<float>(1.0 / (1.0 + lambda * beta));
  const auto pull = static_cast<float>(lambda * beta);
  for (std::size_t it = 0; it <= cfg.max_iters; ++it) {
    auto [loss, g] = collision_step(ctx.ensemble, x, goals);
    const double obj = objective(loss);
    check_finite(obj, "fc", it);
    set.objective_trace.push_back(obj);
    if (it == cfg.max_iters) break;
    // Forward (gradient) step on the collision term.
    Tensor<float> fwd(x.shape());
    const auto step = static_cast<float>(lambda);
    for (std::size_t i = 0; i < x.numel(); ++i) fwd[i] = x[i] - step * g[i];
    if (constrained) {
      x = project_linf(fwd, ctx.bases, *cfg.epsilon);
    } else {
      // Backward (proximal) step on beta * ||x - x_b||^2.
      for (std::size_t i = 0; i < x.numel(); ++i) fwd[i] = (fwd[i] + pull * ctx.bases[i]) * shrink;
      x = project_linf(fwd, ctx.bases, kUnboundedEpsilon);
    }
  }
  set.poisons = x;
  set.initial_objective = set.objective_trace.front();
  set.final_objective = set.objective_trace.back();
  return set;
}

// ---------------------------------------------------------------------------
// CP

double cp_residual(const Tensor<float>& target_features, const Tensor<float>& poison_features,
                   const Eigen::VectorXd& c) {
  const std::size_t d = target_features.numel();
  const std::size_t j = poison_features.dim(0);
  Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> f(
      poison_features.ptr(), static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(d));
  Eigen::Map<const Eigen::VectorXf> t(target_features.ptr(), static_cast<Eigen::Index>(d));
  const Eigen::VectorXd td = t.cast<double>();
  const Eigen::VectorXd r = td - f.cast<double>().transpose() * c;
  return 0.5 * r.squaredNorm() / td.squaredNorm();
}

namespace {

// Projected gradient on 0.5 ||t - F^T c||^2 / ||t||^2 over the simplex, with
// step 2 / (J * L) where L is a power-iteration estimate of the Lipschitz
// constant of the gradient.
Eigen::VectorXd solve_coefficients(const Eigen::MatrixXd& f, const Eigen::VectorXd& t,
                                   Eigen::VectorXd c, const CpConfig& cfg) {
  const double tn2 = t.squaredNorm();
  const Eigen::MatrixXd gram = f * f.transpose() / tn2;
  const Eigen::VectorXd lin = f * t / tn2;
  const auto j = static_cast<double>(c.size());
  Eigen::VectorXd v = Eigen::VectorXd::Ones(c.size());
  double lip = 0.0;
  for (int k = 0; k < 50; ++k) {
    const Eigen::VectorXd w = gram * v;
    const double n = w.norm();
    if (n == 0.0) break;
    lip = v.dot(w) / v.squaredNorm();
    v = w / n;
  }
  if (!(lip > 0.0)) return c;
  const double step = 2.0 / (j * lip);
  for (std::size_t s = 0; s < cfg.inner_steps; ++s) {
    const Eigen::VectorXd next = project_simplex(c - step * (gram * c - lin));
    const double delta = (next - c).lpNorm<Eigen::Infinity>();
    c = next;
    if (delta < cfg.inner_tol) break;
  }
  return c;
}

Eigen::MatrixXd to_matrix(const Tensor<float>& t) {
  const std::size_t rows = t.dim(0), cols = t.numel() / t.dim(0);
  Eigen::MatrixXd m(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) m(r, c) = t[r * cols + c];
  return m;
}

}  // namespace

PoisonSet craft_cp(const CraftingContext& ctx, const CpConfig& cfg) {
  ctx.validate();
  PoisonSet set = start_set(ctx, cfg);
  const std::size_t members = ctx.ensemble.size();
  const std::size_t j = ctx.budget();
  const auto goals = ensemble_features(ctx.ensemble, ctx.target);
  std::vector<Eigen::VectorXd> targets;
  for (const auto& g : goals) {
    Eigen::VectorXd t(g.numel());
    for (std::size_t i = 0; i < g.numel(); ++i) t[static_cast<Eigen::Index>(i)] = g[i];
    if (t.norm() < 1e-8) throw AttackError("cp: target feature norm below 1e-8");
    targets.push_back(std::move(t));
  }
  std::vector<Eigen::VectorXd> coeffs(members, Eigen::VectorXd::Constant(static_cast<Eigen::Index>(j), 1.0 / static_cast<double>(j)));

  Tensor<float> x = ctx.bases.clone();
  auto opt = OptimizerState<float>::adam(cfg.lr, 0.0);
  for (std::size_t it = 0;; ++it) {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    Tensor<float> var = x;
    var.set_requires_grad();
    Tensor<float> loss;
    for (std::size_t m = 0; m < members; ++m) {
      Tensor<float> feats = ctx.ensemble[m].features(var);
      coeffs[m] = solve_coefficients(to_matrix(feats), targets[m], coeffs[m], cfg);
      Tensor<float> c({1, j});
      for (std::size_t k = 0; k < j; ++k) c[k] = static_cast<float>(coeffs[m][static_cast<Eigen::Index>(k)]);
      Tensor<float> resid = sub(goals[m], matmul(c, feats));
      Tensor<float> term = scale(squared_norm(resid), static_cast<float>(0.5 / targets[m].squaredNorm()));
      loss = m == 0 ? term : add(loss, term);
    }
    if (members > 1) loss = scale(loss, 1.0f / static_cast<float>(members));
    const double value = loss.item();
    check_finite(value, "cp", it);
    set.objective_trace.push_back(value);
    if (value <= cfg.loss_tol || it == cfg.max_iters) break;
    tape.backward(loss);
    std::vector<Tensor<float>> params = {x};
    std::vector<std::span<const float>> grads = {var.grad()};
    optimizer_step(opt, params, grads);
    var.set_requires_grad(false);
    x = project_linf(x, ctx.bases, cfg.epsilon);
  }
  set.poisons = x;
  for (const auto& c : coeffs) set.coefficients.insert(set.coefficients.end(), c.data(), c.data() + c.size());
  set.initial_objective = set.objective_trace.front();
  set.final_objective = set.objective_trace.back();
  return set;
}

// ---------------------------------------------------------------------------
// CLBD

PoisonSet craft_clbd(const CraftingContext& ctx, const ClbdConfig& cfg) {
  ctx.validate();
  PoisonSet set = start_set(ctx, cfg);
  const PatchSpec patch = resolve_patch(ctx, cfg.patch_size);
  std::vector<LogitsFn> models;
  for (const auto& m : ctx.ensemble) models.push_back(m.logits);
  const std::vector<int> labels(ctx.budget(), ctx.base_class);
  auto mean_ce = [&](const Tensor<float>& x) {
    NoGradScope<float> no_grad;
    double s = 0.0;
    for (const auto& m : models) s += softmax_cross_entropy(m(x), labels).item();
    return s / static_cast<double>(models.size());
  };
  const Tensor<float> adv =
      pgd_maximize_loss(ctx.bases, labels, models, PgdOptions{cfg.pgd_steps, cfg.pgd_step, cfg.epsilon});
  // Ascent on the base-class loss, so larger is better here.
  set.initial_objective = mean_ce(ctx.bases);
  set.final_objective = mean_ce(adv);
  set.objective_trace = {set.initial_objective, set.final_objective};
  set.poisons = apply_patch(adv, patch);
  return set;
}

// ---------------------------------------------------------------------------
// HTBD

PoisonSet craft_htbd(const CraftingContext& ctx, const HtbdConfig& cfg) {
  ctx.validate();
  if (!ctx.target_pool || ctx.target_pool->numel() == 0) {
    throw AttackError("htbd: empty pool of target-class images");
  }
  PoisonSet set = start_set(ctx, cfg);
  const PatchSpec patch = resolve_patch(ctx, cfg.patch_size);
  const Tensor<float> patched = apply_patch(*ctx.target_pool, patch);
  const std::size_t pool = patched.dim(0);
  const std::size_t j = ctx.budget();
  const auto pool_features = ensemble_features(ctx.ensemble, patched);

  Rng rng(ctx.seed);
  std::vector<Tensor<float>> goals(ctx.ensemble.size());
  auto draw_partners = [&]() {
    std::vector<std::size_t> partners(j);
    if (cfg.with_replacement) {
      for (auto& p : partners) p = rng.uniform_index(pool);
    } else {
      // Without replacement while the pool lasts, then cycling.
      const auto perm = rng.permutation(pool);
      for (std::size_t k = 0; k < j; ++k) partners[k] = perm[k % pool];
    }
    for (std::size_t m = 0; m < goals.size(); ++m) {
      const std::size_t d = pool_features[m].dim(1);
      Tensor<float> g({j, d});
      for (std::size_t k = 0; k < j; ++k)
        std::copy(pool_features[m].ptr() + partners[k] * d, pool_features[m].ptr() + (partners[k] + 1) * d,
                  g.ptr() + k * d);
      goals[m] = g;
    }
  };

  Tensor<float> x = ctx.bases.clone();
  for (std::size_t it = 0; it <= cfg.max_iters; ++it) {
    if (it % cfg.pairing_refresh == 0 && it < cfg.max_iters) draw_partners();
    auto [loss, g] = collision_step(ctx.ensemble, x, goals);
    check_finite(loss, "htbd", it);
    set.objective_trace.push_back(loss);
    if (it == cfg.max_iters) break;
    const auto lr = static_cast<float>(
        cfg.lr0 * std::pow(cfg.lr_decay, static_cast<double>(it / cfg.decay_every)));
    Tensor<float> next(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) next[i] = x[i] - lr * g[i];
    x = project_linf(next, ctx.bases, cfg.epsilon);
  }
  set.poisons = x;
  set.initial_objective = set.objective_trace.front();
  set.final_objective = set.objective_trace.back();
  return set;
}

PoisonSet craft_noop(const CraftingContext& ctx) {
  ctx.validate();
  PoisonSet set = start_set(ctx, NoopConfig{});
  set.poisons = ctx.bases.clone();
  set.objective_trace = {0.0};
  return set;
}

// ---------------------------------------------------------------------------
// Registry

namespace {

template <typename C>
Crafter typed(const std::string& name, PoisonSet (*fn)(const CraftingContext&, const C&)) {
  return [name, fn](const CraftingContext& ctx, const nlohmann::json& j) {
    return fn(ctx, std::get<C>(attack_config_from_json(name, j)));
  };
}

struct Registry {
  std::mutex mutex;
  std::map<std::string, AttackInfo> attacks;

  Registry() {
    attacks["fc"] = {"fc", typed<FcConfig>("fc", craft_fc), false};
    attacks["cp"] = {"cp", typed<CpConfig>("cp", craft_cp), false};
    attacks["clbd"] = {"clbd", typed<ClbdConfig>("clbd", craft_clbd), true};
    attacks["htbd"] = {"htbd", typed<HtbdConfig>("htbd", craft_htbd), true};
    attacks["noop"] = {"noop",
                       [](const CraftingContext& ctx, const nlohmann::json& j) {
                         attack_config_from_json("noop", j);
                         return craft_noop(ctx);
                       },
                       false};
  }
};

Registry& registry() {
  static Registry r;
  return r;
}

}  // namespace

void register_attack(const std::string& name, Crafter crafter, bool backdoor) {
  if (name.empty()) throw ConfigError("register_attack: empty name");
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  if (r.attacks.count(name)) throw ConfigError("register_attack: '" + name + "' is already registered");
  r.attacks[name] = {name, std::move(crafter), backdoor};
}

AttackInfo find_attack(const std::string& name) {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  const auto it = r.attacks.find(name);
  if (it == r.attacks.end()) throw ConfigError("unknown attack '" + name + "'");
  return it->second;
}

std::vector<std::string> attack_names() {
  auto& r = registry();
  std::lock_guard lock(r.mutex);
  std::vector<std::string> out;
  for (const auto& [name, _] : r.attacks) out.push_back(name);
  return out;
}

bool is_backdoor_attack(const std::string& name) { return find_attack(name).backdoor; }

}  // namespace pb
