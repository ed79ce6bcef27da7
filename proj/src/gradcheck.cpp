#include "poisonbench/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "poisonbench/model.hpp"
#include "poisonbench/ops.hpp"
#include "poisonbench/rng.hpp"

namespace pb {

namespace {

Tensor<double> random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data()) v = rng.normal(0.0, scale);
  return t;
}

double weighted_sum(const Tensor<double>& out, const Tensor<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * w[i];
  return s;
}

}  // namespace

GradcheckResult gradcheck(const std::string& name, std::vector<Tensor<double>> inputs,
                          const GradFn& fn, const GradcheckOptions& options) {
  Rng rng(options.seed);
  Tensor<double> probe;
  {
    NoGradScope<double> no_grad;
    probe = fn(inputs);
  }
  const Tensor<double> w = random_tensor(probe.shape(), rng);

  std::vector<std::vector<double>> analytic;
  {
    for (auto& t : inputs) {
      t.set_requires_grad(true);
      t.clear_grad();
    }
    Tape<double> tape;
    TapeScope<double> scope(tape);
    Tensor<double> loss = sum(mul(fn(inputs), w));
    tape.backward(loss);
    for (auto& t : inputs) {
      if (t.has_grad()) {
        analytic.emplace_back(t.grad().begin(), t.grad().end());
      } else {
        analytic.emplace_back(t.numel(), 0.0);
      }
      t.set_requires_grad(false);
      t.clear_grad();
    }
  }

  GradcheckResult result{name, 0.0, 0};
  NoGradScope<double> no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor<double>& t = inputs[k];
    std::vector<std::size_t> coords;
    if (options.max_coords == 0 || t.numel() <= options.max_coords) {
      coords.resize(t.numel());
      for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
    } else {
      coords = rng.sample_without_replacement(t.numel(), options.max_coords);
    }
    for (std::size_t i : coords) {
      const double v = t[i];
      t[i] = v + options.h;
      const double up = weighted_sum(fn(inputs), w);
      t[i] = v - options.h;
      const double down = weighted_sum(fn(inputs), w);
      t[i] = v;
      const double numeric = (up - down) / (2.0 * options.h);
      const double a = analytic[k][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      result.max_rel_error = std::max(result.max_rel_error, std::abs(a - numeric) / denom);
      ++result.coordinates;
    }
  }
  return result;
}

namespace {

GradcheckResult model_check(const std::string& name, const ArchitectureSpec& spec, bool training,
                            std::size_t max_coords, std::uint64_t seed) {
  Rng rng(mix64(seed, 99));
  auto model = std::make_shared<Model<double>>(spec, seed);
  ChannelStats stats;
  for (std::size_t c = 0; c < spec.input_channels; ++c) {
    stats.mean.push_back(static_cast<float>(0.4 + 0.05 * static_cast<double>(c)));
    stats.stddev.push_back(static_cast<float>(0.25 + 0.02 * static_cast<double>(c)));
  }
  model->set_normalization(stats);
  Tensor<double> x({2, spec.input_channels, spec.input_size, spec.input_size});
  for (auto& v : x.data()) v = rng.uniform();
  std::vector<Tensor<double>> inputs = {x};
  for (auto& p : model->params())
    if (p.role != ParamRole::buffer) inputs.push_back(p.value);
  GradcheckOptions opt;
  opt.seed = seed;
  opt.max_coords = max_coords;
  // Inputs share storage with the model parameters, so perturbing them
  // perturbs the model.
  return gradcheck(
      name, inputs,
      [model, training](const std::vector<Tensor<double>>& in) {
        if (!training) return model->logits(in[0]);
        std::vector<double> mean(model->normalization().mean.begin(), model->normalization().mean.end());
        std::vector<double> sd(model->normalization().stddev.begin(), model->normalization().stddev.end());
        return model->logits_normalized(normalize_channels<double>(in[0], mean, sd), true);
      },
      opt);
}

}  // namespace

std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed) {
  Rng rng(seed);
  auto r = [&rng](Shape s) { return random_tensor(std::move(s), rng); };
  GradcheckOptions opt;
  opt.seed = seed;
  using In = const std::vector<Tensor<double>>&;
  std::vector<GradcheckResult> out;

  out.push_back(gradcheck("add", {r({3, 4}), r({3, 4})}, [](In v) { return add(v[0], v[1]); }, opt));
  out.push_back(gradcheck("add_broadcast", {r({2, 3, 4}), r({3, 4})}, [](In v) { return add(v[0], v[1]); }, opt));
  out.push_back(gradcheck("sub", {r({2, 3, 4}), r({1, 3, 4})}, [](In v) { return sub(v[0], v[1]); }, opt));
  out.push_back(gradcheck("mul", {r({3, 4}), r({3, 4})}, [](In v) { return mul(v[0], v[1]); }, opt));
  out.push_back(gradcheck("mul_broadcast", {r({2, 5}), r({5})}, [](In v) { return mul(v[0], v[1]); }, opt));
  out.push_back(gradcheck("scale", {r({4, 3})}, [](In v) { return scale(v[0], 1.7); }, opt));
  out.push_back(gradcheck("matmul", {r({3, 4}), r({4, 2})}, [](In v) { return matmul(v[0], v[1]); }, opt));
  out.push_back(gradcheck("transpose", {r({3, 5})}, [](In v) { return transpose(v[0]); }, opt));
  out.push_back(gradcheck("linear", {r({4, 6}), r({3, 6}), r({3})},
                          [](In v) { return linear(v[0], v[1], v[2]); }, opt));
  out.push_back(gradcheck("reshape", {r({2, 6})}, [](In v) { return reshape(v[0], {3, 4}); }, opt));
  out.push_back(gradcheck("flatten", {r({2, 3, 2, 2})}, [](In v) { return flatten(v[0]); }, opt));
  out.push_back(gradcheck("concat", {r({2, 3}), r({1, 3})},
                          [](In v) { return concat(std::vector<Tensor<double>>{v[0], v[1]}); }, opt));
  out.push_back(gradcheck("sum", {r({3, 4})}, [](In v) { return sum(v[0]); }, opt));
  out.push_back(gradcheck("mean", {r({3, 4})}, [](In v) { return mean(v[0]); }, opt));
  out.push_back(gradcheck("squared_norm", {r({3, 4})}, [](In v) { return squared_norm(v[0]); }, opt));
  out.push_back(gradcheck("conv2d", {r({2, 2, 5, 5}), r({3, 2, 3, 3})},
                          [](In v) { return conv2d(v[0], v[1], 1, 1); }, opt));
  out.push_back(gradcheck("conv2d_strided", {r({1, 2, 4, 4}), r({2, 2, 2, 2})},
                          [](In v) { return conv2d(v[0], v[1], 2, 0); }, opt));
  out.push_back(gradcheck("add_channel_bias", {r({2, 3, 2, 2}), r({3})},
                          [](In v) { return add_channel_bias(v[0], v[1]); }, opt));
  out.push_back(gradcheck("relu", {r({4, 5})}, [](In v) { return relu(v[0]); }, opt));
  out.push_back(gradcheck("max_pool2d", {r({2, 2, 4, 4})}, [](In v) { return max_pool2d(v[0], 2, 2); }, opt));
  out.push_back(gradcheck("max_pool2d_overlap", {r({1, 2, 5, 5})},
                          [](In v) { return max_pool2d(v[0], 3, 2); }, opt));
  out.push_back(gradcheck("global_avg_pool", {r({2, 3, 3, 3})}, [](In v) { return global_avg_pool(v[0]); }, opt));
  out.push_back(gradcheck("batch_norm_train", {r({3, 2, 3, 3}), r({2}), r({2})},
                          [](In v) {
                            auto rm = Tensor<double>::zeros({2});
                            auto rv = Tensor<double>::ones({2});
                            return batch_norm(v[0], v[1], v[2], rm, rv, BatchNormOptions{true, 0.1, 1e-5});
                          },
                          opt));
  out.push_back(gradcheck("batch_norm_eval", {r({2, 2, 3, 3}), r({2}), r({2})},
                          [](In v) {
                            auto rm = Tensor<double>({2}, std::vector<double>{0.2, -0.1});
                            auto rv = Tensor<double>({2}, std::vector<double>{1.5, 0.7});
                            return batch_norm(v[0], v[1], v[2], rm, rv, BatchNormOptions{false, 0.1, 1e-5});
                          },
                          opt));
  out.push_back(gradcheck("normalize_channels", {r({2, 3, 2, 2})},
                          [](In v) {
                            const std::vector<double> m = {0.1, 0.2, 0.3}, s = {0.5, 0.6, 0.7};
                            return normalize_channels<double>(v[0], m, s);
                          },
                          opt));
  out.push_back(gradcheck("softmax_cross_entropy", {r({4, 5})},
                          [](In v) {
                            const std::vector<int> labels = {0, 3, 1, 4};
                            return softmax_cross_entropy(v[0], labels);
                          },
                          opt));
  out.push_back(model_check("conv_small", conv_small(10, 16), false, 0, seed));
  out.push_back(model_check("conv_wide_train", conv_wide(10, 8), true, 64, seed));
  out.push_back(model_check("conv_strided", conv_strided(10, 16), false, 256, seed));
  return out;
}

}  // namespace pb
