#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "poisonbench/tensor.hpp"

namespace pb {

enum class OptimizerKind { sgd_momentum, adam };

inline std::string to_string(OptimizerKind k) {
  return k == OptimizerKind::adam ? "adam" : "sgd";
}

// Hyperparameters plus per-parameter slot buffers. For SGD slot_a holds the
// velocity; for ADAM slot_a/slot_b hold the first and second moments.
template <typename T>
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  double learning_rate = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::uint64_t step = 0;
  std::vector<std::vector<T>> slot_a;
  std::vector<std::vector<T>> slot_b;

  static OptimizerState sgd(double lr, double momentum = 0.9, double weight_decay = 2e-4) {
    OptimizerState s;
    s.kind = OptimizerKind::sgd_momentum;
    s.learning_rate = lr;
    s.momentum = momentum;
    s.weight_decay = weight_decay;
    return s;
  }

  static OptimizerState adam(double lr, double weight_decay = 0.0) {
    OptimizerState s;
    s.kind = OptimizerKind::adam;
    s.learning_rate = lr;
    s.weight_decay = weight_decay;
    return s;
  }
};

// One update of every parameter from its gradient.
//   SGD:  v <- m v + g + wd p;  p <- p - lr v
//   ADAM: g' = g + wd p; bias-corrected moments; p <- p - lr mhat / (sqrt(vhat) + eps)
template <typename T>
void optimizer_step(OptimizerState<T>& state, std::vector<Tensor<T>>& params,
                    const std::vector<std::span<const T>>& grads) {
  if (grads.size() != params.size()) {
    throw ShapeError("optimizer_step: " + std::to_string(params.size()) + " parameters but " +
                     std::to_string(grads.size()) + " gradients");
  }
  if (state.slot_a.empty()) {
    for (const auto& p : params) {
      state.slot_a.emplace_back(p.numel(), T(0));
      if (state.kind == OptimizerKind::adam) state.slot_b.emplace_back(p.numel(), T(0));
    }
  }
  if (state.slot_a.size() != params.size()) {
    throw ShapeError("optimizer_step: optimizer state tracks " +
                     std::to_string(state.slot_a.size()) + " parameters, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (grads[k].size() != params[k].numel() || state.slot_a[k].size() != params[k].numel()) {
      throw ShapeError("optimizer_step: gradient/slot size mismatch for parameter " +
                       std::to_string(k) + " of shape " + shape_str(params[k].shape()));
    }
  }
  state.step += 1;
  const T lr = static_cast<T>(state.learning_rate);
  const T wd = static_cast<T>(state.weight_decay);
  if (state.kind == OptimizerKind::sgd_momentum) {
    const T m = static_cast<T>(state.momentum);
    for (std::size_t k = 0; k < params.size(); ++k) {
      auto p = params[k].data();
      auto& v = state.slot_a[k];
      const auto& g = grads[k];
      for (std::size_t i = 0; i < p.size(); ++i) {
        v[i] = m * v[i] + g[i] + wd * p[i];
        p[i] -= lr * v[i];
      }
    }
    return;
  }
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  const T eps = static_cast<T>(state.epsilon);
  const double t = static_cast<double>(state.step);
  const T c1 = static_cast<T>(1.0 - std::pow(state.beta1, t));
  const T c2 = static_cast<T>(1.0 - std::pow(state.beta2, t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto p = params[k].data();
    auto& m1 = state.slot_a[k];
    auto& m2 = state.slot_b[k];
    const auto& g = grads[k];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T gi = g[i] + wd * p[i];
      m1[i] = b1 * m1[i] + (T(1) - b1) * gi;
      m2[i] = b2 * m2[i] + (T(1) - b2) * gi * gi;
      const T mhat = m1[i] / c1;
      const T vhat = m2[i] / c2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

// Reads gradients from the parameters themselves.
template <typename T>
void optimizer_step(OptimizerState<T>& state, std::vector<Tensor<T>>& params) {
  std::vector<std::span<const T>> grads;
  grads.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) {
      throw Error("optimizer_step: parameter " + std::to_string(k) + " of shape " +
                  shape_str(params[k].shape()) + " has no gradient");
    }
    grads.push_back(params[k].grad());
  }
  optimizer_step(state, params, grads);
}

}  // namespace pb
