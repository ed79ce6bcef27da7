#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "poisonbench/tensor.hpp"

namespace pb {

struct GradcheckResult {
  std::string name;
  double max_rel_error = 0.0;
  std::size_t coordinates = 0;
};

struct GradcheckOptions {
  double h = 1e-6;
  // Denominator floor of the relative error |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  // Coordinates checked per input tensor; 0 checks every one.
  std::size_t max_coords = 0;
  std::uint64_t seed = 1;
};

using GradFn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

// Compares reverse-mode gradients of sum(fn(inputs) * w), for a fixed random
// w, against central differences in every input coordinate.
GradcheckResult gradcheck(const std::string& name, std::vector<Tensor<double>> inputs,
                          const GradFn& fn, const GradcheckOptions& options = {});

// Every differentiable op plus end-to-end ConvSmall and ConvWide models.
std::vector<GradcheckResult> gradcheck_suite(std::uint64_t seed = 1);

}  // namespace pb
