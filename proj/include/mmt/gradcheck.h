#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mmt/tensor.h"

namespace mmt {

struct GradCheckOptions {
  int seeds = 10;
  double step = 1e-5;
  double tolerance = 1e-4;
  bool include_ops = true;
  bool include_model = true;
};

struct GradCheckResult {
  std::string name;
  std::uint64_t seed = 0;
  double rel_error = 0.0;
  bool passed = false;
};

// Gradient norms below this are treated as zero when forming relative
// errors; attention key biases, for example, have an exactly zero gradient
// and finite differences return only round-off there.
inline constexpr double kGradNormFloor = 1e-6;

// Largest per-input relative error
// ||g_tape - g_fd|| / max(||g_tape||, ||g_fd||, kGradNormFloor)
// between the taped gradient and central finite differences.
double finite_difference_error(const std::function<Tensor<double>()>& loss_fn,
                               std::vector<Tensor<double>> inputs, double step = 1e-5);

// Every differentiable operation, then the full model in each fusion mode,
// once per seed.
std::vector<GradCheckResult> run_gradient_suite(const GradCheckOptions& options = {});

}  // namespace mmt
