#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "esknet/tensor.hpp"

namespace esknet {

struct GradCheckOptions {
  double step = 1e-4;
  // Added to the first analytic gradient entry; lets callers prove the check can fail.
  double corrupt_analytic = 0.0;
  // Lower bound on the normaliser, so a gradient that is identically zero
  // (a bias feeding batch normalisation) is judged by absolute error.
  double scale_floor = 1e-5;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
};

/// Compares autodiff gradients of a scalar function against central finite
/// differences. `loss_fn` must rebuild the graph from the current values of
/// `inputs` on every call. The error for each input is the max-norm relative
/// error max|a - n| / max(max|a|, max|n|, scale_floor); the result is the worst over inputs.
inline GradCheckResult check_gradients(const std::function<Tensor<double>()>& loss_fn,
                                       std::vector<Tensor<double>> inputs, const GradCheckOptions& opts = {}) {
  for (auto& in : inputs) in.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<double>> analytic;
  for (auto& in : inputs) {
    if (in.has_grad())
      analytic.emplace_back(in.grad().begin(), in.grad().end());
    else
      analytic.emplace_back(in.numel(), 0.0);
    in.zero_grad();
  }
  if (!analytic.empty() && !analytic[0].empty()) analytic[0][0] += opts.corrupt_analytic;

  GradCheckResult result;
  for (std::size_t t = 0; t < inputs.size(); ++t) {
    auto values = inputs[t].mutable_data();
    double max_diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + opts.step;
      const double up = loss_fn().item();
      values[i] = saved - opts.step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * opts.step);
      max_diff = std::max(max_diff, std::abs(numeric - analytic[t][i]));
      scale = std::max({scale, std::abs(numeric), std::abs(analytic[t][i])});
    }
    const double rel = max_diff / std::max(scale, opts.scale_floor);
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_input = t;
    }
  }
  return result;
}

}  // namespace esknet
