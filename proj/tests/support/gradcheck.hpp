#pragma once

// Central finite-difference oracle for gradient tests. It only ever reads
// scalar loss values, never the autodiff machinery it is checking.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "cxrgen/tensor.hpp"

namespace cxrgen::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with the denominator floored so exact zeros compare sanely.
inline double rel_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-5});
  return std::abs(analytic - numeric) / denom;
}

// `loss_fn` rebuilds the forward pass from the current leaf values.
inline GradCheckResult check_gradients(const std::function<Tensor()>& loss_fn, std::vector<Tensor> leaves,
                                       double step = 1e-5) {
  for (auto& leaf : leaves) leaf.zero_grad();
  Tensor loss = loss_fn();
  backward(loss);
  GradCheckResult result;
  for (auto& leaf : leaves) {
    std::vector<double> analytic(leaf.size(), 0.0);
    if (leaf.has_grad()) analytic.assign(leaf.grad().begin(), leaf.grad().end());
    auto values = leaf.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      values[i] = saved + step;
      const double up = loss_fn().item();
      values[i] = saved - step;
      const double down = loss_fn().item();
      values[i] = saved;
      const double numeric = (up - down) / (2.0 * step);
      result.max_rel_error = std::max(result.max_rel_error, rel_error(analytic[i], numeric));
      ++result.checked;
    }
  }
  return result;
}

}  // namespace cxrgen::testing
