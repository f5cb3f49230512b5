#pragma once

// Central finite differences in 64-bit, compared against the tape's analytic
// gradients. Shared by unit tests and the acceptance binary.

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "xsmoe/tensor.hpp"

namespace xsmoe::testing {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

// Relative error with a floor on the denominator so entries whose true
// gradient is ~0 are judged on absolute error instead.
inline double rel_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline GradCheckResult grad_check(const std::function<Tensor<double>()>& loss_fn,
                                  std::vector<Tensor<double>> params, double h = 1e-3) {
  for (auto& p : params) p.zero_grad();
  Tensor<double> loss = loss_fn();
  backward(loss);
  std::vector<std::vector<double>> analytic;
  for (auto& p : params) {
    if (p.has_grad())
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    else
      analytic.emplace_back(p.size(), 0.0);
  }
  GradCheckResult res;
  NoGradGuard guard;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double orig = w[i];
      w[i] = orig + h;
      const double up = loss_fn().item();
      w[i] = orig - h;
      const double down = loss_fn().item();
      w[i] = orig;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_error = std::max(res.max_rel_error, rel_error(analytic[k][i], numeric));
      ++res.checked;
    }
  }
  return res;
}

}  // namespace xsmoe::testing
