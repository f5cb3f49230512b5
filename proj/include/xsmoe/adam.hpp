#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "xsmoe/tensor.hpp"

namespace xsmoe {

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::uint64_t step_count = 0;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of `param` from its accumulated grad.
/// Frozen tensors (requires_grad == false) are left untouched. Moments are
/// kept in double so the 32-bit parameters see a single rounding per step.
template <typename T>
void adam_step(Tensor<T>& param, AdamState& state, double lr, const AdamOptions& opt = {}) {
  if (!(lr > 0.0)) throw ContractError("adam_step: learning rate must be positive");
  if (!param.requires_grad()) return;
  if (state.first_moment.empty()) {
    state.first_moment.assign(param.size(), 0.0);
    state.second_moment.assign(param.size(), 0.0);
  }
  if (state.first_moment.size() != param.size())
    throw ShapeError("adam_step: moment buffers do not match parameter " + shape_str(param.shape()));
  auto grad = param.grad();
  const bool has_grad = !grad.empty();
  if (has_grad) {
    for (T g : grad)
      if (!std::isfinite(static_cast<double>(g)))
        throw NumericalError("adam_step: non-finite gradient in parameter " + shape_str(param.shape()));
  }
  ++state.step_count;
  const double t = static_cast<double>(state.step_count);
  const double c1 = 1.0 - std::pow(opt.beta1, t);
  const double c2 = 1.0 - std::pow(opt.beta2, t);
  auto w = param.data();
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double g = has_grad ? static_cast<double>(grad[i]) : 0.0;
    double& m = state.first_moment[i];
    double& v = state.second_moment[i];
    m = opt.beta1 * m + (1.0 - opt.beta1) * g;
    v = opt.beta2 * v + (1.0 - opt.beta2) * g * g;
    const double mhat = m / c1;
    const double vhat = v / c2;
    w[i] = static_cast<T>(static_cast<double>(w[i]) - lr * mhat / (std::sqrt(vhat) + opt.epsilon));
  }
}

/// Adam over a fixed parameter list. Rebuild it whenever the trainable set
/// changes (expansion, pruning, window start).
template <typename T>
class Adam {
 public:
  explicit Adam(std::vector<Tensor<T>> params, AdamOptions opt = {})
      : params_(std::move(params)), states_(params_.size()), opt_(opt) {}

  void step(double lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) adam_step(params_[i], states_[i], lr, opt_);
  }
  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }
  const std::vector<AdamState>& states() const { return states_; }
  std::size_t size() const { return params_.size(); }

 private:
  std::vector<Tensor<T>> params_;
  std::vector<AdamState> states_;
  AdamOptions opt_;
};

}  // namespace xsmoe
