#pragma once

#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "preftok/log.hpp"
#include "preftok/matrix.hpp"

namespace preftok {

struct AdamState {
  std::vector<double> first_moment;
  std::vector<double> second_moment;
  std::size_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;

  explicit AdamState(std::size_t n = 0) : first_moment(n, 0.0), second_moment(n, 0.0) {}
};

// Bias-corrected Adam. A non-finite gradient aborts the whole step (nothing
// is modified) and returns false.
template <typename Real>
bool adam_step(std::span<Real> params, std::span<const double> grads,
               AdamState& state, double lr) {
  if (params.size() != grads.size()) {
    throw Error("adam_step: " + std::to_string(params.size()) + " params vs " +
                std::to_string(grads.size()) + " gradients");
  }
  if (state.first_moment.size() != params.size()) {
    if (state.step != 0 || !state.first_moment.empty()) {
      throw Error("adam_step: optimizer state has the wrong size");
    }
    state.first_moment.assign(params.size(), 0.0);
    state.second_moment.assign(params.size(), 0.0);
  }
  if (!all_finite(grads)) {
    log_message(LogLevel::kError, "adam_step: non-finite gradient, step skipped");
    return false;
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    const double g = grads[k];
    double& m = state.first_moment[k];
    double& v = state.second_moment[k];
    m = state.beta1 * m + (1.0 - state.beta1) * g;
    v = state.beta2 * v + (1.0 - state.beta2) * g * g;
    const double m_hat = m / c1;
    const double v_hat = v / c2;
    params[k] = static_cast<Real>(static_cast<double>(params[k]) -
                                  lr * m_hat / (std::sqrt(v_hat) + state.epsilon));
  }
  return true;
}

template <typename Real>
bool adam_step(Matrix<Real>& params, const Matrix<double>& grads, AdamState& state,
               double lr) {
  return adam_step(params.values(), grads.values(), state, lr);
}

}  // namespace preftok
