#pragma once

#include <cmath>

#include "sgpa/parameters.hpp"

namespace sgpa {

struct AdamState {
  std::vector<Matrix> first;
  std::vector<Matrix> second;
  long step = 0;
};

constexpr double kAdamBeta1 = 0.9;
constexpr double kAdamBeta2 = 0.999;
constexpr double kAdamEps = 1e-8;

/// One bias-corrected Adam descent step on `params`.
inline void adam_step(ParameterSet &params, const GradientMap &grads,
                      AdamState &state, double lr) {
  if (lr < 0.0) {
    throw ContractError("adam_step: negative learning rate");
  }
  if (grads.size() != params.size()) {
    throw ShapeError("adam_step: gradient count does not match parameters");
  }
  if (state.first.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first.push_back(Matrix::Zero(params[i].rows(), params[i].cols()));
      state.second.push_back(Matrix::Zero(params[i].rows(), params[i].cols()));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    require_same_shape(params[i], grads[i], "adam_step");
    state.first[i] = kAdamBeta1 * state.first[i] + (1.0 - kAdamBeta1) * grads[i];
    state.second[i] = kAdamBeta2 * state.second[i] +
                      (1.0 - kAdamBeta2) * grads[i].cwiseAbs2();
    const auto m_hat = state.first[i].array() / c1;
    const auto v_hat = state.second[i].array() / c2;
    params[i].array() -= lr * m_hat / (v_hat.sqrt() + kAdamEps);
  }
}

inline double global_norm(const GradientMap &grads) {
  double sq = 0.0;
  for (const auto &g : grads) {
    sq += g.squaredNorm();
  }
  return std::sqrt(sq);
}

/// Rescales all gradients so their joint norm is at most `max_norm`.
/// Returns the norm before clipping.
inline double clip_global_norm(GradientMap &grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double s = max_norm / norm;
    for (auto &g : grads) {
      g *= s;
    }
  }
  return norm;
}

} // namespace sgpa
