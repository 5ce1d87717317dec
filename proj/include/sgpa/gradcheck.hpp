#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>

#include "sgpa/autodiff.hpp"
#include "sgpa/parameters.hpp"

namespace sgpa {

/// The loss changed between two evaluations with the same seed.
class DeterminismError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Builds a 1x1 loss on `tape` from parameter leaves aligned with a
/// ParameterSet. Randomness must come from tape.rng().
using LossBuilder =
    std::function<Var(Tape &tape, const std::vector<Var> &params)>;

struct GradCheckResult {
  std::vector<std::string> names;
  /// Per parameter: max over coordinates of
  /// |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
  std::vector<double> max_rel_error;
  std::vector<double> max_abs_grad;
  double overall = 0.0;
};

inline std::vector<Var> leaves_for(Tape &tape, const ParameterSet &params) {
  std::vector<Var> leaves;
  leaves.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    leaves.push_back(tape.parameter(params[i]));
  }
  return leaves;
}

inline double evaluate_loss(const LossBuilder &build, const ParameterSet &params,
                            std::uint64_t seed) {
  Tape tape(seed);
  auto leaves = leaves_for(tape, params);
  return build(tape, leaves).scalar();
}

/// Reverse-mode gradient of the loss at `params`.
inline GradientMap loss_gradient(const LossBuilder &build,
                                 const ParameterSet &params,
                                 std::uint64_t seed, double *loss = nullptr) {
  Tape tape(seed);
  auto leaves = leaves_for(tape, params);
  Var l = build(tape, leaves);
  tape.backward(l);
  if (loss != nullptr) {
    *loss = l.scalar();
  }
  GradientMap grads;
  grads.reserve(leaves.size());
  for (const Var &v : leaves) {
    grads.push_back(tape.grad(v));
  }
  return grads;
}

/// Compares reverse-mode adjoints with central differences
/// (f(x+h) - f(x-h)) / 2h on every coordinate of every parameter.
inline GradCheckResult finite_difference_check(const LossBuilder &build,
                                               const ParameterSet &params,
                                               double step,
                                               std::uint64_t seed = 0) {
  if (!(step > 0.0)) {
    throw ContractError("finite_difference_check: step must be positive");
  }
  double base = 0.0;
  const GradientMap analytic = loss_gradient(build, params, seed, &base);
  const double again = evaluate_loss(build, params, seed);
  if (!(again == base)) {
    throw DeterminismError("loss is not reproducible under a fixed seed");
  }

  GradCheckResult result;
  ParameterSet probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    double worst = 0.0;
    for (Eigen::Index k = 0; k < params[p].size(); ++k) {
      const double orig = params[p](k);
      probe[p](k) = orig + step;
      const double up = evaluate_loss(build, probe, seed);
      probe[p](k) = orig - step;
      const double down = evaluate_loss(build, probe, seed);
      probe[p](k) = orig;
      const double fd = (up - down) / (2.0 * step);
      const double ad = analytic[p](k);
      const double rel =
          std::abs(ad - fd) / std::max(1e-8, std::abs(ad) + std::abs(fd));
      worst = std::max(worst, rel);
    }
    result.names.push_back(params.name(p));
    result.max_rel_error.push_back(worst);
    result.max_abs_grad.push_back(analytic[p].size() ? analytic[p].cwiseAbs().maxCoeff()
                                                     : 0.0);
    result.overall = std::max(result.overall, worst);
  }
  return result;
}

} // namespace sgpa
