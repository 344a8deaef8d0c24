#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mode/autodiff.hpp"

namespace mode {

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;

  bool passed(double tolerance) const { return max_rel_error <= tolerance; }
};

// Builds the scalar loss on the given tape. Must be deterministic: any
// randomness has to be re-seeded on every call.
using LossFn = std::function<Var(Tape&)>;

// Compares reverse-mode gradients of every trainable scalar against central
// differences (f(x+eps) - f(x-eps)) / 2eps. Relative error is
// |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
// near-zero gradients from turning round-off into large ratios.
GradCheckReport grad_check(const LossFn& loss_fn, const std::vector<Parameter*>& params, double eps = 1e-5,
                           double floor = 1e-6);

}  // namespace mode
