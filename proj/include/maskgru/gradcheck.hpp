// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "maskgru/autograd.hpp"

namespace maskgru {

struct NamedTensorRef {
  std::string name;
  Tensor* tensor;
};

struct ParamCheck {
  std::string name;
  std::size_t entries = 0;
  std::size_t excluded_kinks = 0;
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  bool passed = true;
};

struct GradCheckReport {
  std::vector<ParamCheck> params;
  double tol = 0.0;

  bool passed() const;
  double max_rel_error() const;
};

/// Builds the scalar loss inside the given graph. It must bind the checked
/// tensors through Graph::parameter so the analytic gradient reaches them.
using LossBuilder = std::function<Var(Graph&)>;

/**
 * Compares analytic gradients with central differences
 * (f(θ+eps) - f(θ-eps)) / (2 eps), entry by entry.
 *
 * Relative error is |a - n| / max(|a|, |n|, 1e-8). An entry whose one-sided
 * differences disagree in sign or by more than half their magnitude sits on
 * a kink; it is counted in `excluded_kinks` and not scored.
 *
 * Throws ParameterError when eps is outside [1e-6, 1e-3].
 */
GradCheckReport grad_check(const LossBuilder& loss, const std::vector<NamedTensorRef>& params,
                           double eps, double tol);

}  // namespace maskgru
