// SPDX-License-Identifier: Apache-2.0
#include "maskgru/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace maskgru {

bool GradCheckReport::passed() const {
  return std::all_of(params.begin(), params.end(), [](const ParamCheck& p) { return p.passed; });
}

double GradCheckReport::max_rel_error() const {
  double worst = 0.0;
  for (const auto& p : params) worst = std::max(worst, p.max_rel_error);
  return worst;
}

namespace {

double evaluate(const LossBuilder& loss) {
  Graph graph(false);
  return loss(graph).value().item();
}

bool is_kink(double f_minus, double f0, double f_plus, double eps) {
  const double fwd = (f_plus - f0) / eps;
  const double bwd = (f0 - f_minus) / eps;
  const double gap = std::fabs(fwd - bwd);
  return gap > 0.5 * std::max(std::fabs(fwd), std::fabs(bwd)) && gap > 1e-3;
}

}  // namespace

GradCheckReport grad_check(const LossBuilder& loss, const std::vector<NamedTensorRef>& params,
                           double eps, double tol) {
  if (!(eps >= 1e-6 && eps <= 1e-3)) {
    throw ParameterError("grad_check: eps must lie in [1e-6, 1e-3], got " + std::to_string(eps));
  }

  std::vector<std::vector<double>> analytic;
  {
    for (const auto& p : params) p.tensor->zero_grad();
    Graph graph;
    Var out = loss(graph);
    graph.backward(out);
    for (const auto& p : params) {
      auto g = p.tensor->grad();
      analytic.emplace_back(g.begin(), g.end());
    }
  }
  const double f0 = evaluate(loss);

  GradCheckReport report;
  report.tol = tol;
  for (std::size_t k = 0; k < params.size(); ++k) {
    ParamCheck check;
    check.name = params[k].name;
    auto data = params[k].tensor->data();
    check.entries = data.size();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + eps;
      const double f_plus = evaluate(loss);
      data[i] = saved - eps;
      const double f_minus = evaluate(loss);
      data[i] = saved;

      if (is_kink(f_minus, f0, f_plus, eps)) {
        ++check.excluded_kinks;
        continue;
      }
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[k][i];
      const double rel = std::fabs(a - numeric) / std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      if (rel > check.max_rel_error) {
        check.max_rel_error = rel;
        check.worst_index = i;
        check.worst_analytic = a;
        check.worst_numeric = numeric;
      }
    }
    check.passed = check.max_rel_error < tol;
    report.params.push_back(check);
  }
  return report;
}

}  // namespace maskgru
