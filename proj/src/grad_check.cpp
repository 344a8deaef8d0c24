#include "mode/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "mode/error.hpp"

namespace mode {
namespace {

double evaluate(const LossFn& loss_fn) {
  Tape tape(false);
  const double v = loss_fn(tape).value()[0];
  if (!std::isfinite(v)) throw NumericError("grad_check: loss is not finite");
  return v;
}

}  // namespace

GradCheckReport grad_check(const LossFn& loss_fn, const std::vector<Parameter*>& params, double eps, double floor) {
  if (!(eps > 0.0)) throw ArgumentError("grad_check: eps must be positive");
  for (Parameter* p : params) p->zero_grad();
  {
    Tape tape(true);
    Var loss = loss_fn(tape);
    if (!std::isfinite(loss.value()[0])) throw NumericError("grad_check: loss is not finite");
    tape.backward(loss);
  }

  GradCheckReport report;
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    for (std::size_t i = 0; i < p->value.size(); ++i) {
      const double saved = p->value[i];
      p->value[i] = saved + eps;
      const double up = evaluate(loss_fn);
      p->value[i] = saved - eps;
      const double down = evaluate(loss_fn);
      p->value[i] = saved;

      const double numeric = (up - down) / (2.0 * eps);
      const double analytic = p->grad[i];
      const double abs_err = std::abs(analytic - numeric);
      const double rel_err = abs_err / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++report.checked;
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      if (rel_err > report.max_rel_error || report.worst_parameter.empty()) {
        if (rel_err >= report.max_rel_error) {
          report.max_rel_error = rel_err;
          report.worst_parameter = p->name;
          report.worst_index = i;
          report.worst_analytic = analytic;
          report.worst_numeric = numeric;
        }
      }
    }
  }
  return report;
}

}  // namespace mode
