#include "driftlab/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace driftlab {

namespace {

double evaluate(const std::function<Tensor()>& f) {
  const double value = f().item();
  if (!std::isfinite(value)) throw EvaluationError("grad_check: function value is not finite");
  return value;
}

}  // namespace

GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           const GradCheckOptions& options) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.zero_grad();
  }
  const Tensor root = f();
  if (!std::isfinite(root.item())) throw EvaluationError("grad_check: function value is not finite");
  root.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) {
    if (p.has_grad()) {
      analytic.emplace_back(p.grad().begin(), p.grad().end());
    } else {
      analytic.emplace_back(p.size(), 0.0);
    }
  }

  GradCheckReport report;
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto values = params[pi].mutable_data();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_coords_per_param != 0 && n > options.max_coords_per_param) {
      stride = (n + options.max_coords_per_param - 1) / options.max_coords_per_param;
    }
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      values[i] = saved + options.step;
      const double plus = evaluate(f);
      values[i] = saved - options.step;
      const double minus = evaluate(f);
      values[i] = saved;
      const double numeric = (plus - minus) / (2.0 * options.step);
      const double a = analytic[pi][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
      const double rel = std::abs(a - numeric) / denom;
      ++report.coordinates_checked;
      if (rel >= report.max_rel_error) {
        report.max_rel_error = rel;
        report.worst_param = pi;
        report.worst_index = i;
        report.analytic = a;
        report.numeric = numeric;
      }
    }
  }
  return report;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step) {
  Tensor params[] = {x};
  GradCheckOptions options;
  options.step = step;
  return grad_check([&] { return f(params[0]); }, params, options).max_rel_error;
}

}  // namespace driftlab
