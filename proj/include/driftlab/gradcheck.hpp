#pragma once

#include <cstddef>
#include <functional>
#include <span>
#include <string>

#include "driftlab/tensor.hpp"

namespace driftlab {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

struct GradCheckOptions {
  double step = 1e-5;
  // Relative error is |a - n| / max(|a|, |n|, floor).
  double floor = 1e-3;
  // 0 checks every coordinate; otherwise an evenly strided subset per tensor.
  std::size_t max_coords_per_param = 0;
};

// Compares the reverse-mode gradient of the scalar `f` with respect to each
// leaf in `params` against central differences, perturbing leaves in place.
GradCheckReport grad_check(const std::function<Tensor()>& f, std::span<Tensor> params,
                           const GradCheckOptions& options = {});

// Single-input form: returns the worst relative error of f at x.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double step = 1e-5);

}  // namespace driftlab
