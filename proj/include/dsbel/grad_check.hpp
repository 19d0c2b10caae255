#pragma once

#include <functional>
#include <span>
#include <vector>

namespace dsbel {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// Relative error used throughout: |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-6);

// Compares an analytical gradient against central differences
// (f(x + eps) - f(x - eps)) / (2 eps), evaluated in 64-bit. `x` is restored
// after every probe. `probe` selects which coordinates to check; empty means
// all of them.
GradCheckResult grad_check(const std::function<double()>& loss, std::span<double> x,
                           std::span<const double> analytic, double eps,
                           std::span<const std::size_t> probe = {});

}  // namespace dsbel
