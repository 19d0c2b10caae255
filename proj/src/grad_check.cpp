#include "dsbel/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "dsbel/common.hpp"

namespace dsbel {

double relative_error(double analytic, double numeric, double floor) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

GradCheckResult grad_check(const std::function<double()>& loss, std::span<double> x,
                           std::span<const double> analytic, double eps,
                           std::span<const std::size_t> probe) {
  if (analytic.size() != x.size()) throw ConfigError("grad_check: gradient length mismatch");
  GradCheckResult result;
  auto check_one = [&](std::size_t i) {
    const double saved = x[i];
    x[i] = saved + eps;
    const double up = loss();
    x[i] = saved - eps;
    const double down = loss();
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(analytic[i], numeric);
    if (err > result.max_rel_error || (i == 0 && result.max_rel_error == 0.0)) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.worst_analytic = analytic[i];
      result.worst_numeric = numeric;
    }
  };
  if (probe.empty()) {
    for (std::size_t i = 0; i < x.size(); ++i) check_one(i);
  } else {
    for (auto i : probe) check_one(i);
  }
  return result;
}

}  // namespace dsbel
