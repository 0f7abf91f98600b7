#pragma once

#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <stdexcept>

#include <boost/math/special_functions/beta.hpp>

namespace lexrl {

struct TTestResult {
  double t_statistic = 0.0;
  double p_value = 1.0;
  /// Zero-variance differences: p is 1 when they are all zero, 0 otherwise.
  bool degenerate = false;
};

/// Paired two-sided t-test on d = a - b with n - 1 degrees of freedom.
/// p = I_{v/(v+t^2)}(v/2, 1/2), the regularized incomplete beta.
inline TTestResult paired_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("paired_t_test: length mismatch");
  const std::size_t n = a.size();
  if (n < 2) throw std::invalid_argument("paired_t_test: need at least two pairs");

  double mean = 0.0;
  for (std::size_t i = 0; i < n; ++i) mean += a[i] - b[i];
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dev = (a[i] - b[i]) - mean;
    ss += dev * dev;
  }
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult r;
  if (sd == 0.0) {
    r.degenerate = true;
    if (mean == 0.0) {
      r.t_statistic = 0.0;
      r.p_value = 1.0;
    } else {
      r.t_statistic = std::copysign(std::numeric_limits<double>::infinity(), mean);
      r.p_value = 0.0;
    }
    return r;
  }
  r.t_statistic = mean / (sd / std::sqrt(static_cast<double>(n)));
  const double dof = static_cast<double>(n - 1);
  const double x = dof / (dof + r.t_statistic * r.t_statistic);
  r.p_value = boost::math::ibeta(dof / 2.0, 0.5, x);
  return r;
}

}  // namespace lexrl
