#pragma once

#include <cmath>
#include <limits>

#include "lesson/error.hpp"

namespace lesson {

namespace detail {

// Series expansion of P(a, x); converges quickly for x < a + 1.
inline double gamma_p_series(double a, double x) {
  double term = 1.0 / a;
  double sum = term;
  for (int n = 1; n < 100000; ++n) {
    term *= x / (a + n);
    sum += term;
    if (std::abs(term) < std::abs(sum) * 1e-17) break;
  }
  return sum * std::exp(-x + a * std::log(x) - std::lgamma(a));
}

// Continued fraction for Q(a, x) (modified Lentz); used for x >= a + 1.
inline double gamma_q_fraction(double a, double x) {
  constexpr double tiny = 1e-300;
  double b = x + 1.0 - a;
  double c = 1.0 / tiny;
  double d = 1.0 / b;
  double h = d;
  for (int i = 1; i < 100000; ++i) {
    const double an = -i * (i - a);
    b += 2.0;
    d = an * d + b;
    if (std::abs(d) < tiny) d = tiny;
    c = b + an / c;
    if (std::abs(c) < tiny) c = tiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < 1e-16) break;
  }
  return std::exp(-x + a * std::log(x) - std::lgamma(a)) * h;
}

}  // namespace detail

/// Regularized lower incomplete gamma function P(a, x).
inline double regularized_gamma_p(double a, double x) {
  require(a > 0.0, "regularized_gamma_p: shape must be positive");
  if (x <= 0.0) return 0.0;
  if (std::isinf(x)) return 1.0;
  if (x < a + 1.0) return detail::gamma_p_series(a, x);
  return 1.0 - detail::gamma_q_fraction(a, x);
}

inline double chi_square_cdf(double x, int dof) {
  require(dof >= 1, "chi_square_cdf: dof must be >= 1");
  return regularized_gamma_p(0.5 * dof, 0.5 * x);
}

/// Quantile of the chi-square distribution: the tau with CDF(tau) = significance.
/// Bracket by doubling, then bisect to machine precision.
inline double chi_square_threshold(int dof, double significance) {
  require(dof >= 1, "chi_square_threshold: dof must be >= 1");
  require(significance > 0.0 && significance < 1.0,
          "chi_square_threshold: significance must lie in (0, 1)");
  double lo = 0.0;
  double hi = std::max(1.0, static_cast<double>(dof));
  while (chi_square_cdf(hi, dof) < significance) {
    lo = hi;
    hi *= 2.0;
  }
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (chi_square_cdf(mid, dof) < significance) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  return 0.5 * (lo + hi);
}

}  // namespace lesson
