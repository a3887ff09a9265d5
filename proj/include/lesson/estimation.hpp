#pragma once

// Weighted-least-squares state estimation and the chi-square bad-data test.

#include "lesson/chi_square.hpp"
#include "lesson/gridcase.hpp"

namespace lesson {

struct EstimationResult {
  Vector x_hat;
  Vector residual;        // z - H x_hat
  double bdd_statistic = 0.0;
  double threshold = 0.0;
  bool flagged = false;   // bdd_statistic >= threshold
};

constexpr double default_significance = 0.99;

namespace detail {

inline void require_estimable(const GridModel& grid, const Vector& z) {
  if (!grid.has_noise() || !grid.normal_factor) {
    throw ContractError("noise_sigma must be populated before estimation");
  }
  require(z.size() == static_cast<Eigen::Index>(grid.n_meter()),
          "measurement vector length must equal the meter count");
}

}  // namespace detail

/// x_hat = (H^T R^-1 H)^-1 H^T R^-1 z using the cached Cholesky factor.
inline Vector wls_estimate(const GridModel& grid, const Vector& z) {
  detail::require_estimable(grid, z);
  const Vector weighted = z.cwiseQuotient(grid.noise_sigma.cwiseAbs2());
  return grid.normal_factor->solve(grid.h.transpose() * weighted);
}

inline double weighted_residual_norm(const GridModel& grid, const Vector& residual) {
  return residual.cwiseQuotient(grid.noise_sigma).squaredNorm();
}

/// L(x_hat) = sum_i ((z_i - H_i x_hat) / sigma_i)^2
inline double bdd_statistic(const GridModel& grid, const Vector& z) {
  const Vector x_hat = wls_estimate(grid, z);
  return weighted_residual_norm(grid, z - grid.h * x_hat);
}

inline int bdd_degrees_of_freedom(const GridModel& grid) {
  const auto dof = static_cast<long>(grid.n_meter()) - static_cast<long>(grid.n_state);
  if (dof < 1) throw ObservabilityError("meter redundancy too low for a residual test");
  return static_cast<int>(dof);
}

inline EstimationResult bdd_detect(const GridModel& grid, const Vector& z,
                                   double significance = default_significance) {
  EstimationResult r;
  r.x_hat = wls_estimate(grid, z);
  r.residual = z - grid.h * r.x_hat;
  r.bdd_statistic = weighted_residual_norm(grid, r.residual);
  r.threshold = chi_square_threshold(bdd_degrees_of_freedom(grid), significance);
  r.flagged = r.bdd_statistic >= r.threshold;
  return r;
}

}  // namespace lesson
