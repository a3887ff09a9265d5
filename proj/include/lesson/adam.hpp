#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "lesson/error.hpp"

namespace lesson {

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Moment estimates for a list of parameter tensors, lazily sized on the
/// first step.
struct AdamState {
  std::int64_t step = 0;
  std::vector<Eigen::ArrayXd> first;
  std::vector<Eigen::ArrayXd> second;
};

/// One bias-corrected Adam update, in place on `params`.
inline void adam_step(AdamState& state, std::span<const std::span<double>> params,
                      std::span<const Eigen::VectorXd> grads, double lr,
                      const AdamHyper& hyper = {}) {
  require(params.size() == grads.size(), "adam_step: parameter and gradient counts differ");
  if (state.first.empty()) {
    for (const auto& p : params) {
      state.first.push_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(p.size())));
      state.second.push_back(Eigen::ArrayXd::Zero(static_cast<Eigen::Index>(p.size())));
    }
  }
  require(state.first.size() == params.size(), "adam_step: state does not match parameters");
  ++state.step;
  const double c1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(state.step));

  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = static_cast<Eigen::Index>(params[i].size());
    require(grads[i].size() == n && state.first[i].size() == n, "adam_step: size mismatch");
    Eigen::Map<Eigen::ArrayXd> p(params[i].data(), n);
    const auto g = grads[i].array();
    auto& m = state.first[i];
    auto& v = state.second[i];
    m = hyper.beta1 * m + (1.0 - hyper.beta1) * g;
    v = hyper.beta2 * v + (1.0 - hyper.beta2) * g.square();
    p -= lr * (m / c1) / ((v / c2).sqrt() + hyper.epsilon);
  }
}

}  // namespace lesson
