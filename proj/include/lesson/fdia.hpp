#pragma once

// Stealthy FDIA construction (a = Hc) and labeled dataset synthesis.

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "lesson/gridcase.hpp"
#include "lesson/rng.hpp"

namespace lesson {

constexpr double label_epsilon = 1e-8;
constexpr double sigma_floor = 1e-4;
constexpr double noise_fraction = 0.02;
constexpr std::array<double, 3> fdia_scales = {0.02, 0.1, 0.5};

inline std::string scale_name(double nu2) {
  if (nu2 == fdia_scales[0]) return "small";
  if (nu2 == fdia_scales[1]) return "medium";
  if (nu2 == fdia_scales[2]) return "large";
  return std::to_string(nu2);
}

inline double scale_from_name(const std::string& name) {
  if (name == "small") return fdia_scales[0];
  if (name == "medium") return fdia_scales[1];
  if (name == "large") return fdia_scales[2];
  throw ContractError("unknown FDIA scale '" + name + "' (expected small, medium or large)");
}

struct FdiaSpec {
  Vector c;                                 // state error, radians
  Vector a;                                 // H c, per-unit
  std::vector<std::size_t> target_indices;  // support of c, ascending
  double scale_variance = 0.0;              // nu^2
};

struct LabeledSample {
  Vector z;
  Eigen::VectorXi y;
  std::optional<FdiaSpec> fdia;
  Vector x_true;  // empty when loaded from disk
};

struct DatasetMeta {
  std::uint64_t seed = 0;
  std::string case_name;
  std::string split = "all";
  std::size_t n_normal = 0;
  std::size_t n_attacked = 0;
  std::vector<std::pair<double, std::size_t>> per_scale;  // (nu^2, count)
  Vector noise_sigma;
};

struct Dataset {
  std::vector<LabeledSample> samples;
  DatasetMeta meta;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
};

struct StateDraw {
  Vector loads;  // per bus, p.u.
  Vector theta;  // non-slack angles, radians
};

/// Solves the DC flow equations B theta = P for the given bus loads. Non-slack
/// injections are the negated loads; the slack absorbs the balance.
inline Vector dc_power_flow(const GridModel& grid, const Vector& loads) {
  require(loads.size() == static_cast<Eigen::Index>(grid.n_bus), "loads must have one entry per bus");
  if (!grid.susceptance_factor) throw ObservabilityError("susceptance matrix not factored");
  Vector p(static_cast<Eigen::Index>(grid.n_state));
  for (std::size_t b = 0; b < grid.n_bus; ++b) {
    if (auto c = grid.state_index(b); c >= 0) p[c] = -loads[static_cast<Eigen::Index>(b)];
  }
  return grid.susceptance_factor->solve(p);
}

/// Draws each bus load uniformly in [0.8, 1.2] x base and solves the DC flow.
inline StateDraw sample_state(const GridModel& grid, Rng& rng) {
  std::uniform_real_distribution<double> u(0.8, 1.2);
  StateDraw d;
  d.loads.resize(static_cast<Eigen::Index>(grid.n_bus));
  for (Eigen::Index b = 0; b < d.loads.size(); ++b) d.loads[b] = u(rng) * grid.base_loads[b];
  d.theta = dc_power_flow(grid, d.loads);
  return d;
}

/// z = Hx + e with e_i ~ N(0, sigma_i^2).
inline Vector make_measurements(const GridModel& grid, const Vector& x, Rng& rng) {
  if (!grid.has_noise()) throw ContractError("noise_sigma must be populated before make_measurements");
  require(x.size() == static_cast<Eigen::Index>(grid.n_state), "state length mismatch");
  std::normal_distribution<double> n01(0.0, 1.0);
  Vector z = grid.h * x;
  for (Eigen::Index i = 0; i < z.size(); ++i) z[i] += grid.noise_sigma[i] * n01(rng);
  return z;
}

/// sigma_i = max(0.02 * mean_k |z_ki|, sigma_floor) over noise-free samples.
inline Vector noise_sigma_from_samples(const GridModel& grid, const std::vector<Vector>& noise_free) {
  if (noise_free.size() < 100) {
    throw ContractError("calibrate_noise needs at least 100 noise-free samples, got " +
                        std::to_string(noise_free.size()));
  }
  Vector mean_abs = Vector::Zero(static_cast<Eigen::Index>(grid.n_meter()));
  for (const auto& z : noise_free) {
    require(z.size() == mean_abs.size(), "sample length mismatch");
    mean_abs += z.cwiseAbs();
  }
  mean_abs /= static_cast<double>(noise_free.size());
  return (noise_fraction * mean_abs).cwiseMax(sigma_floor);
}

inline GridModel calibrate_noise(GridModel grid, const std::vector<Vector>& noise_free) {
  set_noise_sigma(grid, noise_sigma_from_samples(grid, noise_free));
  return grid;
}

/// Draws `count` noise-free measurement vectors Hx from the load model.
inline std::vector<Vector> noise_free_pool(const GridModel& grid, std::size_t count, std::uint64_t seed) {
  std::vector<Vector> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    auto rng = make_rng(seed, "calibration", i);
    out.push_back(grid.h * sample_state(grid, rng).theta);
  }
  return out;
}

inline Eigen::VectorXi labels_from_attack(const Vector& a, double epsilon = label_epsilon) {
  Eigen::VectorXi y(a.size());
  for (Eigen::Index j = 0; j < a.size(); ++j) y[j] = std::abs(a[j]) > epsilon ? 1 : 0;
  return y;
}

inline FdiaSpec fdia_from_state_error(const GridModel& grid, Vector c, double nu2) {
  require(c.size() == static_cast<Eigen::Index>(grid.n_state), "c length must equal n_state");
  FdiaSpec f;
  for (Eigen::Index i = 0; i < c.size(); ++i) {
    if (c[i] != 0.0) f.target_indices.push_back(static_cast<std::size_t>(i));
  }
  f.a = grid.h * c;
  f.c = std::move(c);
  f.scale_variance = nu2;
  return f;
}

/// k ~ U{1..floor(n/2)} distinct targets, each c_i ~ N(0, nu^2).
inline FdiaSpec random_fdia(const GridModel& grid, double nu2, Rng& rng) {
  require(grid.n_state >= 2, "random_fdia needs at least two state variables");
  require(nu2 > 0.0, "random_fdia needs a positive scale variance");
  const std::size_t n = grid.n_state;
  std::uniform_int_distribution<std::size_t> count(1, n / 2);
  const std::size_t k = count(rng);

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {  // partial Fisher-Yates
    std::uniform_int_distribution<std::size_t> pick(i, n - 1);
    std::swap(idx[i], idx[pick(rng)]);
  }

  std::normal_distribution<double> gauss(0.0, std::sqrt(nu2));
  Vector c = Vector::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < k; ++i) {
    double v = 0.0;
    while (v == 0.0) v = gauss(rng);
    c[static_cast<Eigen::Index>(idx[i])] = v;
  }
  return fdia_from_state_error(grid, std::move(c), nu2);
}

struct DatasetConfig {
  std::size_t n_normal = 0;
  std::size_t n_attacked_per_scale = 0;
  std::uint64_t seed = 0;
  std::vector<double> scales{fdia_scales.begin(), fdia_scales.end()};
};

/// Builds a pool of n_normal + |scales| * n_attacked_per_scale noisy normal
/// samples, attacks a random subset of them, and shuffles the result. Every
/// sample owns a seed-derived random stream.
inline Dataset generate_dataset(const GridModel& grid, const DatasetConfig& cfg) {
  require(cfg.n_normal >= 1 && cfg.n_attacked_per_scale >= 1, "dataset counts must be >= 1");
  if (!grid.has_noise()) throw ContractError("noise_sigma must be populated before generate_dataset");

  const std::size_t n_attacked = cfg.n_attacked_per_scale * cfg.scales.size();
  const std::size_t total = cfg.n_normal + n_attacked;
  const auto m = static_cast<Eigen::Index>(grid.n_meter());

  std::vector<LabeledSample> pool(total);
  for (std::size_t i = 0; i < total; ++i) {
    auto rng = make_rng(cfg.seed, "sample", i);
    auto draw = sample_state(grid, rng);
    pool[i].z = make_measurements(grid, draw.theta, rng);
    pool[i].x_true = std::move(draw.theta);
    pool[i].y = Eigen::VectorXi::Zero(m);
  }

  std::vector<std::size_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  auto pick_rng = make_rng(cfg.seed, "attack-subset");
  std::shuffle(order.begin(), order.end(), pick_rng);

  Dataset ds;
  ds.meta.seed = cfg.seed;
  ds.meta.case_name = grid.case_name;
  ds.meta.noise_sigma = grid.noise_sigma;
  for (std::size_t s = 0; s < cfg.scales.size(); ++s) {
    for (std::size_t k = 0; k < cfg.n_attacked_per_scale; ++k) {
      const std::size_t target = order[s * cfg.n_attacked_per_scale + k];
      auto rng = make_rng(cfg.seed, "fdia", target);
      auto spec = random_fdia(grid, cfg.scales[s], rng);
      auto& sample = pool[target];
      sample.z += spec.a;
      sample.y = labels_from_attack(spec.a);
      sample.fdia = std::move(spec);
    }
    ds.meta.per_scale.emplace_back(cfg.scales[s], cfg.n_attacked_per_scale);
  }
  ds.meta.n_normal = cfg.n_normal;
  ds.meta.n_attacked = n_attacked;

  auto shuffle_rng = make_rng(cfg.seed, "shuffle");
  std::shuffle(pool.begin(), pool.end(), shuffle_rng);
  ds.samples = std::move(pool);
  return ds;
}

inline void recount(Dataset& ds) {
  ds.meta.n_normal = 0;
  ds.meta.n_attacked = 0;
  for (auto& [nu2, count] : ds.meta.per_scale) count = 0;
  for (const auto& s : ds.samples) {
    if (!s.fdia) {
      ++ds.meta.n_normal;
      continue;
    }
    ++ds.meta.n_attacked;
    auto it = std::find_if(ds.meta.per_scale.begin(), ds.meta.per_scale.end(),
                           [&](const auto& p) { return p.first == s.fdia->scale_variance; });
    if (it == ds.meta.per_scale.end()) {
      ds.meta.per_scale.emplace_back(s.fdia->scale_variance, 1);
    } else {
      ++it->second;
    }
  }
}

/// Uniform shuffle, then the first train_fraction of samples go to train.
inline std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction,
                                                 std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must lie in (0, 1)");
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), 0);
  auto rng = make_rng(seed, "split");
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(ds.size())));

  Dataset train, test;
  train.meta = ds.meta;
  test.meta = ds.meta;
  train.meta.split = "train";
  test.meta.split = "test";
  for (std::size_t i = 0; i < order.size(); ++i) {
    (i < n_train ? train : test).samples.push_back(ds.samples[order[i]]);
  }
  recount(train);
  recount(test);
  return {std::move(train), std::move(test)};
}

/// Stacks measurement vectors as columns (m x u) and labels likewise.
inline Matrix measurement_matrix(const Dataset& ds) {
  if (ds.empty()) return {};
  Matrix z(ds.samples.front().z.size(), static_cast<Eigen::Index>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) z.col(static_cast<Eigen::Index>(i)) = ds.samples[i].z;
  return z;
}

inline Matrix label_matrix(const Dataset& ds) {
  if (ds.empty()) return {};
  Matrix y(ds.samples.front().y.size(), static_cast<Eigen::Index>(ds.size()));
  for (std::size_t i = 0; i < ds.size(); ++i) {
    y.col(static_cast<Eigen::Index>(i)) = ds.samples[i].y.cast<double>();
  }
  return y;
}

}  // namespace lesson
