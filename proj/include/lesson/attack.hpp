#pragma once

// Multi-label adversarial FDIA search. The perturbation lives in state space,
// zeta = I (.) (mu * tanh(w)), so the measurement change H zeta is invisible
// to the residual test. Adam drives a hinge loss on the locator's logits until
// the requested label pattern appears.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "lesson/adam.hpp"
#include "lesson/estimation.hpp"
#include "lesson/fdia.hpp"
#include "lesson/neural.hpp"

namespace lesson {

enum class Variant { lesson1 = 1, lesson2 = 2, lesson3 = 3, lesson4 = 4 };

inline std::string variant_name(Variant v) { return "lesson" + std::to_string(static_cast<int>(v)); }

inline Variant variant_from_name(const std::string& s) {
  for (auto v : {Variant::lesson1, Variant::lesson2, Variant::lesson3, Variant::lesson4}) {
    if (s == variant_name(v) || s == std::to_string(static_cast<int>(v))) return v;
  }
  throw ContractError("unknown variant '" + s + "' (expected lesson1..lesson4)");
}

/// Targeted variants keep c intact on its support.
inline bool is_targeted(Variant v) { return v == Variant::lesson3 || v == Variant::lesson4; }
/// Variants 2 and 4 require every meter to read "normal".
inline bool hides_all(Variant v) { return v == Variant::lesson2 || v == Variant::lesson4; }

struct HingeObjective {};
struct PenaltyObjective {
  double lambda = 1.0;
};
using ObjectiveMode = std::variant<HingeObjective, PenaltyObjective>;

struct AttackConfig {
  Variant variant = Variant::lesson1;
  double mu = 1.0;   // radians
  double lr = 1e-3;  // Adam initial learning rate
  int max_iter = 500;
  ObjectiveMode objective = HingeObjective{};
  std::vector<std::size_t> uncontrolled_meters;  // N: perturbation forced to 0 there
  std::vector<std::size_t> set_a;                // meters forced to label 1
  std::uint64_t seed = 0;
  bool record_trace = false;
};

struct VariantSpec {
  std::vector<std::size_t> set_a;  // label 1 required
  std::vector<std::size_t> set_b;  // label 0 required
  Vector mask;                     // I: 1 where the state may move
  bool targeted = false;
};

struct TraceRow {
  int iteration;
  double loss;
  double bdd_statistic;
  int violated_labels;
};

struct AttackResult {
  bool success = false;
  int iterations_used = 0;
  Vector zeta;    // state perturbation
  Vector theta;   // measurement perturbation, after projection
  Vector z_f;
  Eigen::VectorXi predicted_labels;
  double loss = 0.0;
  double bdd_statistic_initial = 0.0;
  double bdd_statistic_final = 0.0;
  double zeta_norm = 0.0;
  double theta_norm = 0.0;
  std::vector<TraceRow> trace;
};

inline std::vector<std::size_t> support_of(const Vector& a, double epsilon = label_epsilon) {
  std::vector<std::size_t> s;
  for (Eigen::Index j = 0; j < a.size(); ++j) {
    if (std::abs(a[j]) > epsilon) s.push_back(static_cast<std::size_t>(j));
  }
  return s;
}

/// I_i = 0 where c_i != 0, else 1.
inline Vector targeted_mask(const Vector& c) {
  return c.unaryExpr([](double v) { return v != 0.0 ? 0.0 : 1.0; });
}

inline VariantSpec build_variant(Variant variant, const FdiaSpec& fdia, std::vector<std::size_t> set_a = {}) {
  require(fdia.a.size() > 0 && fdia.c.size() > 0, "build_variant: empty FDIA");
  VariantSpec spec;
  if (hides_all(variant)) {
    spec.set_b.resize(static_cast<std::size_t>(fdia.a.size()));
    std::iota(spec.set_b.begin(), spec.set_b.end(), std::size_t{0});
  } else {
    spec.set_b = support_of(fdia.a);
  }
  std::sort(set_a.begin(), set_a.end());
  set_a.erase(std::unique(set_a.begin(), set_a.end()), set_a.end());
  for (auto j : set_a) {
    require(j < static_cast<std::size_t>(fdia.a.size()), "build_variant: set_a index out of range");
    if (std::binary_search(spec.set_b.begin(), spec.set_b.end(), j)) {
      throw ContractError("build_variant: meter " + std::to_string(j) +
                          " is required to be both attacked and normal");
    }
  }
  spec.set_a = std::move(set_a);
  spec.targeted = is_targeted(variant);
  spec.mask = spec.targeted ? targeted_mask(fdia.c) : Vector::Ones(fdia.c.size());
  return spec;
}

/// sum_{i in A} max(0, -logit_i) + sum_{j in B} max(0, logit_j), plus
/// lambda * ||zeta||_2 in penalty mode. `d_logits` receives a subgradient.
inline double attack_loss(const Vector& logits, const VariantSpec& spec, const ObjectiveMode& mode,
                          const Vector& zeta, Vector* d_logits = nullptr) {
  double loss = 0.0;
  if (d_logits) *d_logits = Vector::Zero(logits.size());
  for (auto i : spec.set_a) {
    const double v = logits[static_cast<Eigen::Index>(i)];
    loss += std::max(0.0, -v);
    if (d_logits && v <= 0.0) (*d_logits)[static_cast<Eigen::Index>(i)] -= 1.0;
  }
  for (auto j : spec.set_b) {
    const double v = logits[static_cast<Eigen::Index>(j)];
    loss += std::max(0.0, v);
    if (d_logits && v > 0.0) (*d_logits)[static_cast<Eigen::Index>(j)] += 1.0;
  }
  if (const auto* p = std::get_if<PenaltyObjective>(&mode)) loss += p->lambda * zeta.norm();
  return loss;
}

inline int violated_labels(const Eigen::VectorXi& labels, const VariantSpec& spec) {
  int n = 0;
  for (auto i : spec.set_a) n += labels[static_cast<Eigen::Index>(i)] != 1;
  for (auto j : spec.set_b) n += labels[static_cast<Eigen::Index>(j)] != 0;
  return n;
}

/// The composite map w -> z_f used by the search. Exposed so tests can
/// differentiate it independently.
struct AttackMap {
  const GridModel* grid;
  Vector z_a;
  Vector mask;        // state mask I
  Vector projection;  // 1 for controlled meters, 0 for N
  double mu;

  Vector zeta(const Vector& w) const { return mask.cwiseProduct((mu * w.array().tanh()).matrix()); }
  Vector theta(const Vector& zeta_v) const { return projection.cwiseProduct(grid->h * zeta_v); }
  Vector z_f(const Vector& w) const { return z_a + theta(zeta(w)); }

  /// d loss / d w from d loss / d z_f (and d loss / d zeta for penalty terms).
  Vector pullback(const Vector& w, const Vector& d_zf, const Vector& d_zeta_extra) const {
    Vector d_zeta = grid->h.transpose() * projection.cwiseProduct(d_zf) + d_zeta_extra;
    const Eigen::ArrayXd t = w.array().tanh();
    return (mask.array() * mu * (1.0 - t.square()) * d_zeta.array()).matrix();
  }
};

/// Loss value and gradient with respect to w for the full composite map.
inline double attack_objective(const nn::NalModel& model, const AttackMap& map, const VariantSpec& spec,
                               const ObjectiveMode& mode, const Vector& w, Vector* d_w,
                               Vector* logits_out = nullptr) {
  const Vector zeta = map.zeta(w);
  const Vector zf = map.z_a + map.theta(zeta);
  nn::Tape tape;
  const Vector logits = nn::forward(model, Matrix(zf), nn::Mode::eval, d_w ? &tape : nullptr).col(0);
  Vector d_logits;
  const double loss = attack_loss(logits, spec, mode, zeta, d_w ? &d_logits : nullptr);
  if (logits_out) *logits_out = logits;
  if (d_w) {
    const auto g = nn::backward(model, tape, Matrix(d_logits), false);
    Vector d_zeta_extra = Vector::Zero(zeta.size());
    if (const auto* p = std::get_if<PenaltyObjective>(&mode)) {
      const double norm = zeta.norm();
      if (norm > 0.0) d_zeta_extra = p->lambda * zeta / norm;
    }
    *d_w = map.pullback(w, g.input.col(0), d_zeta_extra);
  }
  return loss;
}

/// Runs the Adam search from w = 0. The success predicate is checked before
/// every step (iteration 0 is the unperturbed z_a); the search stops at the
/// first success. On exhaustion the minimum-loss iterate is reported.
inline AttackResult run_attack(const nn::NalModel& model, const GridModel& grid, const Vector& z_a,
                               const FdiaSpec& fdia, const AttackConfig& config) {
  require(config.mu > 0.0, "run_attack: mu must be positive");
  require(config.max_iter >= 1, "run_attack: max_iter must be >= 1");
  require(config.lr > 0.0, "run_attack: lr must be positive");
  require(model.mode == nn::Mode::eval, "run_attack: the locator must be in eval mode");
  require(z_a.size() == static_cast<Eigen::Index>(grid.n_meter()), "run_attack: z_a length mismatch");
  require(model.input_length() == static_cast<int>(grid.n_meter()), "run_attack: model and grid disagree on m");

  const VariantSpec spec = build_variant(config.variant, fdia, config.set_a);
  AttackMap map{&grid, z_a, spec.mask, Vector::Ones(z_a.size()), config.mu};
  for (auto j : config.uncontrolled_meters) {
    require(j < grid.n_meter(), "run_attack: uncontrolled meter out of range");
    map.projection[static_cast<Eigen::Index>(j)] = 0.0;
  }

  const auto n = static_cast<Eigen::Index>(grid.n_state);
  Vector w = Vector::Zero(n);
  AdamState adam;
  AttackResult best;
  best.loss = std::numeric_limits<double>::infinity();
  std::vector<TraceRow> trace;
  const bool want_bdd = grid.has_noise();
  const double bdd0 = want_bdd ? bdd_statistic(grid, z_a) : 0.0;

  auto snapshot = [&](const Vector& zeta, const Vector& logits, double loss, int it) {
    AttackResult r;
    r.iterations_used = it;
    r.zeta = zeta;
    r.theta = map.theta(zeta);
    r.z_f = z_a + r.theta;
    r.predicted_labels = nn::labels_from_logits(logits);
    r.loss = loss;
    r.zeta_norm = r.zeta.norm();
    r.theta_norm = r.theta.norm();
    r.bdd_statistic_initial = bdd0;
    r.bdd_statistic_final = want_bdd ? bdd_statistic(grid, r.z_f) : 0.0;
    return r;
  };

  for (int it = 0;; ++it) {
    Vector d_w;
    Vector logits;
    const bool last = it == config.max_iter;
    const double loss = attack_objective(model, map, spec, config.objective, w, last ? nullptr : &d_w, &logits);
    if (!std::isfinite(loss)) {
      throw NumericError("attack loss became non-finite at iteration " + std::to_string(it));
    }
    const auto labels = nn::labels_from_logits(logits);
    const int violated = violated_labels(labels, spec);
    if (config.record_trace) {
      const Vector zf = map.z_f(w);
      trace.push_back({it, loss, want_bdd ? bdd_statistic(grid, zf) : 0.0, violated});
    }
    if (violated == 0) {
      AttackResult r = snapshot(map.zeta(w), logits, loss, it);
      r.success = true;
      r.trace = std::move(trace);
      return r;
    }
    if (loss < best.loss) best = snapshot(map.zeta(w), logits, loss, it);
    if (last) break;
    const std::span<double> wspan(w.data(), static_cast<std::size_t>(w.size()));
    adam_step(adam, std::span<const std::span<double>>(&wspan, 1), std::span<const Vector>(&d_w, 1), config.lr);
  }
  best.success = false;
  best.iterations_used = config.max_iter;
  best.trace = std::move(trace);
  return best;
}

struct PerturbationMetrics {
  std::optional<double> rho_c;  // mean ||zeta||_2 over successes
  std::optional<double> rho_a;  // mean ||H zeta||_2 over successes
  double success_rate = 0.0;
  std::size_t successes = 0;
  std::size_t total = 0;
};

inline PerturbationMetrics perturbation_metrics(const std::vector<AttackResult>& results) {
  PerturbationMetrics m;
  m.total = results.size();
  double sum_c = 0.0;
  double sum_a = 0.0;
  for (const auto& r : results) {
    if (!r.success) continue;
    ++m.successes;
    sum_c += r.zeta_norm;
    sum_a += r.theta_norm;
  }
  if (m.total > 0) m.success_rate = static_cast<double>(m.successes) / static_cast<double>(m.total);
  if (m.successes > 0) {
    m.rho_c = sum_c / static_cast<double>(m.successes);
    m.rho_a = sum_a / static_cast<double>(m.successes);
  }
  return m;
}

/// Half (by default) of the meters outside the FDIA support, drawn uniformly.
inline std::vector<std::size_t> draw_uncontrolled(const FdiaSpec& fdia, double fraction, Rng& rng) {
  require(fraction >= 0.0 && fraction <= 1.0, "uncontrolled fraction must lie in [0, 1]");
  std::vector<std::size_t> free;
  for (Eigen::Index j = 0; j < fdia.a.size(); ++j) {
    if (std::abs(fdia.a[j]) <= label_epsilon) free.push_back(static_cast<std::size_t>(j));
  }
  std::shuffle(free.begin(), free.end(), rng);
  free.resize(static_cast<std::size_t>(std::llround(fraction * static_cast<double>(free.size()))));
  std::sort(free.begin(), free.end());
  return free;
}

}  // namespace lesson
