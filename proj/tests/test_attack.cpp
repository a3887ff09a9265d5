#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace lesson;

namespace {

const oracle::Trained& trained() { return oracle::small_trained_case14(); }

FdiaSpec spec_with_c(const GridModel& g, Vector c) { return fdia_from_state_error(g, std::move(c), 0.02); }

}  // namespace

TEST(Variant, Sets) {
  const auto g = oracle::load_case("case14");
  Vector c = Vector::Zero(13);
  c[3] = 0.2;
  const auto f = spec_with_c(g, c);
  const auto v2 = build_variant(Variant::lesson2, f);
  EXPECT_EQ(v2.set_b.size(), 34u);
  EXPECT_TRUE((v2.mask.array() == 1.0).all());
  EXPECT_FALSE(v2.targeted);

  const auto v3 = build_variant(Variant::lesson3, f);
  EXPECT_EQ(v3.set_b, support_of(f.a));
  EXPECT_EQ(v3.mask, targeted_mask(c));
  EXPECT_TRUE(v3.targeted);
  EXPECT_EQ(build_variant(Variant::lesson1, f).set_b, support_of(f.a));
  EXPECT_TRUE((build_variant(Variant::lesson1, f).mask.array() == 1.0).all());
}

TEST(Variant, MaskDefinition) {
  EXPECT_EQ(targeted_mask((Vector(3) << 0.5, 0.0, -0.2).finished()), (Vector(3) << 0, 1, 0).finished());
}

TEST(Variant, ContradictorySetA) {
  const auto g = oracle::load_case("case14");
  Vector c = Vector::Zero(13);
  c[3] = 0.2;
  const auto f = spec_with_c(g, c);
  const auto support = support_of(f.a);
  EXPECT_THROW(build_variant(Variant::lesson1, f, {support.front()}), ContractError);
  EXPECT_THROW(build_variant(Variant::lesson2, f, {0}), ContractError);
  std::size_t outside = 0;
  while (std::find(support.begin(), support.end(), outside) != support.end()) ++outside;
  EXPECT_EQ(build_variant(Variant::lesson1, f, {outside}).set_a, std::vector<std::size_t>{outside});
}

TEST(VariantNames, RoundTrip) {
  for (auto v : {Variant::lesson1, Variant::lesson2, Variant::lesson3, Variant::lesson4}) {
    EXPECT_EQ(variant_from_name(variant_name(v)), v);
  }
  EXPECT_THROW(variant_from_name("lesson5"), ContractError);
}

TEST(AttackLoss, HingeExamples) {
  VariantSpec s;
  s.set_b = {1};
  const Vector zeta = Vector::Zero(2);
  EXPECT_DOUBLE_EQ(attack_loss((Vector(3) << 5, -1, 5).finished(), s, HingeObjective{}, zeta), 0.0);
  EXPECT_DOUBLE_EQ(attack_loss((Vector(3) << 5, 2, 5).finished(), s, HingeObjective{}, zeta), 2.0);
  VariantSpec a;
  a.set_a = {0};
  EXPECT_DOUBLE_EQ(attack_loss((Vector(2) << -0.5, 3).finished(), a, HingeObjective{}, zeta), 0.5);
}

TEST(AttackLoss, PenaltyAddsNorm) {
  VariantSpec s;
  s.set_b = {0};
  const Vector zeta = (Vector(2) << 0.3, 0.4).finished();
  EXPECT_DOUBLE_EQ(attack_loss((Vector(1) << 2.0).finished(), s, PenaltyObjective{2.0}, zeta), 2.0 + 1.0);
}

TEST(Metrics, Examples) {
  std::vector<AttackResult> none(3);
  const auto m0 = perturbation_metrics(none);
  EXPECT_EQ(m0.success_rate, 0.0);
  EXPECT_FALSE(m0.rho_c.has_value());
  EXPECT_FALSE(m0.rho_a.has_value());

  std::vector<AttackResult> one(1);
  one[0].success = true;
  EXPECT_EQ(perturbation_metrics(one).rho_c.value(), 0.0);

  std::vector<AttackResult> two(3);
  two[0].success = two[2].success = true;
  two[0].zeta_norm = 0.1;
  two[2].zeta_norm = 0.3;
  two[1].zeta_norm = 9.0;
  const auto m = perturbation_metrics(two);
  EXPECT_NEAR(m.rho_c.value(), 0.2, 1e-15);
  EXPECT_NEAR(m.success_rate, 2.0 / 3.0, 1e-15);
}

TEST(AttackGradient, CompositeMapMatchesFiniteDifferences) {
  std::mt19937_64 rng(31);
  const auto g = oracle::calibrated_case("case14");
  std::size_t instances = 0;
  for (int t = 0; t < 40 && instances < 20; ++t) {
    auto model = nn::make_model(nn::locator_architecture(14, 34), rng());
    oracle::randomize_bn(model, rng);
    auto srng = make_rng(t, "grad");
    const auto draw = sample_state(g, srng);
    const auto f = random_fdia(g, 0.1, srng);
    const Vector z_a = make_measurements(g, draw.theta, srng) + f.a;
    const Variant variant = static_cast<Variant>(1 + t % 4);
    const auto spec = build_variant(variant, f);
    AttackMap map{&g, z_a, spec.mask, Vector::Ones(34), 0.7};
    for (Eigen::Index j = 0; j < 34; j += 3) map.projection[j] = t % 2 ? 0.0 : 1.0;
    ObjectiveMode mode = t % 3 == 0 ? ObjectiveMode(PenaltyObjective{0.5}) : ObjectiveMode(HingeObjective{});
    Vector w = Vector::Random(13) * 0.5;

    Vector grad, logits;
    attack_objective(model, map, spec, mode, w, &grad, &logits);
    // hinge kinks: skip instances with a constrained logit too close to 0
    bool near_kink = false;
    for (auto j : spec.set_b) near_kink |= std::abs(logits[static_cast<Eigen::Index>(j)]) < 1e-3;
    if (near_kink) continue;
    ++instances;
    auto loss = [&] { return attack_objective(model, map, spec, mode, w, nullptr); };
    oracle::FdResult r;
    for (Eigen::Index i = 0; i < w.size(); ++i) oracle::fd_accumulate(r, grad[i], oracle::central_difference(loss, w[i]));
    EXPECT_EQ(r.failed, 0u) << "instance " << t << " worst " << r.worst_rel;
  }
  EXPECT_GE(instances, 20u);
}

TEST(RunAttack, AlreadySatisfiedStopsAtZero) {
  const auto& t = trained();
  // a normal sample with a zero-support attack on LESSON1 has nothing to hide
  for (const auto& s : t.test.samples) {
    if (!s.fdia || !completely_correct(t.model, s)) continue;
    FdiaSpec f = *s.fdia;
    AttackConfig cfg;
    cfg.variant = Variant::lesson1;
    // labels are correct, so every support meter reads 1 and the attack must move
    const auto r = run_attack(t.model, t.grid, s.z, f, cfg);
    EXPECT_GT(r.iterations_used, 0);
    break;
  }
  for (const auto& s : t.test.samples) {
    if (s.fdia || !completely_correct(t.model, s)) continue;
    Vector c = Vector::Zero(13);
    c[0] = 1e-3;
    FdiaSpec f = fdia_from_state_error(t.grid, c, 0.02);
    AttackConfig cfg;
    cfg.variant = Variant::lesson2;
    const auto r = run_attack(t.model, t.grid, s.z, f, cfg);
    ASSERT_TRUE(r.success);
    EXPECT_EQ(r.iterations_used, 0);
    EXPECT_TRUE(r.zeta.isZero(0.0));
    EXPECT_TRUE(r.theta.isZero(0.0));
    break;
  }
}

TEST(RunAttack, InvariantsAcrossVariants) {
  const auto& t = trained();
  int runs = 0, successes = 0;
  for (const auto& s : t.test.samples) {
    if (!s.fdia || !completely_correct(t.model, s)) continue;
    for (auto v : {Variant::lesson1, Variant::lesson2, Variant::lesson3, Variant::lesson4}) {
      AttackConfig cfg;
      cfg.variant = v;
      cfg.lr = 0.01;
      cfg.max_iter = 200;
      cfg.mu = 0.8;
      cfg.record_trace = true;
      const auto r = run_attack(t.model, t.grid, s.z, *s.fdia, cfg);
      ++runs;
      EXPECT_LT(r.zeta.cwiseAbs().maxCoeff(), cfg.mu);
      EXPECT_EQ(r.z_f, s.z + t.grid.h * r.zeta);
      EXPECT_EQ(r.theta, t.grid.h * r.zeta);
      const double l0 = bdd_statistic(t.grid, s.z);
      EXPECT_LE(std::abs(r.bdd_statistic_final - l0), 1e-9 * (1 + l0));
      EXPECT_FALSE(r.trace.empty());
      EXPECT_EQ(r.trace.front().iteration, 0);
      if (!r.success) continue;
      ++successes;
      const auto spec = build_variant(v, *s.fdia);
      EXPECT_EQ(violated_labels(nn::predict_labels(t.model, r.z_f), spec), 0);
      EXPECT_EQ(r.trace.back().violated_labels, 0);
      if (is_targeted(v)) {
        EXPECT_EQ(spec.mask.cwiseProduct(r.zeta), r.zeta);
        const Vector clean = s.z - s.fdia->a;
        const Vector shift = wls_estimate(t.grid, r.z_f) - wls_estimate(t.grid, clean);
        for (auto i : s.fdia->target_indices) {
          EXPECT_NEAR(shift[static_cast<Eigen::Index>(i)], s.fdia->c[static_cast<Eigen::Index>(i)], 1e-8);
        }
      }
    }
    if (runs >= 40) break;
  }
  EXPECT_GE(runs, 40);
  EXPECT_GT(successes, 0);
}

TEST(RunAttack, UncontrolledMetersStayUntouched) {
  const auto& t = trained();
  for (const auto& s : t.test.samples) {
    if (!s.fdia || !completely_correct(t.model, s)) continue;
    auto rng = make_rng(3, "n");
    AttackConfig cfg;
    cfg.variant = Variant::lesson1;
    cfg.lr = 0.01;
    cfg.max_iter = 100;
    cfg.uncontrolled_meters = draw_uncontrolled(*s.fdia, 0.5, rng);
    const auto support = support_of(s.fdia->a);
    const std::size_t free = 34 - support.size();
    EXPECT_EQ(cfg.uncontrolled_meters.size(), static_cast<std::size_t>(std::llround(0.5 * free)));
    const auto r = run_attack(t.model, t.grid, s.z, *s.fdia, cfg);
    for (auto j : cfg.uncontrolled_meters) {
      EXPECT_EQ(r.theta[static_cast<Eigen::Index>(j)], 0.0);
      EXPECT_EQ(std::find(support.begin(), support.end(), j), support.end());
    }
    EXPECT_EQ(r.z_f, s.z + r.theta);
    return;
  }
  FAIL() << "no completely correct attacked sample";
}

TEST(RunAttack, Preconditions) {
  const auto& t = trained();
  const auto& s = *std::find_if(t.test.samples.begin(), t.test.samples.end(), [](auto& x) { return x.fdia.has_value(); });
  AttackConfig cfg;
  cfg.mu = 0.0;
  EXPECT_THROW(run_attack(t.model, t.grid, s.z, *s.fdia, cfg), ContractError);
  cfg.mu = 1.0;
  cfg.max_iter = 0;
  EXPECT_THROW(run_attack(t.model, t.grid, s.z, *s.fdia, cfg), ContractError);
  cfg.max_iter = 10;
  auto train_mode = t.model;
  train_mode.mode = nn::Mode::train;
  EXPECT_THROW(run_attack(train_mode, t.grid, s.z, *s.fdia, cfg), ContractError);
  Vector bad = s.z;
  bad[0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(run_attack(t.model, t.grid, bad, *s.fdia, cfg), NumericError);
}

TEST(RunAttack, Deterministic) {
  const auto& t = trained();
  const auto& s = *std::find_if(t.test.samples.begin(), t.test.samples.end(), [](auto& x) { return x.fdia.has_value(); });
  AttackConfig cfg;
  cfg.variant = Variant::lesson4;
  cfg.max_iter = 50;
  const auto a = run_attack(t.model, t.grid, s.z, *s.fdia, cfg);
  const auto b = run_attack(t.model, t.grid, s.z, *s.fdia, cfg);
  EXPECT_EQ(a.zeta, b.zeta);
  EXPECT_EQ(a.iterations_used, b.iterations_used);
}
