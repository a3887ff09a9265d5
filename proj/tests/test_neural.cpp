#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace lesson;
using namespace lesson::nn;

namespace {

Matrix random_matrix(Eigen::Index r, Eigen::Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix x(r, c);
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = n(rng);
  return x;
}

ArchitectureSpec single(int m, LayerSpec layer) { return {m, {std::move(layer)}}; }

NalModel random_model(const ArchitectureSpec& arch, std::mt19937_64& rng) {
  auto model = make_model(arch, rng());
  oracle::randomize_bn(model, rng);
  Vector mean = random_matrix(arch.input_length, 1, rng);
  model.input_mean = mean;
  model.input_scale = (random_matrix(arch.input_length, 1, rng).array().abs() + 0.5).matrix();
  return model;
}

void expect_fd_ok(const ArchitectureSpec& arch, Mode mode, int trials, std::size_t per_tensor = 0) {
  std::mt19937_64 rng(42);
  for (int t = 0; t < trials; ++t) {
    auto model = random_model(arch, rng);
    const int batch = 3;
    Matrix z = random_matrix(arch.input_length, batch, rng, 2.0);
    const auto shapes = chain_shapes(arch);
    Matrix w = random_matrix(shapes.back().flat(), batch, rng);
    const auto r = oracle::fd_check_network(model, z, w, mode, rng, per_tensor);
    EXPECT_EQ(r.failed, 0u) << "trial " << t << " worst rel " << r.worst_rel;
    EXPECT_GT(r.checked, 0u);
  }
}

}  // namespace

TEST(Forward, ZeroParametersGiveHalfConfidence) {
  auto model = make_model(locator_architecture(14, 34), 3);
  for (auto [name, span] : parameters_of(model)) {
    if (name.ends_with("gamma")) continue;
    std::fill(span.begin(), span.end(), 0.0);
  }
  const auto p = predict(model, Vector::Random(34));
  EXPECT_TRUE(p.logits.isZero(0.0));
  EXPECT_TRUE((p.confidence.array() == 0.5).all());
  EXPECT_TRUE((predict_labels(model, Vector::Random(34)).array() == 0).all());
}

TEST(Forward, MatchesNaiveImplementation) {
  std::mt19937_64 rng(5);
  for (auto arch : {locator_architecture(14, 34), conv_stack(9, {4, 3}, {3, 2}), conv_stack(7, {2}, {2})}) {
    auto model = random_model(arch, rng);
    for (int t = 0; t < 5; ++t) {
      Vector z = random_matrix(arch.input_length, 1, rng, 3.0);
      const Vector expected = oracle::naive_forward(model, z);
      const Vector got = predict(model, z).logits;
      ASSERT_EQ(got.size(), expected.size());
      EXPECT_LE((got - expected).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + expected.cwiseAbs().maxCoeff()));
    }
  }
}

TEST(Forward, RejectsWrongInputLength) {
  auto model = make_model(locator_architecture(14, 34), 3);
  EXPECT_THROW(predict(model, Vector::Zero(33)), ContractError);
}

TEST(Forward, NonFiniteNamesTheLayer) {
  auto model = make_model(conv_stack(6, {3}, {2}), 3);
  std::get<Conv1d>(model.layers[0]).weight(0, 0) = std::numeric_limits<double>::infinity();
  try {
    predict(model, Vector::Ones(6));
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("layer 0 (conv)"), std::string::npos) << e.what();
  }
}

TEST(Architecture, TableShapes) {
  EXPECT_NO_THROW(validate_locator(locator_architecture(14, 34)));
  EXPECT_NO_THROW(validate_locator(locator_architecture(30, 71)));
  EXPECT_NO_THROW(validate_locator(locator_architecture(118, 304)));
  EXPECT_EQ(default_kernels(14), (std::vector<int>{10, 5, 3, 3}));
  EXPECT_EQ(default_kernels(30), (std::vector<int>{10, 5, 3, 3, 3}));
  EXPECT_EQ(default_kernels(118), (std::vector<int>{5, 5, 5, 3, 3, 3}));
  ArchitectureSpec broken{10, {ConvSpec{3, 2, 4}}};
  EXPECT_THROW(chain_shapes(broken), ContractError);
  EXPECT_THROW(validate_locator(ArchitectureSpec{10, {ConvSpec{3, 1, 2}}}), ContractError);
}

TEST(Predict, StrictThreshold) {
  Vector conf(3);
  conf << 0.49, 0.5, 0.51;
  EXPECT_EQ(labels_from_confidence(conf), (Eigen::VectorXi(3) << 0, 0, 1).finished());
  Vector logits(3);
  logits << -3.0, 0.0, 1e-12;
  EXPECT_EQ(labels_from_logits(logits), (Eigen::VectorXi(3) << 0, 0, 1).finished());
}

TEST(Predict, ThresholdEquivalenceOnRandomLogits) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0.0, 10.0);
  Vector logits(100000);
  for (Eigen::Index i = 0; i < logits.size(); ++i) logits[i] = n(rng);
  logits.head(2) << 0.0, -0.0;
  EXPECT_EQ(labels_from_logits(logits), labels_from_confidence(sigmoid(Matrix(logits)).col(0)));
}

TEST(Predict, EvalModeIsPure) {
  std::mt19937_64 rng(9);
  auto model = random_model(locator_architecture(14, 34), rng);
  const auto before = oracle::flatten_state(model);
  const Vector z = random_matrix(34, 1, rng);
  const auto a = predict(model, z).logits;
  const auto b = predict(model, z).logits;
  EXPECT_EQ(a, b);
  EXPECT_EQ(before, oracle::flatten_state(model));
}

TEST(Gradient, ConvLayer) {
  expect_fd_ok(single(8, ConvSpec{3, 1, 2}), Mode::train, 20);
  expect_fd_ok(single(8, ConvSpec{4, 1, 3}), Mode::train, 20);
}

TEST(Gradient, BatchNormTrainAndEval) {
  expect_fd_ok(single(6, BatchNormSpec{1}), Mode::train, 20);
  expect_fd_ok(single(6, BatchNormSpec{1}), Mode::eval, 20);
}

TEST(Gradient, LeakyRelu) { expect_fd_ok(single(7, LeakyReluSpec{0.01}), Mode::train, 20); }

TEST(Gradient, Dense) { expect_fd_ok(single(6, DenseSpec{6, 4}), Mode::train, 20); }

TEST(Gradient, FullLocatorStacks) {
  expect_fd_ok(conv_stack(12, {10, 5, 3, 3}, {4, 4, 3, 3}), Mode::train, 3);
  expect_fd_ok(conv_stack(12, {10, 5, 3, 3}, {4, 4, 3, 3}), Mode::eval, 3);
  expect_fd_ok(locator_architecture(14, 34), Mode::eval, 2, 20);
}

TEST(Gradient, ConstantLossHasZeroInputGradient) {
  std::mt19937_64 rng(1);
  auto model = random_model(locator_architecture(14, 34), rng);
  Tape tape;
  forward(model, random_matrix(34, 2, rng), Mode::eval, &tape);
  const auto g = backward(model, tape, Matrix::Zero(34, 2));
  EXPECT_TRUE(g.input.isZero(0.0));
}

TEST(Gradient, LinearInLossScale) {
  std::mt19937_64 rng(2);
  auto model = random_model(locator_architecture(14, 34), rng);
  Tape tape;
  forward(model, random_matrix(34, 4, rng), Mode::train, &tape);
  const Matrix w = random_matrix(34, 4, rng);
  const auto g1 = backward(model, tape, w);
  const auto g2 = backward(model, tape, 2.0 * w);
  EXPECT_LE((g2.input - 2.0 * g1.input).cwiseAbs().maxCoeff(), 1e-12 * (1 + g1.input.cwiseAbs().maxCoeff()));
  for (std::size_t i = 0; i < g1.params.size(); ++i) {
    EXPECT_LE((g2.params[i] - 2.0 * g1.params[i]).cwiseAbs().maxCoeff(),
              1e-12 * (1 + g1.params[i].cwiseAbs().maxCoeff()));
  }
}

TEST(Loss, BceMatchesDefinition) {
  Matrix logits(2, 2), y(2, 2);
  logits << 0.3, -2.0, 20.0, -20.0;
  y << 1, 0, 0, 1;
  double expected = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-logits.data()[i]));
    const double t = y.data()[i];
    expected += -(t * std::log(p) + (1 - t) * std::log1p(-p));
  }
  EXPECT_NEAR(bce_with_logits(logits, y), expected / 4, 1e-7 * expected);
}

TEST(Adam, ZeroGradientLeavesParameters) {
  std::vector<double> x{1.0, -2.0};
  std::vector<std::span<double>> p{x};
  AdamState s;
  adam_step(s, p, std::vector<Vector>{Vector::Zero(2)}, 0.1);
  EXPECT_EQ(x, (std::vector<double>{1.0, -2.0}));
  EXPECT_EQ(s.step, 1);
}

TEST(Adam, FirstStepHasMagnitudeLr) {
  std::vector<double> x{0.0, 0.0};
  std::vector<std::span<double>> p{x};
  AdamState s;
  adam_step(s, p, std::vector<Vector>{(Vector(2) << 3.0, -0.25).finished()}, 0.01);
  EXPECT_NEAR(x[0], -0.01, 1e-9);
  EXPECT_NEAR(x[1], 0.01, 1e-9);
}

TEST(Adam, MatchesScalarOracleOnQuadratic) {
  std::vector<double> x{2.0, -1.5, 0.3};
  const std::vector<double> target{0.5, 1.0, -2.0};
  std::vector<oracle::ScalarAdam> ref(3);
  std::vector<double> rx = x;
  std::vector<std::span<double>> p{x};
  AdamState s;
  for (int step = 0; step < 100; ++step) {
    Vector g(3);
    for (int i = 0; i < 3; ++i) g[i] = 2.0 * (x[i] - target[i]) * (i + 1);
    adam_step(s, p, std::vector<Vector>{g}, 0.05);
    for (int i = 0; i < 3; ++i) rx[i] = ref[i].step(rx[i], 2.0 * (rx[i] - target[i]) * (i + 1), 0.05);
    for (int i = 0; i < 3; ++i) ASSERT_NEAR(x[i], rx[i], 1e-10) << "step " << step;
  }
}

TEST(Train, MemorizesOneSample) {
  auto model = make_model(conv_stack(6, {3}, {4}), 1);
  Matrix z(6, 1), y(6, 1);
  z << 0.1, -0.3, 0.7, 0.2, -0.9, 0.4;
  y << 1, 0, 1, 0, 0, 1;
  const auto report = train(model, z, y, {200, 1, 1e-2, 3});
  EXPECT_LT(report.final_loss, 0.01);
  EXPECT_EQ(report.epochs_run, 200);
}

TEST(Train, DeterministicForSeed) {
  std::mt19937_64 rng(4);
  Matrix z = random_matrix(8, 40, rng);
  Matrix y = (z.array() > 0.3).cast<double>();
  auto a = make_model(conv_stack(8, {3, 3}, {3, 3}), 1);
  auto b = a;
  train(a, z, y, {3, 8, 1e-3, 21});
  train(b, z, y, {3, 8, 1e-3, 21});
  EXPECT_EQ(oracle::flatten_state(a), oracle::flatten_state(b));
}

TEST(Train, RejectsMismatchedData) {
  auto model = make_model(conv_stack(8, {3}, {2}), 1);
  EXPECT_THROW(train(model, Matrix::Zero(7, 4), Matrix::Zero(7, 4), {}), ContractError);
  EXPECT_THROW(train(model, Matrix::Zero(8, 0), Matrix::Zero(8, 0), {}), ContractError);
}

TEST(Train, DivergenceRaisesTrainingError) {
  auto model = make_model(conv_stack(4, {3}, {2}), 1);
  Matrix z = Matrix::Ones(4, 2);
  z(0, 0) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(train(model, z, Matrix::Zero(4, 2), {1, 2, 1e-3, 0}), Error);
}

TEST(Evaluate, CountsMeterAndRowAccuracy) {
  Eigen::MatrixXi truth = Eigen::MatrixXi::Zero(34, 10);
  Eigen::MatrixXi pred = truth;
  EXPECT_DOUBLE_EQ(label_accuracy(pred, truth).meter, 1.0);
  EXPECT_DOUBLE_EQ(label_accuracy(pred, truth).row, 1.0);
  pred(5, 3) = 1;
  const auto acc = label_accuracy(pred, truth);
  EXPECT_DOUBLE_EQ(acc.meter, 1.0 - 1.0 / 340.0);
  EXPECT_DOUBLE_EQ(acc.row, 0.9);
  EXPECT_LE(acc.row, acc.meter);
}

TEST(Train, SmoothedLossFlag) {
  EXPECT_TRUE(smoothed_non_increasing({5, 4, 3, 2, 1, 1, 0.5, 0.4}));
  EXPECT_FALSE(smoothed_non_increasing({1, 1, 1, 1, 1, 9, 9, 9, 9, 9}));
}
