#pragma once

// A small differentiable layer stack for the multi-label attack locator:
// Conv1d (stride 1, same padding), BatchNorm, LeakyReLU, fully connected,
// sigmoid output. Activations are laid out as (channels, length * batch) with
// sample b occupying columns [b*length, (b+1)*length).

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "lesson/adam.hpp"
#include "lesson/error.hpp"
#include "lesson/rng.hpp"

namespace lesson::nn {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using MatrixMap = Eigen::Map<Matrix>;
using ConstMatrixMap = Eigen::Map<const Matrix>;

enum class Mode { train, eval };

struct ConvSpec {
  int kernel = 3;
  int in_channels = 1;
  int out_channels = 1;
};

struct BatchNormSpec {
  int channels = 1;
  double momentum = 0.1;
  double epsilon = 1e-5;
};

struct LeakyReluSpec {
  double slope = 0.01;
};

struct DenseSpec {
  int in_features = 1;
  int out_features = 1;
};

using LayerSpec = std::variant<ConvSpec, BatchNormSpec, LeakyReluSpec, DenseSpec>;

struct ArchitectureSpec {
  int input_length = 0;  // m; the input is a single-channel signal
  std::vector<LayerSpec> layers;
};

struct Conv1d {
  ConvSpec spec;
  Matrix weight;  // out x (kernel * in), column index = k * in + c
  Vector bias;
};

struct BatchNorm1d {
  BatchNormSpec spec;
  Vector gamma, beta;
  Vector running_mean, running_var;
};

struct LeakyRelu {
  LeakyReluSpec spec;
};

struct Dense {
  DenseSpec spec;
  Matrix weight;  // out x in; input feature index = position * channels + channel
  Vector bias;
};

using Layer = std::variant<Conv1d, BatchNorm1d, LeakyRelu, Dense>;

struct TrainingMeta {
  std::uint64_t seed = 0;
  int epochs = 0;
  double lr = 0.0;
  int batch_size = 0;
};

/// Multi-label locator: standardization followed by the layer stack. Output
/// logits have one entry per meter; confidences are their sigmoids.
struct NalModel {
  std::string case_name;
  ArchitectureSpec arch;
  Vector input_mean;   // per meter
  Vector input_scale;  // per meter, strictly positive
  std::vector<Layer> layers;
  Mode mode = Mode::eval;
  TrainingMeta meta;

  int input_length() const { return arch.input_length; }
};

inline const char* layer_name(const LayerSpec& s) {
  return std::visit(
      [](const auto& v) -> const char* {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, ConvSpec>) return "conv";
        else if constexpr (std::is_same_v<T, BatchNormSpec>) return "batchnorm";
        else if constexpr (std::is_same_v<T, LeakyReluSpec>) return "leakyrelu";
        else return "dense";
      },
      s);
}

inline LayerSpec spec_of(const Layer& l) {
  return std::visit([](const auto& v) -> LayerSpec { return v.spec; }, l);
}

struct Shape {
  int channels;
  int length;
  int flat() const { return channels * length; }
};

/// Output shape after every layer; throws ContractError if the chain is broken.
inline std::vector<Shape> chain_shapes(const ArchitectureSpec& arch) {
  require(arch.input_length >= 1, "architecture input length must be positive");
  std::vector<Shape> shapes{{1, arch.input_length}};
  for (std::size_t i = 0; i < arch.layers.size(); ++i) {
    Shape s = shapes.back();
    const std::string where = "layer " + std::to_string(i) + " (" + layer_name(arch.layers[i]) + "): ";
    std::visit(
        [&](const auto& spec) {
          using T = std::decay_t<decltype(spec)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            require(spec.in_channels == s.channels, where + "input channels do not match");
            require(spec.kernel >= 1 && spec.out_channels >= 1, where + "bad conv geometry");
            s.channels = spec.out_channels;
          } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
            require(spec.channels == s.channels, where + "channel count does not match");
          } else if constexpr (std::is_same_v<T, DenseSpec>) {
            require(spec.in_features == s.flat(), where + "input features do not match");
            s = {spec.out_features, 1};
          }
        },
        arch.layers[i]);
    shapes.push_back(s);
  }
  return shapes;
}

/// A locator must map m inputs to m logits.
inline void validate_locator(const ArchitectureSpec& arch) {
  const auto shapes = chain_shapes(arch);
  require(shapes.back().length == 1 && shapes.back().channels == arch.input_length,
          "final layer must produce one logit per meter");
}

/// Conv(k)-BN-LeakyReLU blocks followed by flatten and a fully connected layer.
inline ArchitectureSpec conv_stack(int m, const std::vector<int>& kernels, const std::vector<int>& widths,
                                   double slope = 0.01, double bn_momentum = 0.1, double bn_eps = 1e-5) {
  require(kernels.size() == widths.size() && !kernels.empty(), "kernels and widths must pair up");
  ArchitectureSpec arch;
  arch.input_length = m;
  int ch = 1;
  for (std::size_t i = 0; i < kernels.size(); ++i) {
    arch.layers.push_back(ConvSpec{kernels[i], ch, widths[i]});
    arch.layers.push_back(BatchNormSpec{widths[i], bn_momentum, bn_eps});
    arch.layers.push_back(LeakyReluSpec{slope});
    ch = widths[i];
  }
  arch.layers.push_back(DenseSpec{ch * m, m});
  return arch;
}

/// Kernel sizes of the per-system CNN locators; widths are configurable.
inline std::vector<int> default_kernels(std::size_t n_bus) {
  if (n_bus >= 100) return {5, 5, 5, 3, 3, 3};
  if (n_bus >= 30) return {10, 5, 3, 3, 3};
  return {10, 5, 3, 3};
}

inline std::vector<int> default_widths(std::size_t n_bus) {
  if (n_bus >= 100) return {16, 32, 32, 64, 64, 64};
  if (n_bus >= 30) return {16, 32, 32, 32, 32};
  return {16, 32, 32, 32};
}

inline ArchitectureSpec locator_architecture(std::size_t n_bus, int m,
                                             std::optional<std::vector<int>> widths = std::nullopt) {
  return conv_stack(m, default_kernels(n_bus), widths ? *widths : default_widths(n_bus));
}

/// Fresh parameters: weights and biases ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)),
/// BN gamma = 1, beta = 0, running stats (0, 1).
inline NalModel make_model(const ArchitectureSpec& arch, std::uint64_t seed, std::string case_name = {}) {
  chain_shapes(arch);
  NalModel model;
  model.case_name = std::move(case_name);
  model.arch = arch;
  model.input_mean = Vector::Zero(arch.input_length);
  model.input_scale = Vector::Ones(arch.input_length);
  auto rng = make_rng(seed, "init");
  auto fill = [&rng](auto& x, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = u(rng);
  };
  for (const auto& spec : arch.layers) {
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, ConvSpec>) {
            Conv1d c{s, Matrix(s.out_channels, s.kernel * s.in_channels), Vector(s.out_channels)};
            fill(c.weight, s.kernel * s.in_channels);
            fill(c.bias, s.kernel * s.in_channels);
            model.layers.emplace_back(std::move(c));
          } else if constexpr (std::is_same_v<T, BatchNormSpec>) {
            model.layers.emplace_back(BatchNorm1d{s, Vector::Ones(s.channels), Vector::Zero(s.channels),
                                                  Vector::Zero(s.channels), Vector::Ones(s.channels)});
          } else if constexpr (std::is_same_v<T, LeakyReluSpec>) {
            model.layers.emplace_back(LeakyRelu{s});
          } else {
            Dense d{s, Matrix(s.out_features, s.in_features), Vector(s.out_features)};
            fill(d.weight, s.in_features);
            fill(d.bias, s.in_features);
            model.layers.emplace_back(std::move(d));
          }
        },
        spec);
  }
  return model;
}

// ---------------------------------------------------------------------------
// parameter access

struct NamedParameter {
  std::string name;
  std::span<double> values;
};

template <typename Model>
  requires std::is_same_v<std::remove_const_t<Model>, NalModel>
auto parameters_of(Model& model) {
  using Span = std::conditional_t<std::is_const_v<Model>, std::span<const double>, std::span<double>>;
  std::vector<std::pair<std::string, Span>> out;
  auto view = [](auto& x) { return Span(x.data(), static_cast<std::size_t>(x.size())); };
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    std::visit(
        [&](auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv1d> || std::is_same_v<T, Dense>) {
            out.emplace_back(prefix + "weight", view(l.weight));
            out.emplace_back(prefix + "bias", view(l.bias));
          } else if constexpr (std::is_same_v<T, BatchNorm1d>) {
            out.emplace_back(prefix + "gamma", view(l.gamma));
            out.emplace_back(prefix + "beta", view(l.beta));
          }
        },
        model.layers[i]);
  }
  return out;
}

inline std::vector<std::span<double>> parameter_spans(NalModel& model) {
  std::vector<std::span<double>> out;
  for (auto& [name, span] : parameters_of(model)) out.push_back(span);
  return out;
}

inline bool parameters_finite(const NalModel& model) {
  for (const auto& [name, span] : parameters_of(model)) {
    for (double v : span) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// forward / backward

struct ConvCache {
  Matrix cols;
};

struct BatchNormCache {
  Matrix xhat;
  Vector inv_std;
  Vector batch_mean;
  Vector batch_var;  // biased
};

struct Tape {
  Mode mode = Mode::eval;
  int batch = 0;
  std::vector<Matrix> inputs;  // input activation of each layer
  std::vector<std::variant<std::monostate, ConvCache, BatchNormCache>> caches;
  std::vector<Shape> shapes;   // input shape of each layer, plus the output
  Matrix logits;
};

namespace detail {

inline int pad_left(int kernel) { return (kernel - 1) / 2; }

inline Matrix im2col(const Matrix& in, int channels, int length, int batch, int kernel) {
  const int pad = pad_left(kernel);
  Matrix cols = Matrix::Zero(static_cast<Eigen::Index>(kernel) * channels,
                             static_cast<Eigen::Index>(length) * batch);
  for (int b = 0; b < batch; ++b) {
    for (int l = 0; l < length; ++l) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * length + l;
      for (int k = 0; k < kernel; ++k) {
        const int src = l + k - pad;
        if (src < 0 || src >= length) continue;
        cols.block(static_cast<Eigen::Index>(k) * channels, col, channels, 1) =
            in.col(static_cast<Eigen::Index>(b) * length + src);
      }
    }
  }
  return cols;
}

inline Matrix col2im(const Matrix& cols, int channels, int length, int batch, int kernel) {
  const int pad = pad_left(kernel);
  Matrix in = Matrix::Zero(channels, static_cast<Eigen::Index>(length) * batch);
  for (int b = 0; b < batch; ++b) {
    for (int l = 0; l < length; ++l) {
      const Eigen::Index col = static_cast<Eigen::Index>(b) * length + l;
      for (int k = 0; k < kernel; ++k) {
        const int src = l + k - pad;
        if (src < 0 || src >= length) continue;
        in.col(static_cast<Eigen::Index>(b) * length + src) +=
            cols.block(static_cast<Eigen::Index>(k) * channels, col, channels, 1);
      }
    }
  }
  return in;
}

inline void check_finite(const Matrix& x, std::size_t layer, const char* name, const char* stage) {
  if (!x.allFinite()) {
    throw NumericError(std::string("non-finite ") + stage + " at layer " + std::to_string(layer) + " (" +
                       name + ")");
  }
}

}  // namespace detail

/// Standardizes the raw measurements (m x B) and runs the stack. Returns
/// logits (m x B). When `tape` is given, every intermediate needed by
/// backward() is recorded. The model is never modified.
inline Matrix forward(const NalModel& model, const Matrix& z, Mode mode, Tape* tape = nullptr) {
  const int m = model.input_length();
  if (z.rows() != m) {
    throw ContractError("forward: input has " + std::to_string(z.rows()) + " rows, model expects " +
                        std::to_string(m));
  }
  const int batch = static_cast<int>(z.cols());
  Matrix x = ((z.colwise() - model.input_mean).array().colwise() / model.input_scale.array()).matrix();
  Matrix act = MatrixMap(x.data(), 1, static_cast<Eigen::Index>(m) * batch);
  Shape shape{1, m};

  if (tape) {
    tape->mode = mode;
    tape->batch = batch;
    tape->inputs.clear();
    tape->caches.clear();
    tape->shapes.clear();
  }

  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    if (tape) {
      tape->inputs.push_back(act);
      tape->shapes.push_back(shape);
    }
    std::variant<std::monostate, ConvCache, BatchNormCache> cache;
    Matrix out = std::visit(
        [&](const auto& l) -> Matrix {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv1d>) {
            Matrix cols = detail::im2col(act, shape.channels, shape.length, batch, l.spec.kernel);
            Matrix y = l.weight * cols;
            y.colwise() += l.bias;
            if (tape) cache = ConvCache{std::move(cols)};
            shape.channels = l.spec.out_channels;
            return y;
          } else if constexpr (std::is_same_v<T, BatchNorm1d>) {
            Vector mean, var;
            if (mode == Mode::train) {
              mean = act.rowwise().mean();
              var = (act.colwise() - mean).array().square().rowwise().mean();
            } else {
              mean = l.running_mean;
              var = l.running_var;
            }
            Vector inv_std = (var.array() + l.spec.epsilon).rsqrt();
            Matrix xhat = ((act.colwise() - mean).array().colwise() * inv_std.array()).matrix();
            Matrix y = ((xhat.array().colwise() * l.gamma.array()).colwise() + l.beta.array()).matrix();
            if (tape) cache = BatchNormCache{std::move(xhat), std::move(inv_std), std::move(mean), std::move(var)};
            return y;
          } else if constexpr (std::is_same_v<T, LeakyRelu>) {
            const double s = l.spec.slope;
            return act.unaryExpr([s](double v) { return v > 0.0 ? v : s * v; });
          } else {
            ConstMatrixMap flat(act.data(), shape.flat(), batch);
            Matrix y = l.weight * flat;
            y.colwise() += l.bias;
            shape = {l.spec.out_features, 1};
            return y;
          }
        },
        model.layers[i]);
    detail::check_finite(out, i, layer_name(spec_of(model.layers[i])), "activation");
    if (tape) tape->caches.push_back(std::move(cache));
    act = std::move(out);
  }
  // final activation is (m, B) for a locator; reshape generally to (flat, B)
  Matrix logits = MatrixMap(act.data(), shape.flat(), batch);
  if (tape) {
    tape->shapes.push_back(shape);
    tape->logits = logits;
  }
  return logits;
}

struct Gradients {
  std::vector<Vector> params;  // parameters_of() order, flattened column-major
  Matrix input;                // d loss / d z (raw measurements), m x B
};

/// Reverse pass for a recorded forward. `d_logits` is the gradient of a scalar
/// loss with respect to the logits (same shape as tape.logits).
inline Gradients backward(const NalModel& model, const Tape& tape, const Matrix& d_logits,
                          bool want_param_grads = true) {
  require(tape.inputs.size() == model.layers.size(), "backward: tape does not match model");
  require(d_logits.rows() == tape.logits.rows() && d_logits.cols() == tape.logits.cols(),
          "backward: gradient shape mismatch");
  const int batch = tape.batch;
  Matrix grad = d_logits;  // reshaped per layer below
  std::vector<std::vector<Vector>> per_layer(model.layers.size());

  for (std::size_t ii = model.layers.size(); ii-- > 0;) {
    const Shape in_shape = tape.shapes[ii];
    const Shape out_shape = tape.shapes[ii + 1];
    const Matrix& in = tape.inputs[ii];
    // activations of conv-like layers are (channels, length * batch)
    if (!std::holds_alternative<Dense>(model.layers[ii])) {
      grad = MatrixMap(grad.data(), out_shape.channels, static_cast<Eigen::Index>(out_shape.length) * batch).eval();
    }
    grad = std::visit(
        [&](const auto& l) -> Matrix {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, Conv1d>) {
            const auto& cols = std::get<ConvCache>(tape.caches[ii]).cols;
            if (want_param_grads) {
              Matrix dw = grad * cols.transpose();
              Vector db = grad.rowwise().sum();
              per_layer[ii].emplace_back(Eigen::Map<Vector>(dw.data(), dw.size()));
              per_layer[ii].push_back(std::move(db));
            }
            Matrix dcols = l.weight.transpose() * grad;
            return detail::col2im(dcols, in_shape.channels, in_shape.length, batch, l.spec.kernel);
          } else if constexpr (std::is_same_v<T, BatchNorm1d>) {
            const auto& c = std::get<BatchNormCache>(tape.caches[ii]);
            if (want_param_grads) {
              per_layer[ii].emplace_back((grad.array() * c.xhat.array()).rowwise().sum().matrix());
              per_layer[ii].emplace_back(grad.rowwise().sum());
            }
            Matrix dxhat = (grad.array().colwise() * l.gamma.array()).matrix();
            if (tape.mode == Mode::eval) {
              return (dxhat.array().colwise() * c.inv_std.array()).matrix();
            }
            const double n = static_cast<double>(grad.cols());
            Vector sum_dxhat = dxhat.rowwise().sum();
            Vector sum_dxhat_xhat = (dxhat.array() * c.xhat.array()).rowwise().sum();
            Matrix dx = (n * dxhat.array() - (c.xhat.array().colwise() * sum_dxhat_xhat.array()))
                            .matrix();
            dx.colwise() -= sum_dxhat;
            return (dx.array().colwise() * (c.inv_std.array() / n)).matrix();
          } else if constexpr (std::is_same_v<T, LeakyRelu>) {
            const double s = l.spec.slope;
            return grad.binaryExpr(in, [s](double g, double v) { return v > 0.0 ? g : s * g; });
          } else {
            ConstMatrixMap flat(in.data(), in_shape.flat(), batch);
            Matrix g = MatrixMap(grad.data(), out_shape.flat(), batch);
            if (want_param_grads) {
              Matrix dw = g * flat.transpose();
              per_layer[ii].emplace_back(Eigen::Map<Vector>(dw.data(), dw.size()));
              per_layer[ii].emplace_back(g.rowwise().sum());
            }
            Matrix dflat = l.weight.transpose() * g;
            return MatrixMap(dflat.data(), in_shape.channels, static_cast<Eigen::Index>(in_shape.length) * batch);
          }
        },
        model.layers[ii]);
    detail::check_finite(grad, ii, layer_name(spec_of(model.layers[ii])), "gradient");
  }

  Gradients out;
  for (auto& layer : per_layer) {
    for (auto& g : layer) out.params.push_back(std::move(g));
  }
  const int m = model.input_length();
  Matrix dx = MatrixMap(grad.data(), m, batch);
  out.input = (dx.array().colwise() / model.input_scale.array()).matrix();
  return out;
}

/// Folds the batch statistics recorded by a training-mode forward into the
/// running estimates (unbiased variance, exponential averaging by momentum).
inline void update_running_stats(NalModel& model, const Tape& tape) {
  require(tape.mode == Mode::train, "running statistics come from training-mode passes");
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    auto* bn = std::get_if<BatchNorm1d>(&model.layers[i]);
    if (!bn) continue;
    const auto& c = std::get<BatchNormCache>(tape.caches[i]);
    const double n = static_cast<double>(tape.inputs[i].cols());
    const double mom = bn->spec.momentum;
    const double unbias = n > 1.0 ? n / (n - 1.0) : 1.0;
    bn->running_mean = (1.0 - mom) * bn->running_mean + mom * c.batch_mean;
    bn->running_var = (1.0 - mom) * bn->running_var + mom * unbias * c.batch_var;
  }
}

// ---------------------------------------------------------------------------
// losses and prediction

inline double sigmoid(double v) {
  if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

inline Matrix sigmoid(const Matrix& logits) {
  return logits.unaryExpr([](double v) { return sigmoid(v); });
}

/// Mean binary cross-entropy over every (meter, sample) entry, computed from
/// logits. Fills `d_logits` with its gradient when requested.
inline double bce_with_logits(const Matrix& logits, const Matrix& targets, Matrix* d_logits = nullptr) {
  require(logits.rows() == targets.rows() && logits.cols() == targets.cols(), "bce: shape mismatch");
  const double n = static_cast<double>(logits.size());
  double loss = 0.0;
  for (Eigen::Index i = 0; i < logits.size(); ++i) {
    const double x = logits.data()[i];
    const double y = targets.data()[i];
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  if (d_logits) {
    *d_logits = (sigmoid(logits) - targets) / n;
  }
  return loss / n;
}

/// Label j is attacked iff the confidence exceeds 0.5, i.e. the logit is > 0.
inline Eigen::VectorXi labels_from_confidence(const Vector& confidence) {
  return confidence.unaryExpr([](double p) { return p > 0.5 ? 1.0 : 0.0; }).cast<int>();
}

inline Eigen::VectorXi labels_from_logits(const Vector& logits) {
  return logits.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }).cast<int>();
}

struct Prediction {
  Vector logits;
  Vector confidence;
};

inline Prediction predict(const NalModel& model, const Vector& z) {
  Prediction p;
  p.logits = forward(model, Matrix(z), Mode::eval).col(0);
  p.confidence = sigmoid(Matrix(p.logits)).col(0);
  return p;
}

inline Eigen::VectorXi predict_labels(const NalModel& model, const Vector& z) {
  return labels_from_logits(predict(model, z).logits);
}

/// Labels for every column of Z, evaluated in chunks.
inline Eigen::MatrixXi predict_label_matrix(const NalModel& model, const Matrix& z, int chunk = 256) {
  Eigen::MatrixXi out(z.rows(), z.cols());
  for (Eigen::Index start = 0; start < z.cols(); start += chunk) {
    const Eigen::Index len = std::min<Eigen::Index>(chunk, z.cols() - start);
    const Matrix logits = forward(model, z.middleCols(start, len), Mode::eval);
    out.middleCols(start, len) = logits.unaryExpr([](double v) { return v > 0.0 ? 1.0 : 0.0; }).cast<int>();
  }
  return out;
}

struct Accuracy {
  double meter = 0.0;  // fraction of correct label entries
  double row = 0.0;    // fraction of samples with every label correct
};

inline Accuracy label_accuracy(const Eigen::MatrixXi& predicted, const Eigen::MatrixXi& truth) {
  require(predicted.rows() == truth.rows() && predicted.cols() == truth.cols(), "accuracy: shape mismatch");
  if (truth.size() == 0) return {1.0, 1.0};
  const auto correct = (predicted.array() == truth.array()).cast<int>();
  const double meter = static_cast<double>(correct.sum()) / static_cast<double>(truth.size());
  const double row = static_cast<double>((correct.colwise().minCoeff().array() == 1).count()) /
                     static_cast<double>(truth.cols());
  return {meter, row};
}

inline Accuracy evaluate(const NalModel& model, const Matrix& z, const Matrix& y) {
  return label_accuracy(predict_label_matrix(model, z), y.cast<int>());
}

// ---------------------------------------------------------------------------
// training

struct TrainHyper {
  int epochs = 30;
  int batch_size = 64;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  bool fit_standardization = true;  // false keeps the model's current input_mean/input_scale
};

struct TrainReport {
  int epochs_run = 0;
  double final_loss = 0.0;
  double meter_accuracy = 0.0;  // on the training data, eval mode
  double row_accuracy = 0.0;
  std::vector<double> loss_trace;  // mean minibatch loss per epoch
  bool smoothed_loss_non_increasing = true;
};

/// Per-meter mean and standard deviation of the training inputs.
inline void fit_standardization(NalModel& model, const Matrix& z) {
  require(z.rows() == model.input_length() && z.cols() > 0, "standardization: bad input shape");
  model.input_mean = z.rowwise().mean();
  Vector var = (z.colwise() - model.input_mean).array().square().rowwise().mean();
  model.input_scale = var.cwiseSqrt();
  for (Eigen::Index i = 0; i < model.input_scale.size(); ++i) {
    if (!(model.input_scale[i] > 1e-12)) model.input_scale[i] = 1.0;
  }
}

/// Checks that the 5-epoch moving average of the loss never rises.
inline bool smoothed_non_increasing(const std::vector<double>& trace, std::size_t window = 5) {
  if (trace.size() <= window) return true;
  double prev = std::numeric_limits<double>::infinity();
  for (std::size_t i = window; i <= trace.size(); ++i) {
    double avg = 0.0;
    for (std::size_t j = i - window; j < i; ++j) avg += trace[j];
    avg /= static_cast<double>(window);
    if (avg > prev + 1e-12) return false;
    prev = avg;
  }
  return true;
}

/// Minimizes mean BCE with minibatch Adam. Standardization is fitted on `z`
/// first. Deterministic for a given seed.
inline TrainReport train(NalModel& model, const Matrix& z, const Matrix& y, const TrainHyper& hyper) {
  require(z.cols() > 0, "train: empty dataset");
  require(z.cols() == y.cols() && y.rows() == model.input_length() && z.rows() == model.input_length(),
          "train: data shape does not match the model");
  require(hyper.epochs >= 1 && hyper.batch_size >= 1 && hyper.lr > 0.0, "train: bad hyper-parameters");
  validate_locator(model.arch);
  if (hyper.fit_standardization) fit_standardization(model, z);
  model.mode = Mode::train;

  const auto u = static_cast<std::size_t>(z.cols());
  std::vector<Eigen::Index> order(u);
  std::iota(order.begin(), order.end(), 0);
  AdamState adam;
  TrainReport report;
  Tape tape;
  Matrix d_logits;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    auto rng = make_rng(hyper.seed, "epoch", epoch);
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < u; start += static_cast<std::size_t>(hyper.batch_size)) {
      const std::size_t len = std::min<std::size_t>(static_cast<std::size_t>(hyper.batch_size), u - start);
      Matrix zb(z.rows(), static_cast<Eigen::Index>(len));
      Matrix yb(y.rows(), static_cast<Eigen::Index>(len));
      for (std::size_t k = 0; k < len; ++k) {
        zb.col(static_cast<Eigen::Index>(k)) = z.col(order[start + k]);
        yb.col(static_cast<Eigen::Index>(k)) = y.col(order[start + k]);
      }
      const Matrix logits = forward(model, zb, Mode::train, &tape);
      const double loss = bce_with_logits(logits, yb, &d_logits);
      if (!std::isfinite(loss)) {
        throw TrainingError("loss diverged at epoch " + std::to_string(epoch));
      }
      const Gradients g = backward(model, tape, d_logits);
      const auto spans = parameter_spans(model);
      adam_step(adam, spans, g.params, hyper.lr);
      update_running_stats(model, tape);
      epoch_loss += loss;
      ++batches;
    }
    report.loss_trace.push_back(epoch_loss / static_cast<double>(batches));
    ++report.epochs_run;
  }
  if (!parameters_finite(model)) throw TrainingError("parameters became non-finite");

  model.mode = Mode::eval;
  model.meta = {hyper.seed, hyper.epochs, hyper.lr, hyper.batch_size};
  report.final_loss = report.loss_trace.back();
  const auto acc = evaluate(model, z, y);
  report.meter_accuracy = acc.meter;
  report.row_accuracy = acc.row;
  report.smoothed_loss_non_increasing = smoothed_non_increasing(report.loss_trace);
  return report;
}

}  // namespace lesson::nn
