#pragma once

// On-disk formats: grid.json, dataset directories (meta.json + CSV files),
// model.json and attack traces. Every floating-point value is written in its
// shortest round-trip form.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lesson/attack.hpp"
#include "lesson/fdia.hpp"
#include "lesson/gridcase.hpp"
#include "lesson/neural.hpp"

namespace lesson::io {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int grid_format_version = 1;
constexpr int dataset_format_version = 1;
constexpr int model_format_version = 1;

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

inline double parse_double(std::string_view s, const std::string& where) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size()) {
    throw ParseError(where + ": invalid number '" + std::string(s) + "'");
  }
  return v;
}

inline std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

inline json read_json(const fs::path& path) {
  try {
    return json::parse(read_text(path));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string() + ": " + e.what());
  }
}

inline std::vector<double> to_std(const Eigen::VectorXd& v) { return {v.data(), v.data() + v.size()}; }

inline Eigen::VectorXd to_vector(const json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json matrix_rows(const Eigen::MatrixXd& m) {
  json rows = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(to_std(m.row(r).transpose()));
  return rows;
}

inline Eigen::MatrixXd matrix_from_rows(const json& rows) {
  if (!rows.is_array() || rows.empty()) return {};
  const auto cols = rows.front().size();
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r].size() != cols) throw ParseError("ragged matrix");
    for (std::size_t c = 0; c < cols; ++c) m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c].get<double>();
  }
  return m;
}

// --------------------------------------------------------------------------- grid

inline json grid_to_json(const GridModel& g) {
  json j;
  j["version"] = grid_format_version;
  j["case_name"] = g.case_name;
  j["n_bus"] = g.n_bus;
  j["slack_bus"] = g.bus_ids[g.slack];
  j["bus_ids"] = g.bus_ids;
  json branches = json::array();
  for (const auto& br : g.branches) {
    branches.push_back({{"from", g.bus_ids[br.from]}, {"to", g.bus_ids[br.to]}, {"x", br.reactance}});
  }
  j["branches"] = branches;
  json meters = json::array();
  for (const auto& m : g.meters) {
    if (const auto* f = std::get_if<FlowMeter>(&m.kind)) {
      meters.push_back({{"id", m.id}, {"kind", "flow"}, {"from", f->from_bus}, {"to", f->to_bus}});
    } else {
      meters.push_back({{"id", m.id}, {"kind", "injection"}, {"bus", std::get<InjectionMeter>(m.kind).bus}});
    }
  }
  j["meters"] = meters;
  j["h_matrix"] = matrix_rows(g.h);
  j["base_loads"] = to_std(g.base_loads);
  if (g.has_noise()) j["noise_sigma"] = to_std(g.noise_sigma);
  return j;
}

inline GridModel grid_from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != grid_format_version) throw ParseError("unsupported grid.json version");
    GridModel g;
    g.case_name = j.at("case_name").get<std::string>();
    g.n_bus = j.at("n_bus").get<std::size_t>();
    g.bus_ids = j.at("bus_ids").get<std::vector<int>>();
    if (g.bus_ids.size() != g.n_bus || g.n_bus < 2) throw ParseError("grid.json: bus list mismatch");
    g.n_state = g.n_bus - 1;
    const int slack_id = j.at("slack_bus").get<int>();
    auto pos = [&](int id) {
      const auto it = std::find(g.bus_ids.begin(), g.bus_ids.end(), id);
      if (it == g.bus_ids.end()) throw ParseError("grid.json: unknown bus " + std::to_string(id));
      return static_cast<std::size_t>(it - g.bus_ids.begin());
    };
    g.slack = pos(slack_id);
    for (const auto& br : j.at("branches")) {
      g.branches.push_back({pos(br.at("from").get<int>()), pos(br.at("to").get<int>()), br.at("x").get<double>()});
    }
    for (const auto& m : j.at("meters")) {
      MeterDescriptor d;
      d.id = m.at("id").get<std::size_t>();
      if (d.id != g.meters.size()) throw ParseError("grid.json: meter ids must be contiguous");
      if (m.at("kind") == "flow") {
        d.kind = FlowMeter{m.at("from").get<int>(), m.at("to").get<int>()};
      } else {
        d.kind = InjectionMeter{m.at("bus").get<int>()};
      }
      g.meters.push_back(d);
    }
    g.h = matrix_from_rows(j.at("h_matrix"));
    if (g.h.rows() != static_cast<Eigen::Index>(g.meters.size()) ||
        g.h.cols() != static_cast<Eigen::Index>(g.n_state)) {
      throw ParseError("grid.json: h_matrix shape does not match meters and states");
    }
    g.base_loads = to_vector(j.at("base_loads"));
    factor_susceptance(g);
    if (j.contains("noise_sigma")) set_noise_sigma(g, to_vector(j.at("noise_sigma")));
    return g;
  } catch (const json::exception& e) {
    throw ParseError(std::string("grid.json: ") + e.what());
  }
}

inline void save_grid(const GridModel& g, const fs::path& path) { write_text(path, grid_to_json(g).dump(1)); }
inline GridModel load_grid(const fs::path& path) { return grid_from_json(read_json(path)); }

inline RawCase load_case_file(const fs::path& path) {
  return parse_matpower_case(read_text(path), path.stem().string());
}

// --------------------------------------------------------------------------- dataset

inline std::string csv_row(const double* data, Eigen::Index n) {
  std::string line;
  for (Eigen::Index i = 0; i < n; ++i) {
    if (i) line += ',';
    line += format_double(data[i]);
  }
  line += '\n';
  return line;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto p = s.find(sep, start);
    out.push_back(s.substr(start, p == std::string_view::npos ? std::string_view::npos : p - start));
    if (p == std::string_view::npos) break;
    start = p + 1;
  }
  return out;
}

inline std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (!line.empty()) out.push_back(line);
  }
  return out;
}

inline json meta_to_json(const DatasetMeta& meta, std::size_t m) {
  json j;
  j["version"] = dataset_format_version;
  j["seed"] = meta.seed;
  j["case_name"] = meta.case_name;
  j["split"] = meta.split;
  j["n_meter"] = m;
  j["counts"] = {{"normal", meta.n_normal}, {"attacked", meta.n_attacked}};
  json scales = json::array();
  for (const auto& [nu2, count] : meta.per_scale) scales.push_back({{"nu2", nu2}, {"count", count}});
  j["per_scale"] = scales;
  j["noise_sigma"] = to_std(meta.noise_sigma);
  return j;
}

/// Writes meta.json, measurements.csv, labels.csv and attacks.csv into `dir`.
/// attacks.csv rows: sample index, nu^2, then c as index:value pairs joined by ';'.
inline void save_dataset(const Dataset& ds, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const std::size_t m = ds.empty() ? static_cast<std::size_t>(ds.meta.noise_sigma.size())
                                   : static_cast<std::size_t>(ds.samples.front().z.size());
  write_text(dir / "meta.json", meta_to_json(ds.meta, m).dump(1));

  std::string z_text, y_text, a_text = "sample,nu2,c\n";
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const auto& s = ds.samples[i];
    z_text += csv_row(s.z.data(), s.z.size());
    for (Eigen::Index j = 0; j < s.y.size(); ++j) {
      if (j) y_text += ',';
      y_text += s.y[j] ? '1' : '0';
    }
    y_text += '\n';
    if (s.fdia) {
      a_text += std::to_string(i) + ',' + format_double(s.fdia->scale_variance) + ',';
      bool first = true;
      for (auto t : s.fdia->target_indices) {
        if (!first) a_text += ';';
        first = false;
        a_text += std::to_string(t) + ':' + format_double(s.fdia->c[static_cast<Eigen::Index>(t)]);
      }
      a_text += '\n';
    }
  }
  write_text(dir / "measurements.csv", z_text);
  write_text(dir / "labels.csv", y_text);
  write_text(dir / "attacks.csv", a_text);
}

/// Reads a dataset directory. The grid supplies H so that a = Hc can be
/// rebuilt for attacked samples.
inline Dataset load_dataset(const fs::path& dir, const GridModel& grid) {
  Dataset ds;
  const json meta = read_json(dir / "meta.json");
  try {
    ds.meta.seed = meta.at("seed").get<std::uint64_t>();
    ds.meta.case_name = meta.at("case_name").get<std::string>();
    ds.meta.split = meta.at("split").get<std::string>();
    ds.meta.n_normal = meta.at("counts").at("normal").get<std::size_t>();
    ds.meta.n_attacked = meta.at("counts").at("attacked").get<std::size_t>();
    for (const auto& s : meta.at("per_scale")) {
      ds.meta.per_scale.emplace_back(s.at("nu2").get<double>(), s.at("count").get<std::size_t>());
    }
    ds.meta.noise_sigma = to_vector(meta.at("noise_sigma"));
  } catch (const json::exception& e) {
    throw ParseError("meta.json: " + std::string(e.what()));
  }
  const auto m = static_cast<Eigen::Index>(grid.n_meter());
  const auto z_lines = lines_of(read_text(dir / "measurements.csv"));
  const auto y_lines = lines_of(read_text(dir / "labels.csv"));
  if (z_lines.size() != y_lines.size()) throw ParseError("measurements.csv and labels.csv differ in length");
  for (std::size_t i = 0; i < z_lines.size(); ++i) {
    const std::string where = "measurements.csv line " + std::to_string(i + 1);
    const auto zf = split(z_lines[i], ',');
    const auto yf = split(y_lines[i], ',');
    if (static_cast<Eigen::Index>(zf.size()) != m || static_cast<Eigen::Index>(yf.size()) != m) {
      throw ParseError(where + ": expected " + std::to_string(m) + " columns");
    }
    LabeledSample s;
    s.z.resize(m);
    s.y.resize(m);
    for (Eigen::Index j = 0; j < m; ++j) {
      s.z[j] = parse_double(zf[static_cast<std::size_t>(j)], where);
      s.y[j] = yf[static_cast<std::size_t>(j)] == "1" ? 1 : 0;
    }
    ds.samples.push_back(std::move(s));
  }
  const auto a_lines = lines_of(read_text(dir / "attacks.csv"));
  for (std::size_t i = 1; i < a_lines.size(); ++i) {
    const std::string where = "attacks.csv line " + std::to_string(i + 1);
    const auto f = split(a_lines[i], ',');
    if (f.size() != 3) throw ParseError(where + ": expected 3 fields");
    const auto idx = static_cast<std::size_t>(parse_double(f[0], where));
    if (idx >= ds.size()) throw ParseError(where + ": sample index out of range");
    const double nu2 = parse_double(f[1], where);
    Vector c = Vector::Zero(static_cast<Eigen::Index>(grid.n_state));
    for (auto pair : split(f[2], ';')) {
      const auto kv = split(pair, ':');
      if (kv.size() != 2) throw ParseError(where + ": bad index:value pair");
      const auto t = static_cast<Eigen::Index>(parse_double(kv[0], where));
      if (t < 0 || t >= c.size()) throw ParseError(where + ": state index out of range");
      c[t] = parse_double(kv[1], where);
    }
    ds.samples[idx].fdia = fdia_from_state_error(grid, std::move(c), nu2);
  }
  return ds;
}

// --------------------------------------------------------------------------- model

inline json arch_to_json(const nn::ArchitectureSpec& arch) {
  json layers = json::array();
  for (const auto& l : arch.layers) {
    std::visit(
        [&](const auto& s) {
          using T = std::decay_t<decltype(s)>;
          if constexpr (std::is_same_v<T, nn::ConvSpec>) {
            layers.push_back({{"type", "conv"}, {"kernel", s.kernel}, {"in_channels", s.in_channels},
                              {"out_channels", s.out_channels}, {"stride", 1}, {"padding", "same"}});
          } else if constexpr (std::is_same_v<T, nn::BatchNormSpec>) {
            layers.push_back({{"type", "batchnorm"}, {"channels", s.channels}, {"momentum", s.momentum},
                              {"epsilon", s.epsilon}});
          } else if constexpr (std::is_same_v<T, nn::LeakyReluSpec>) {
            layers.push_back({{"type", "leakyrelu"}, {"slope", s.slope}});
          } else {
            layers.push_back({{"type", "dense"}, {"in_features", s.in_features}, {"out_features", s.out_features}});
          }
        },
        l);
  }
  return {{"input_length", arch.input_length}, {"layers", layers}, {"output", "sigmoid"}};
}

inline nn::ArchitectureSpec arch_from_json(const json& j) {
  nn::ArchitectureSpec arch;
  arch.input_length = j.at("input_length").get<int>();
  for (const auto& l : j.at("layers")) {
    const auto type = l.at("type").get<std::string>();
    if (type == "conv") {
      arch.layers.push_back(nn::ConvSpec{l.at("kernel").get<int>(), l.at("in_channels").get<int>(),
                                         l.at("out_channels").get<int>()});
    } else if (type == "batchnorm") {
      arch.layers.push_back(nn::BatchNormSpec{l.at("channels").get<int>(), l.at("momentum").get<double>(),
                                              l.at("epsilon").get<double>()});
    } else if (type == "leakyrelu") {
      arch.layers.push_back(nn::LeakyReluSpec{l.at("slope").get<double>()});
    } else if (type == "dense") {
      arch.layers.push_back(nn::DenseSpec{l.at("in_features").get<int>(), l.at("out_features").get<int>()});
    } else {
      throw ParseError("model.json: unknown layer type '" + type + "'");
    }
  }
  return arch;
}

/// Parameters are stored row-major under their layer-qualified names.
inline json model_to_json(const nn::NalModel& model) {
  json j;
  j["version"] = model_format_version;
  j["case_name"] = model.case_name;
  j["arch"] = arch_to_json(model.arch);
  j["standardization"] = {{"mean", to_std(model.input_mean)}, {"scale", to_std(model.input_scale)}};
  json params = json::object();
  json stats = json::object();
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const std::string prefix = "layer" + std::to_string(i) + ".";
    std::visit(
        [&](const auto& l) {
          using T = std::decay_t<decltype(l)>;
          if constexpr (std::is_same_v<T, nn::Conv1d> || std::is_same_v<T, nn::Dense>) {
            params[prefix + "weight"] = {{"shape", {l.weight.rows(), l.weight.cols()}}, {"rows", matrix_rows(l.weight)}};
            params[prefix + "bias"] = {{"shape", {l.bias.size()}}, {"data", to_std(l.bias)}};
          } else if constexpr (std::is_same_v<T, nn::BatchNorm1d>) {
            params[prefix + "gamma"] = {{"shape", {l.gamma.size()}}, {"data", to_std(l.gamma)}};
            params[prefix + "beta"] = {{"shape", {l.beta.size()}}, {"data", to_std(l.beta)}};
            stats["layer" + std::to_string(i)] = {{"mean", to_std(l.running_mean)}, {"var", to_std(l.running_var)}};
          }
        },
        model.layers[i]);
  }
  j["parameters"] = params;
  j["bn_running_stats"] = stats;
  j["training"] = {{"seed", model.meta.seed}, {"epochs", model.meta.epochs}, {"lr", model.meta.lr},
                   {"batch_size", model.meta.batch_size}};
  return j;
}

inline nn::NalModel model_from_json(const json& j) {
  try {
    if (j.at("version").get<int>() != model_format_version) throw ParseError("unsupported model.json version");
    auto model = nn::make_model(arch_from_json(j.at("arch")), 0, j.at("case_name").get<std::string>());
    model.input_mean = to_vector(j.at("standardization").at("mean"));
    model.input_scale = to_vector(j.at("standardization").at("scale"));
    if (model.input_mean.size() != model.input_length() || model.input_scale.size() != model.input_length()) {
      throw ParseError("model.json: standardization length mismatch");
    }
    const auto& params = j.at("parameters");
    auto vec = [&](const std::string& name, Vector& dst) {
      Vector v = to_vector(params.at(name).at("data"));
      if (v.size() != dst.size()) throw ParseError("model.json: " + name + " has the wrong size");
      dst = v;
    };
    for (std::size_t i = 0; i < model.layers.size(); ++i) {
      const std::string prefix = "layer" + std::to_string(i) + ".";
      std::visit(
          [&](auto& l) {
            using T = std::decay_t<decltype(l)>;
            if constexpr (std::is_same_v<T, nn::Conv1d> || std::is_same_v<T, nn::Dense>) {
              Matrix w = matrix_from_rows(params.at(prefix + "weight").at("rows"));
              if (w.rows() != l.weight.rows() || w.cols() != l.weight.cols()) {
                throw ParseError("model.json: " + prefix + "weight has the wrong shape");
              }
              l.weight = w;
              vec(prefix + "bias", l.bias);
            } else if constexpr (std::is_same_v<T, nn::BatchNorm1d>) {
              vec(prefix + "gamma", l.gamma);
              vec(prefix + "beta", l.beta);
              const auto& st = j.at("bn_running_stats").at("layer" + std::to_string(i));
              l.running_mean = to_vector(st.at("mean"));
              l.running_var = to_vector(st.at("var"));
              if (l.running_mean.size() != l.gamma.size() || l.running_var.size() != l.gamma.size()) {
                throw ParseError("model.json: running stats size mismatch");
              }
            }
          },
          model.layers[i]);
    }
    const auto& t = j.at("training");
    model.meta = {t.at("seed").get<std::uint64_t>(), t.at("epochs").get<int>(), t.at("lr").get<double>(),
                  t.at("batch_size").get<int>()};
    model.mode = nn::Mode::eval;
    if (!nn::parameters_finite(model)) throw ParseError("model.json: non-finite parameters");
    return model;
  } catch (const json::exception& e) {
    throw ParseError(std::string("model.json: ") + e.what());
  }
}

inline void save_model(const nn::NalModel& model, const fs::path& path) {
  write_text(path, model_to_json(model).dump());
}
inline nn::NalModel load_model(const fs::path& path) { return model_from_json(read_json(path)); }

// --------------------------------------------------------------------------- traces

inline void save_trace(const std::vector<TraceRow>& trace, const fs::path& path) {
  std::string text = "iteration,loss,bdd_statistic,n_violated_labels\n";
  for (const auto& r : trace) {
    text += std::to_string(r.iteration) + ',' + format_double(r.loss) + ',' + format_double(r.bdd_statistic) +
            ',' + std::to_string(r.violated_labels) + '\n';
  }
  write_text(path, text);
}

}  // namespace lesson::io
