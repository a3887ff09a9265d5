#pragma once

// Attack campaigns: pool selection, grid sweeps over (variant, scale, lr, mu,
// attack cost) and CSV/JSON reports.

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "lesson/attack.hpp"
#include "lesson/io.hpp"

namespace lesson {

struct ExperimentPlan {
  std::string case_name;
  std::filesystem::path dataset;  // dataset directory (attack pool source)
  std::filesystem::path model;    // model.json
  std::filesystem::path grid;     // grid.json
  std::vector<Variant> variants{Variant::lesson1, Variant::lesson2, Variant::lesson3, Variant::lesson4};
  std::vector<double> scales{fdia_scales[0]};
  std::vector<double> lrs{1e-3};
  std::vector<double> mus{1.0};
  std::vector<double> uncontrolled_fracs{0.0};
  std::size_t n_attack_samples = 100;
  std::uint64_t seed = 0;
  int max_iter = 500;
  ObjectiveMode objective = HingeObjective{};
  unsigned workers = 1;
};

struct CellKey {
  Variant variant;
  double scale;
  double lr;
  double mu;
  double uncontrolled_frac = 0.0;

  std::string str() const {
    return variant_name(variant) + "|" + io::format_double(scale) + "|" + io::format_double(lr) + "|" +
           io::format_double(mu) + "|" + io::format_double(uncontrolled_frac);
  }
  bool operator==(const CellKey&) const = default;
};

struct CellResult {
  CellKey key;
  std::string case_name;
  std::size_t n_samples = 0;
  double success_rate = 0.0;
  std::optional<double> rho_c;
  std::optional<double> rho_a;
  double mean_iterations = 0.0;
  double wall_time = 0.0;  // seconds
  std::vector<AttackResult> runs;  // kept in memory only, not reported
};

/// Indices of attacked samples at one FDIA scale, all completely correctly
/// predicted by the locator.
struct AttackPool {
  double scale = 0.0;
  std::vector<std::size_t> indices;
};

inline bool completely_correct(const nn::NalModel& model, const LabeledSample& s) {
  return (nn::predict_labels(model, s.z).array() == s.y.array()).all();
}

/// For each scale, n attacked samples drawn uniformly (seeded) among those the
/// model labels entirely correctly.
inline std::vector<AttackPool> select_attack_pool(const nn::NalModel& model, const Dataset& ds, std::size_t n,
                                                  const std::vector<double>& scales, std::uint64_t seed) {
  require(n >= 1, "select_attack_pool: n must be >= 1");
  Matrix z = measurement_matrix(ds);
  const Eigen::MatrixXi predicted = ds.empty() ? Eigen::MatrixXi() : nn::predict_label_matrix(model, z);
  std::vector<AttackPool> pools;
  for (double scale : scales) {
    std::vector<std::size_t> eligible;
    for (std::size_t i = 0; i < ds.size(); ++i) {
      const auto& s = ds.samples[i];
      if (!s.fdia || s.fdia->scale_variance != scale) continue;
      if ((predicted.col(static_cast<Eigen::Index>(i)).array() == s.y.array()).all()) eligible.push_back(i);
    }
    if (eligible.size() < n) {
      throw PoolError("only " + std::to_string(eligible.size()) + " completely correctly predicted samples at scale " +
                          scale_name(scale) + ", need " + std::to_string(n),
                      eligible.size());
    }
    auto rng = make_rng(seed, "pool", io::format_double(scale));
    std::shuffle(eligible.begin(), eligible.end(), rng);
    eligible.resize(n);
    pools.push_back({scale, std::move(eligible)});
  }
  return pools;
}

/// Fresh attacked samples at one scale, for campaigns that do not read a
/// stored dataset.
inline Dataset fresh_attacked_samples(const GridModel& grid, double scale, std::size_t count, std::uint64_t seed) {
  if (!grid.has_noise()) throw ContractError("grid has no noise_sigma; generate it with gen-data");
  Dataset ds;
  ds.meta.seed = seed;
  ds.meta.case_name = grid.case_name;
  ds.meta.split = "fresh";
  ds.meta.noise_sigma = grid.noise_sigma;
  for (std::size_t i = 0; i < count; ++i) {
    auto rng = make_rng(seed, "fresh", io::format_double(scale), i);
    auto draw = sample_state(grid, rng);
    LabeledSample s;
    s.z = make_measurements(grid, draw.theta, rng);
    auto spec = random_fdia(grid, scale, rng);
    s.z += spec.a;
    s.y = labels_from_attack(spec.a);
    s.fdia = std::move(spec);
    s.x_true = std::move(draw.theta);
    ds.samples.push_back(std::move(s));
  }
  recount(ds);
  return ds;
}

namespace detail {

template <typename Fn>
void parallel_for(std::size_t count, unsigned workers, Fn&& fn) {
  workers = std::max(1u, std::min<unsigned>(workers, static_cast<unsigned>(count)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> threads;
  std::vector<std::exception_ptr> errors(workers);
  for (unsigned w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < count; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace detail

/// Attacks every pooled sample for one grid cell. Per-sample randomness (the
/// uncontrolled meter draw) comes from (seed, cell key, sample index).
inline CellResult run_cell(const nn::NalModel& model, const GridModel& grid, const Dataset& ds,
                           const AttackPool& pool, const CellKey& key, const ExperimentPlan& plan) {
  const auto start = std::chrono::steady_clock::now();
  CellResult cell;
  cell.key = key;
  cell.case_name = plan.case_name.empty() ? grid.case_name : plan.case_name;
  cell.n_samples = pool.indices.size();
  cell.runs.resize(pool.indices.size());

  detail::parallel_for(pool.indices.size(), plan.workers, [&](std::size_t k) {
    const auto& sample = ds.samples[pool.indices[k]];
    if (!completely_correct(model, sample)) {
      throw PoolError("pooled sample " + std::to_string(pool.indices[k]) + " is not completely correctly predicted", 0);
    }
    AttackConfig cfg;
    cfg.variant = key.variant;
    cfg.mu = key.mu;
    cfg.lr = key.lr;
    cfg.max_iter = plan.max_iter;
    cfg.objective = plan.objective;
    cfg.seed = derive_seed(plan.seed, key.str(), k);
    if (key.uncontrolled_frac > 0.0) {
      Rng rng(cfg.seed);
      cfg.uncontrolled_meters = draw_uncontrolled(*sample.fdia, key.uncontrolled_frac, rng);
    }
    try {
      cell.runs[k] = run_attack(model, grid, sample.z, *sample.fdia, cfg);
    } catch (const Error& e) {
      throw Error(e.kind(), "cell " + key.str() + ": " + e.what());
    }
  });

  const auto metrics = perturbation_metrics(cell.runs);
  cell.success_rate = metrics.success_rate;
  cell.rho_c = metrics.rho_c;
  cell.rho_a = metrics.rho_a;
  double iters = 0.0;
  for (const auto& r : cell.runs) iters += r.iterations_used;
  cell.mean_iterations = cell.runs.empty() ? 0.0 : iters / static_cast<double>(cell.runs.size());
  cell.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return cell;
}

/// Draws fresh attacked samples until n of them are completely correctly
/// predicted, giving up after `cap` candidates (0 picks 50n + 100).
inline Dataset fresh_attack_pool(const nn::NalModel& model, const GridModel& grid, double scale, std::size_t n,
                                 std::uint64_t seed, std::size_t cap = 0) {
  Dataset out;
  if (cap == 0) cap = 50 * n + 100;
  auto candidates = fresh_attacked_samples(grid, scale, cap, seed);
  const Eigen::MatrixXi predicted = nn::predict_label_matrix(model, measurement_matrix(candidates));
  for (std::size_t i = 0; i < candidates.size() && out.size() < n; ++i) {
    auto& s = candidates.samples[i];
    if ((predicted.col(static_cast<Eigen::Index>(i)).array() == s.y.array()).all()) out.samples.push_back(std::move(s));
  }
  if (out.size() < n) {
    throw PoolError("only " + std::to_string(out.size()) + " of " + std::to_string(cap) +
                        " fresh samples are completely correctly predicted",
                    out.size());
  }
  out.meta = candidates.meta;
  recount(out);
  return out;
}

/// Every (variant, scale, lr, mu, uncontrolled fraction) cell in plan order.
inline std::vector<CellKey> plan_cells(const ExperimentPlan& plan) {
  std::vector<CellKey> keys;
  for (double scale : plan.scales)
    for (auto v : plan.variants)
      for (double lr : plan.lrs)
        for (double mu : plan.mus)
          for (double frac : plan.uncontrolled_fracs) keys.push_back({v, scale, lr, mu, frac});
  return keys;
}

inline std::vector<CellResult> run_plan(const nn::NalModel& model, const GridModel& grid, const Dataset& ds,
                                        const ExperimentPlan& plan, std::vector<CellKey> cells = {}) {
  require(plan.n_attack_samples >= 1, "plan: n_attack_samples must be >= 1");
  if (cells.empty()) cells = plan_cells(plan);
  std::vector<double> scales;
  for (const auto& c : cells) {
    if (std::find(scales.begin(), scales.end(), c.scale) == scales.end()) scales.push_back(c.scale);
  }
  const auto pools = select_attack_pool(model, ds, plan.n_attack_samples, scales, plan.seed);
  std::vector<CellResult> out;
  for (const auto& key : cells) {
    const auto& pool = *std::find_if(pools.begin(), pools.end(), [&](const auto& p) { return p.scale == key.scale; });
    out.push_back(run_cell(model, grid, ds, pool, key, plan));
  }
  return out;
}

/// Loads the artifacts a plan references, then runs it.
inline std::vector<CellResult> run_plan(const ExperimentPlan& plan) {
  for (const auto& p : {plan.model, plan.grid, plan.dataset}) {
    if (!std::filesystem::exists(p)) throw IoError("plan references missing artifact " + p.string());
  }
  const auto grid = io::load_grid(plan.grid);
  const auto model = io::load_model(plan.model);
  const auto ds = io::load_dataset(plan.dataset, grid);
  return run_plan(model, grid, ds, plan);
}

// --------------------------------------------------------------------------- reports

inline const std::vector<std::string>& report_columns() {
  static const std::vector<std::string> cols{"case", "variant", "scale", "lr",    "mu",     "n",
                                             "success_rate", "rho_c", "rho_a", "mean_iters", "wall_s"};
  return cols;
}

inline std::string results_csv(const std::vector<CellResult>& results) {
  std::string text;
  for (std::size_t i = 0; i < report_columns().size(); ++i) text += (i ? "," : "") + report_columns()[i];
  text += '\n';
  auto opt = [](const std::optional<double>& v) { return v ? io::format_double(*v) : std::string(); };
  for (const auto& r : results) {
    text += r.case_name + ',' + variant_name(r.key.variant) + ',' + io::format_double(r.key.scale) + ',' +
            io::format_double(r.key.lr) + ',' + io::format_double(r.key.mu) + ',' + std::to_string(r.n_samples) +
            ',' + io::format_double(r.success_rate) + ',' + opt(r.rho_c) + ',' + opt(r.rho_a) + ',' +
            io::format_double(r.mean_iterations) + ',' + io::format_double(r.wall_time) + '\n';
  }
  return text;
}

inline io::json results_json(const std::vector<CellResult>& results) {
  io::json cells = io::json::array();
  for (const auto& r : results) {
    io::json c;
    c["case"] = r.case_name;
    c["key"] = {{"variant", variant_name(r.key.variant)}, {"scale", r.key.scale}, {"lr", r.key.lr},
                {"mu", r.key.mu}, {"uncontrolled_frac", r.key.uncontrolled_frac}};
    c["n"] = r.n_samples;
    c["success_rate"] = r.success_rate;
    c["rho_c"] = r.rho_c ? io::json(*r.rho_c) : io::json(nullptr);
    c["rho_a"] = r.rho_a ? io::json(*r.rho_a) : io::json(nullptr);
    c["mean_iters"] = r.mean_iterations;
    c["wall_s"] = r.wall_time;
    cells.push_back(c);
  }
  return {{"version", 1}, {"cells", cells}};
}

/// Writes results.csv and results.json into `dir`.
inline void emit_report(const std::vector<CellResult>& results, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  io::write_text(dir / "results.csv", results_csv(results));
  io::write_text(dir / "results.json", results_json(results).dump(1));
}

/// Decodes a results.csv back into cells (the in-memory runs are not part of
/// the report and stay empty).
inline std::vector<CellResult> parse_results_csv(const std::string& text) {
  const auto lines = io::lines_of(text);
  if (lines.empty()) throw ParseError("results.csv: missing header");
  std::vector<CellResult> out;
  for (std::size_t i = 1; i < lines.size(); ++i) {
    const std::string where = "results.csv line " + std::to_string(i + 1);
    const auto f = io::split(lines[i], ',');
    if (f.size() != report_columns().size()) throw ParseError(where + ": wrong column count");
    CellResult r;
    r.case_name = std::string(f[0]);
    r.key.variant = variant_from_name(std::string(f[1]));
    r.key.scale = io::parse_double(f[2], where);
    r.key.lr = io::parse_double(f[3], where);
    r.key.mu = io::parse_double(f[4], where);
    r.n_samples = static_cast<std::size_t>(io::parse_double(f[5], where));
    r.success_rate = io::parse_double(f[6], where);
    if (!f[7].empty()) r.rho_c = io::parse_double(f[7], where);
    if (!f[8].empty()) r.rho_a = io::parse_double(f[8], where);
    r.mean_iterations = io::parse_double(f[9], where);
    r.wall_time = io::parse_double(f[10], where);
    out.push_back(std::move(r));
  }
  return out;
}

inline std::vector<CellResult> parse_results_json(const io::json& j) {
  std::vector<CellResult> out;
  for (const auto& c : j.at("cells")) {
    CellResult r;
    r.case_name = c.at("case").get<std::string>();
    r.key.variant = variant_from_name(c.at("key").at("variant").get<std::string>());
    r.key.scale = c.at("key").at("scale").get<double>();
    r.key.lr = c.at("key").at("lr").get<double>();
    r.key.mu = c.at("key").at("mu").get<double>();
    r.key.uncontrolled_frac = c.at("key").at("uncontrolled_frac").get<double>();
    r.n_samples = c.at("n").get<std::size_t>();
    r.success_rate = c.at("success_rate").get<double>();
    if (!c.at("rho_c").is_null()) r.rho_c = c.at("rho_c").get<double>();
    if (!c.at("rho_a").is_null()) r.rho_a = c.at("rho_a").get<double>();
    r.mean_iterations = c.at("mean_iters").get<double>();
    r.wall_time = c.at("wall_s").get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

// --------------------------------------------------------------------------- plan files

namespace detail {

inline std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  for (auto part : io::split(v, ',')) {
    const auto t = std::string(lesson::detail::trim(part));
    if (!t.empty()) out.push_back(t);
  }
  return out;
}

inline std::vector<double> parse_doubles(const std::string& v, const std::string& key) {
  std::vector<double> out;
  for (const auto& s : split_list(v)) out.push_back(io::parse_double(s, "plan key '" + key + "'"));
  return out;
}

}  // namespace detail

/// Parses a `key = value` plan file. Lines starting with '#' are comments.
/// Relative paths resolve against `base_dir`. Recognized keys: case, data,
/// model, grid, variants, scales, lrs, mus, uncontrolled_fracs, n, seed,
/// max_iter, workers, objective (hinge|penalty), lambda.
inline ExperimentPlan parse_plan(const std::string& text, const std::filesystem::path& base_dir = {}) {
  ExperimentPlan plan;
  std::map<std::string, std::string> kv;
  int line_no = 0;
  for (const auto& raw : io::split(text, '\n')) {
    ++line_no;
    auto line = raw.substr(0, raw.find('#'));
    line = lesson::detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ParseError("plan line " + std::to_string(line_no) + ": expected key = value");
    }
    kv[std::string(lesson::detail::trim(line.substr(0, eq)))] = std::string(lesson::detail::trim(line.substr(eq + 1)));
  }
  auto path = [&](const std::string& v) {
    std::filesystem::path p(v);
    return p.is_absolute() || base_dir.empty() ? p : base_dir / p;
  };
  double lambda = 1.0;
  std::string objective = "hinge";
  for (const auto& [key, value] : kv) {
    if (key == "case") plan.case_name = value;
    else if (key == "data") plan.dataset = path(value);
    else if (key == "model") plan.model = path(value);
    else if (key == "grid") plan.grid = path(value);
    else if (key == "variants") {
      plan.variants.clear();
      for (const auto& v : detail::split_list(value)) plan.variants.push_back(variant_from_name(v));
    } else if (key == "scales") {
      plan.scales.clear();
      for (const auto& v : detail::split_list(value)) {
        plan.scales.push_back(std::isdigit(static_cast<unsigned char>(v.front())) ? io::parse_double(v, "scales")
                                                                                 : scale_from_name(v));
      }
    } else if (key == "lrs") plan.lrs = detail::parse_doubles(value, key);
    else if (key == "mus") plan.mus = detail::parse_doubles(value, key);
    else if (key == "uncontrolled_fracs") plan.uncontrolled_fracs = detail::parse_doubles(value, key);
    else if (key == "n") plan.n_attack_samples = static_cast<std::size_t>(io::parse_double(value, key));
    else if (key == "seed") plan.seed = std::stoull(value);
    else if (key == "max_iter") plan.max_iter = static_cast<int>(io::parse_double(value, key));
    else if (key == "workers") plan.workers = static_cast<unsigned>(io::parse_double(value, key));
    else if (key == "objective") objective = value;
    else if (key == "lambda") lambda = io::parse_double(value, key);
    else throw ParseError("plan: unknown key '" + key + "'");
  }
  if (objective == "penalty") plan.objective = PenaltyObjective{lambda};
  else if (objective != "hinge") throw ParseError("plan: objective must be hinge or penalty");
  if (plan.variants.empty() || plan.scales.empty() || plan.lrs.empty() || plan.mus.empty() ||
      plan.uncontrolled_fracs.empty()) {
    throw ParseError("plan: every sweep list needs at least one value");
  }
  if (plan.n_attack_samples < 1) throw ParseError("plan: n must be >= 1");
  return plan;
}

}  // namespace lesson
