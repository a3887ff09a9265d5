#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "lesson/harness.hpp"
#include "lesson/runtime.hpp"

namespace fs = std::filesystem;
using namespace lesson;

namespace {

constexpr std::size_t noise_pool_size = 1000;
constexpr double train_fraction = 2.0 / 3.0;

void print_json_line(const io::json& j) { std::cout << j.dump() << std::endl; }

int gen_data(const fs::path& case_file, const fs::path& out, std::size_t n_normal, std::size_t n_attacked,
             std::uint64_t seed) {
  const auto raw = io::load_case_file(case_file);
  for (const auto& w : raw.warnings) std::cerr << "warning: " << w << '\n';
  auto grid = build_grid_model(raw);
  grid = calibrate_noise(std::move(grid), noise_free_pool(grid, noise_pool_size, derive_seed(seed, "noise")));

  const auto ds = generate_dataset(grid, {n_normal, n_attacked, seed});
  auto [train, test] = split_dataset(ds, train_fraction, seed);
  fs::create_directories(out);
  io::save_grid(grid, out / "grid.json");
  io::save_dataset(train, out / "train");
  io::save_dataset(test, out / "test");
  print_json_line({{"case", grid.case_name},
                   {"n_bus", grid.n_bus},
                   {"n_meter", grid.n_meter()},
                   {"train", train.size()},
                   {"test", test.size()}});
  return 0;
}

// Accepts either a dataset directory or a gen-data output directory (uses
// its train/ or test/ part).
fs::path dataset_dir(const fs::path& data, const char* part) {
  if (fs::exists(data / "meta.json")) return data;
  if (fs::exists(data / part / "meta.json")) return data / part;
  throw IoError("no dataset found at " + data.string());
}

fs::path grid_path(const fs::path& data) {
  for (auto p : {data / "grid.json", data.parent_path() / "grid.json"}) {
    if (fs::exists(p)) return p;
  }
  throw IoError("no grid.json next to " + data.string());
}

int train_cmd(const fs::path& data, const fs::path& out, int epochs, double lr, int batch, std::uint64_t seed) {
  const auto grid = io::load_grid(grid_path(data));
  const auto ds = io::load_dataset(dataset_dir(data, "train"), grid);
  auto model = nn::make_model(nn::locator_architecture(grid.n_bus, static_cast<int>(grid.n_meter())), seed,
                              grid.case_name);
  const auto report = nn::train(model, measurement_matrix(ds), label_matrix(ds), {epochs, batch, lr, seed});
  io::save_model(model, out);
  print_json_line({{"epochs", report.epochs_run},
                   {"final_loss", report.final_loss},
                   {"train_meter_accuracy", report.meter_accuracy},
                   {"train_row_accuracy", report.row_accuracy},
                   {"loss_trace", report.loss_trace}});
  return 0;
}

int eval_cmd(const fs::path& model_path, const fs::path& data) {
  const auto model = io::load_model(model_path);
  const auto grid = io::load_grid(grid_path(data));
  const auto ds = io::load_dataset(dataset_dir(data, "test"), grid);
  const auto acc = nn::evaluate(model, measurement_matrix(ds), label_matrix(ds));
  print_json_line({{"samples", ds.size()}, {"meter_accuracy", acc.meter}, {"row_accuracy", acc.row}});
  return 0;
}

struct AttackArgs {
  fs::path model, grid, data, out = ".";
  std::string variant, scale;
  double lr = 1e-3, mu = 1.0, uncontrolled_frac = 0.0;
  std::size_t n = 1;
  int max_iter = 500;
  bool trace = false;
  std::uint64_t seed = 0;
};

int attack_cmd(const AttackArgs& a) {
  const auto model = io::load_model(a.model);
  const auto grid = io::load_grid(a.grid);
  const double scale = scale_from_name(a.scale);

  ExperimentPlan plan;
  plan.case_name = grid.case_name;
  plan.variants = {variant_from_name(a.variant)};
  plan.scales = {scale};
  plan.lrs = {a.lr};
  plan.mus = {a.mu};
  plan.uncontrolled_fracs = {a.uncontrolled_frac};
  plan.n_attack_samples = a.n;
  plan.seed = a.seed;
  plan.max_iter = a.max_iter;

  const Dataset ds = a.data.empty() ? fresh_attack_pool(model, grid, scale, a.n, a.seed)
                                    : io::load_dataset(dataset_dir(a.data, "test"), grid);
  const auto key = plan_cells(plan).front();
  const auto pool = select_attack_pool(model, ds, a.n, {scale}, a.seed);
  auto cell = run_cell(model, grid, ds, pool.front(), key, plan);

  if (a.trace) {
    // Traces need the per-iteration record, so rerun the first sample with it on.
    AttackConfig cfg;
    cfg.variant = key.variant;
    cfg.mu = key.mu;
    cfg.lr = key.lr;
    cfg.max_iter = plan.max_iter;
    cfg.seed = derive_seed(plan.seed, key.str(), std::size_t{0});
    cfg.record_trace = true;
    const auto& sample = ds.samples[pool.front().indices.front()];
    if (key.uncontrolled_frac > 0.0) {
      Rng rng(cfg.seed);
      cfg.uncontrolled_meters = draw_uncontrolled(*sample.fdia, key.uncontrolled_frac, rng);
    }
    const auto traced = run_attack(model, grid, sample.z, *sample.fdia, cfg);
    fs::create_directories(a.out);
    io::save_trace(traced.trace, a.out / "trace.csv");
  }
  emit_report({cell}, a.out);
  print_json_line(results_json({cell})["cells"][0]);
  return 0;
}

int sweep_cmd(const fs::path& plan_file, const fs::path& out) {
  const auto plan = parse_plan(io::read_text(plan_file), plan_file.parent_path());
  const auto results = run_plan(plan);
  emit_report(results, out);
  print_json_line({{"cells", results.size()}, {"out", out.string()}});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"FDIA locator training and LESSON attack toolkit"};
  app.require_subcommand(1);

  fs::path case_file, out_dir;
  std::size_t n_normal = 0, n_attacked = 0;
  std::uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-data", "Generate a labeled dataset from a MATPOWER case");
  gen->add_option("--case", case_file, "MATPOWER .m case file")->required();
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--n-normal", n_normal, "Normal samples")->required();
  gen->add_option("--n-attacked-per-scale", n_attacked, "Attacked samples per FDIA scale")->required();
  gen->add_option("--seed", seed)->required();

  fs::path data_dir, model_out;
  int epochs = 30, batch = 64;
  double train_lr = 1e-3;
  std::uint64_t train_seed = 0;
  auto* tr = app.add_subcommand("train", "Train a locator");
  tr->add_option("--data", data_dir, "gen-data output or dataset directory")->required();
  tr->add_option("--out", model_out, "model.json path")->required();
  tr->add_option("--epochs", epochs);
  tr->add_option("--lr", train_lr);
  tr->add_option("--batch", batch);
  tr->add_option("--seed", train_seed)->required();

  fs::path eval_model, eval_data;
  auto* ev = app.add_subcommand("eval", "Evaluate a locator");
  ev->add_option("--model", eval_model)->required();
  ev->add_option("--data", eval_data)->required();

  AttackArgs aa;
  auto* at = app.add_subcommand("attack", "Run a LESSON attack on n attacked samples");
  at->add_option("--model", aa.model)->required();
  at->add_option("--grid", aa.grid)->required();
  at->add_option("--variant", aa.variant)->required();
  at->add_option("--scale", aa.scale, "small|medium|large")->required();
  at->add_option("--lr", aa.lr);
  at->add_option("--mu", aa.mu);
  at->add_option("--n", aa.n);
  at->add_option("--uncontrolled-frac", aa.uncontrolled_frac);
  at->add_option("--max-iter", aa.max_iter);
  at->add_option("--data", aa.data, "Attack pool source (fresh samples when omitted)");
  at->add_option("--out", aa.out, "Directory for results and trace.csv");
  at->add_flag("--trace", aa.trace);
  at->add_option("--seed", aa.seed)->required();

  fs::path plan_file, sweep_out;
  auto* sw = app.add_subcommand("sweep", "Run an experiment plan");
  sw->add_option("--plan", plan_file)->required();
  sw->add_option("--out", sweep_out)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*gen) return gen_data(case_file, out_dir, n_normal, n_attacked, seed);
    if (*tr) return train_cmd(data_dir, model_out, epochs, train_lr, batch, train_seed);
    if (*ev) return eval_cmd(eval_model, eval_data);
    if (*at) return attack_cmd(aa);
    if (*sw) return sweep_cmd(plan_file, sweep_out);
  } catch (const Error& e) {
    std::cerr << "error: " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
