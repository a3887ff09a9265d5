#include <gtest/gtest.h>

#include "oracles.hpp"

using namespace lesson;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("lesson_io_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST(GridJson, RoundTrip) {
  const auto g = oracle::calibrated_case("case30");
  const auto dir = scratch("grid");
  io::save_grid(g, dir / "grid.json");
  const auto back = io::load_grid(dir / "grid.json");
  EXPECT_EQ(back.h, g.h);
  EXPECT_EQ(back.noise_sigma, g.noise_sigma);
  EXPECT_EQ(back.base_loads, g.base_loads);
  EXPECT_EQ(back.slack, g.slack);
  EXPECT_EQ(back.bus_ids, g.bus_ids);
  ASSERT_EQ(back.n_meter(), g.n_meter());
  const Vector z = g.h * Vector::LinSpaced(29, -0.2, 0.2);
  EXPECT_EQ(wls_estimate(back, z), wls_estimate(g, z));

  const auto j = io::read_json(dir / "grid.json");
  for (const char* key : {"version", "case_name", "n_bus", "meters", "h_matrix", "base_loads"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  EXPECT_EQ(j.at("h_matrix").size(), 71u);
  fs::remove_all(dir);
}

TEST(GridJson, MalformedIsParseError) {
  const auto dir = scratch("badgrid");
  io::write_text(dir / "grid.json", "{\"version\": 1,");
  EXPECT_THROW(io::load_grid(dir / "grid.json"), ParseError);
  EXPECT_THROW(io::load_grid(dir / "missing.json"), IoError);
  fs::remove_all(dir);
}

TEST(DatasetFiles, RoundTripFullPrecision) {
  const auto g = oracle::calibrated_case("case14");
  const auto ds = generate_dataset(g, {10, 5, 3});
  const auto dir = scratch("ds");
  io::save_dataset(ds, dir);
  const auto back = io::load_dataset(dir, g);
  ASSERT_EQ(back.size(), ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    EXPECT_EQ(back.samples[i].z, ds.samples[i].z);
    EXPECT_EQ(back.samples[i].y, ds.samples[i].y);
    ASSERT_EQ(back.samples[i].fdia.has_value(), ds.samples[i].fdia.has_value());
    if (ds.samples[i].fdia) {
      EXPECT_EQ(back.samples[i].fdia->c, ds.samples[i].fdia->c);
      EXPECT_EQ(back.samples[i].fdia->a, ds.samples[i].fdia->a);
      EXPECT_EQ(back.samples[i].fdia->scale_variance, ds.samples[i].fdia->scale_variance);
    }
  }
  EXPECT_EQ(back.meta.n_normal, 10u);
  EXPECT_EQ(back.meta.n_attacked, 15u);
  EXPECT_EQ(back.meta.noise_sigma, g.noise_sigma);
  EXPECT_EQ(io::read_text(dir / "attacks.csv").substr(0, 12), "sample,nu2,c");
  fs::remove_all(dir);
}

TEST(DatasetFiles, CorruptRowNamesLine) {
  const auto g = oracle::calibrated_case("case14");
  const auto dir = scratch("dsbad");
  io::save_dataset(generate_dataset(g, {3, 1, 3}), dir);
  auto text = io::read_text(dir / "measurements.csv");
  const auto second = text.find('\n') + 1;
  text.replace(second, 1, "x");
  io::write_text(dir / "measurements.csv", text);
  try {
    io::load_dataset(dir, g);
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
  fs::remove_all(dir);
}

TEST(ModelJson, RoundTripPredictsIdentically) {
  const auto& t = oracle::small_trained_case14();
  const auto dir = scratch("model");
  io::save_model(t.model, dir / "model.json");
  const auto back = io::load_model(dir / "model.json");
  EXPECT_EQ(oracle::flatten_state(back), oracle::flatten_state(t.model));
  EXPECT_EQ(back.input_mean, t.model.input_mean);
  EXPECT_EQ(back.input_scale, t.model.input_scale);
  EXPECT_EQ(back.meta.seed, t.model.meta.seed);
  for (std::size_t i = 0; i < 20; ++i) {
    const auto& z = t.test.samples[i].z;
    EXPECT_EQ(nn::predict(back, z).logits, nn::predict(t.model, z).logits);
  }
  const auto j = io::read_json(dir / "model.json");
  for (const char* key : {"version", "case_name", "arch", "bn_running_stats", "training"}) {
    EXPECT_TRUE(j.contains(key)) << key;
  }
  fs::remove_all(dir);
}

TEST(ModelJson, ShapeMismatchRejected) {
  const auto& t = oracle::small_trained_case14();
  auto j = io::model_to_json(t.model);
  j["standardization"]["mean"].erase(0);
  EXPECT_THROW(io::model_from_json(j), Error);
  j = io::model_to_json(t.model);
  j["parameters"]["layer0.weight"]["rows"].erase(0);
  EXPECT_THROW(io::model_from_json(j), Error);
}

TEST(Trace, Columns) {
  const auto dir = scratch("trace");
  io::save_trace({{0, 1.5, 10.25, 3}, {1, 0.0, 10.25, 0}}, dir / "trace.csv");
  EXPECT_EQ(io::read_text(dir / "trace.csv"),
            "iteration,loss,bdd_statistic,n_violated_labels\n0,1.5,10.25,3\n1,0,10.25,0\n");
  fs::remove_all(dir);
}

TEST(Numbers, ShortestRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(-1e3, 1e3);
  for (int i = 0; i < 1000; ++i) {
    const double v = u(rng) * std::pow(10.0, static_cast<int>(rng() % 20) - 10);
    EXPECT_EQ(io::parse_double(io::format_double(v), "t"), v);
  }
  EXPECT_THROW(io::parse_double("1.5x", "t"), ParseError);
}
