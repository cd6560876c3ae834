#include <doctest.h>

#include <sstream>

#include "support.hpp"
#include "xfb/arch.hpp"
#include "xfb/error.hpp"
#include "xfb/experiments.hpp"
#include "xfb/nn.hpp"

using namespace xfb;
using xfb::test::TempDir;

namespace {

// Small enough to run in seconds.
std::vector<std::pair<std::string, std::string>> tiny() {
  return {{"classes", "4"},          {"samples_per_class", "30"}, {"victim_epochs", "3"},
          {"pool_size", "400"},      {"budget", "200"},           {"surrogate_epochs", "3"},
          {"foreign_prototypes", "20"}, {"skewed_budget", "120"},  {"backbone_families", "2"},
          {"backbone_prototypes", "3"}, {"backbone_samples", "15"}, {"backbone_epochs", "2"},
          {"detector_out_size", "120"}, {"eval_pool_size", "60"}};
}

ExperimentResult run_tiny(const std::string& scenario, const std::string& out, std::vector<std::uint64_t> seeds = {1}) {
  ExperimentSpec s;
  s.scenario = scenario;
  s.seeds = std::move(seeds);
  s.overrides = tiny();
  s.output = out;
  return run_experiment(s);
}

std::size_t lines(const std::string& text) {
  std::size_t n = 0;
  for (char c : text) n += c == '\n';
  return n;
}

}  // namespace

TEST_CASE("experiments: recovery ratio and rounding") {
  CHECK(recovery_ratio(0.9, 0.95) == doctest::Approx(0.9 / 0.95));
  CHECK_THROWS_AS(recovery_ratio(0.5, 0.0), Error);
  CHECK(round2(0.947368) == 0.95);
  CHECK(round2(0.944) == 0.94);
}

TEST_CASE("experiments: per-class accuracies average back to the accuracy") {
  const auto arch = ArchitectureSpec::parse("family=mlp input=1x4x1 hidden=dense:5 classes=3");
  const Model m = xfb::test::random_model(arch, 3);
  Tensor x({90, 4});
  std::vector<std::size_t> y(90);
  Rng rng(4);
  for (double& v : x.values()) v = rng.normal();
  std::vector<double> counts(3, 0.0);
  for (std::size_t i = 0; i < 90; ++i) counts[y[i] = (i * 7) % 3] += 1.0;
  const auto per = per_class_accuracy(m, x, y, 3);
  double weighted = 0.0;
  for (std::size_t c = 0; c < 3; ++c) weighted += per[c] * counts[c] / 90.0;
  CHECK(std::abs(weighted - accuracy(m, x, y)) < 1e-12);
  std::vector<std::size_t> missing(90, 0);
  CHECK_THROWS_AS(per_class_accuracy(m, x, missing, 3), Error);
}

TEST_CASE("experiments: overrides and spec validation") {
  ScenarioParams p;
  p.apply_override("budget", "123");
  CHECK(p.budget == 123);
  p.apply_override("granularity", "topk:2");
  CHECK(p.granularity == "topk:2");
  CHECK_THROWS_AS(p.apply_override("nope", "1"), Error);
  CHECK_THROWS_AS(p.apply_override("budget", "-4"), Error);
  CHECK_THROWS_AS(p.apply_override("shared_weight", "abc"), Error);
  CHECK(p.to_json()["budget"] == 123);
  CHECK(scenario_defaults("E3").victim_arch == "cnn");

  ExperimentSpec s;
  s.scenario = "E9";
  s.output = "x.json";
  CHECK_THROWS_AS(s.validate(), Error);
  s.scenario = "E1";
  s.seeds = {1, 1};
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("experiments: building blocks are seeded") {
  ScenarioParams p;
  for (const auto& [k, v] : tiny()) p.apply_override(k, v);
  CHECK(attacker_pool(p, 1, 50, 0.0).inputs == attacker_pool(p, 1, 50, 0.0).inputs);
  CHECK(attacker_pool(p, 1, 50, 0.0).inputs != attacker_pool(p, 2, 50, 0.0).inputs);
  CHECK(attacker_pool(p, 1, 40, 0.5).victim_count() == 20);
  CHECK(victim_task(p, 1).classes == 4);
  const LabeledDataset g = generic_dataset(p, 1);
  CHECK(g.classes == 6);
  CHECK(g.size() == 6 * 15);
}

TEST_CASE("experiments: E1 report is deterministic and verifiable") {
  TempDir a("e1a"), b("e1b");
  const ExperimentResult ra = run_tiny("E1", a.file("r.json"), {1, 2});
  const ExperimentResult rb = run_tiny("E1", b.file("r.json"), {1, 2});
  CHECK(read_file(a.file("r.json")) == read_file(b.file("r.json")));
  CHECK(canonical_json(ra.report) == canonical_json(rb.report));
  CHECK(read_file(a.file("r.json")) == canonical_json_pretty(ra.report));

  const Json& r = ra.report;
  CHECK(r["format"] == "xfb-experiment-report");
  CHECK(r["scenario"] == "E1");
  REQUIRE(r["records"].size() == 2);
  for (const Json& rec : r["records"]) {
    CHECK(rec["accepted"] == 200);
    CHECK(rec["recovery"].get<double>() ==
          doctest::Approx(rec["surrogate_accuracy"].get<double>() / rec["victim_accuracy"].get<double>()));
    std::size_t hist = 0;
    for (const auto& h : rec["histogram"]) hist += h.get<std::size_t>();
    CHECK(hist == 200);
  }
  CHECK(lines(records_csv(r)) == 3);
  CHECK(lines(read_file(a.file("r.records.csv"))) == 3);
  CHECK(lines(histogram_csv(r)) == 1 + 2 * 4);
  CHECK(r["checks"].is_array());
  CHECK(r["checks"] == scenario_checks(r));

  for (std::size_t i = 0; i < 2; ++i) {
    const Json v = verify_report(a.file("r.json"), i);
    CHECK(v["ok"] == true);
  }
  CHECK_THROWS_AS(verify_report(a.file("r.json"), 5), Error);
}

TEST_CASE("experiments: verify notices a tampered report") {
  TempDir d("e1t");
  run_tiny("E1", d.file("r.json"));
  Json r = Json::parse(read_file(d.file("r.json")));
  r["records"][0]["surrogate_accuracy"] = 0.123;
  write_file(d.file("r.json"), canonical_json_pretty(r));
  CHECK(verify_report(d.file("r.json"), 0)["ok"] == false);
}

TEST_CASE("experiments: E2 covers every granularity") {
  TempDir d("e2");
  const Json r = run_tiny("E2", d.file("r.json")).report;
  std::vector<std::string> variants;
  for (const Json& rec : r["records"]) variants.push_back(rec["variant"]);
  CHECK(variants == std::vector<std::string>{"full", "topk:3", "rounded:2", "label"});
  CHECK(r["aggregate"].contains("label"));
  CHECK(verify_report(d.file("r.json"), 0)["ok"] == true);
}

TEST_CASE("experiments: E4 and E5 produce their variants") {
  TempDir d("e45");
  const Json e4 = run_tiny("E4", d.file("e4.json")).report;
  CHECK(e4["records"].size() == 4);
  CHECK(e4["aggregate"].contains("skewed_oversample"));
  const Json e5 = run_tiny("E5", d.file("e5.json")).report;
  CHECK(e5["records"].size() == 4 * 5);
  CHECK(e5["aggregate"].contains("binary@0.00"));
  CHECK(e5["aggregate"].contains("mahalanobis@1.00"));
  CHECK(lines(sweep_csv(e5)) == 1 + 4 * 5);
  CHECK(verify_report(d.file("e5.json"), 0)["ok"] == true);
}
