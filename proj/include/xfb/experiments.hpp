#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "xfb/datagen.hpp"
#include "xfb/json.hpp"
#include "xfb/model.hpp"
#include "xfb/train.hpp"

namespace xfb {

// acc_surrogate / acc_victim; validation error when acc_victim <= 0.
double recovery_ratio(double acc_surrogate, double acc_victim);
// Rounded to 2 decimals for display.
double round2(double value);

// Accuracy restricted to each true class; validation error naming any class
// with no samples.
std::vector<double> per_class_accuracy(const Model& model, const Tensor& inputs,
                                       std::span<const std::size_t> labels, std::size_t classes);

// Every tunable of the scenarios, with the committed defaults. Overrides use
// the same key names (see docs/config.md).
struct ScenarioParams {
  // victim task
  std::size_t classes = 10;
  std::size_t samples_per_class = 300;
  double noise_sigma = 0.25;
  std::size_t jitter = 0;
  double smoothness = 3.0;
  double shared_weight = 0.8;
  std::string victim_arch = "mlp";
  std::size_t victim_epochs = 30;
  // attacker
  std::size_t pool_size = 20000;
  double alpha = 0.0;
  std::size_t foreign_prototypes = 1000;
  double foreign_noise = 0.1;
  std::size_t budget = 10000;
  std::size_t concurrency = 1;
  std::string granularity = "full";
  std::string surrogate_arch = "mlp";
  std::size_t surrogate_epochs = 50;
  std::string targets = "soft";
  std::string balance = "none";
  // E3
  std::string mismatch_arch = "mlp";
  // E4
  std::size_t skewed_budget = 2000;
  double skew_ratio = 0.02;  // weight of the rarest class relative to the most common
  std::string skewed_targets = "hard";
  // E5
  std::size_t backbone_families = 4;
  std::size_t backbone_prototypes = 10;
  std::size_t backbone_samples = 100;
  std::size_t backbone_epochs = 10;
  std::size_t detector_out_size = 2000;
  std::size_t eval_pool_size = 1000;
  double target_tnr = 0.95;
  // checks
  double slack = 0.02;

  void apply_override(const std::string& key, const std::string& value);
  Json to_json() const;
  static std::vector<std::string> keys();
};

// Scenario defaults on top of ScenarioParams (E3 swaps in a CNN victim).
ScenarioParams scenario_defaults(const std::string& scenario);

// Building blocks shared by the scenarios and the CLI. Every seed used below
// is derived from `seed` with a fixed per-purpose stream tag.
DatasetSpec victim_task(const ScenarioParams& params, std::uint64_t seed);
// Pool with the scenario's foreign family; the seed also fixes that family.
AttackerPool attacker_pool(const ScenarioParams& params, std::uint64_t seed, std::size_t size, double alpha);
// Generic multi-family labeled data for a detector backbone (never includes
// the victim family). Normalized with its own statistics.
LabeledDataset generic_dataset(const ScenarioParams& params, std::uint64_t seed);
// SGD with momentum at 0.01 (Adam at 0.001 for CNNs), step decay x0.1 at two
// thirds of the epochs. Batch 32 for victims, 64 for surrogates.
TrainConfig default_victim_training(const ArchitectureSpec& arch, std::size_t epochs, std::uint64_t seed);
TrainConfig default_surrogate_training(const ArchitectureSpec& arch, std::size_t epochs, std::uint64_t seed);

struct ExperimentSpec {
  std::string scenario;  // E1..E5
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  std::vector<std::pair<std::string, std::string>> overrides;
  std::string output;  // report path; artifacts go to <stem>.artifacts/

  void validate() const;
};

struct ExperimentResult {
  Json report;                    // deterministic content
  Json runtime;                   // wall-clock seconds per step
  std::vector<std::string> files; // everything written
};

// Runs the scenario, writes the canonical JSON report, CSV flattenings, the
// runtime sidecar and the referenced artifacts.
ExperimentResult run_experiment(const ExperimentSpec& spec);

// Per-scenario directional checks evaluated on a report; each entry has
// "name", "pass", and the compared values.
Json scenario_checks(const Json& report);

// Reloads the persisted artifacts of one seed and recomputes the report's
// numbers; "ok" is true when every recomputed value is identical.
Json verify_report(const std::string& report_path, std::size_t seed_index = 0);

// Flattening used for the CSV outputs.
std::string records_csv(const Json& report);
std::string histogram_csv(const Json& report);
std::string sweep_csv(const Json& report);

}  // namespace xfb
