#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "xfb/arch.hpp"
#include "xfb/model.hpp"
#include "xfb/rng.hpp"
#include "xfb/tensor.hpp"

namespace xfb {

// Parameters of a synthetic data domain. Prototypes are sums of random
// periodic low-frequency waves (|frequency| <= smoothness cycles per image),
// min-max scaled into [0, 1]. With shared_weight > 0 every prototype is
// shared_weight * base + (1 - shared_weight) * own pattern before scaling,
// which makes the classes of a family look alike (fine-grained).
struct FamilyParams {
  std::uint64_t seed = 0;
  std::size_t num_prototypes = 10;
  Dims dims{16, 16, 1};
  double smoothness = 3.0;
  double shared_weight = 0.0;

  friend bool operator==(const FamilyParams&, const FamilyParams&) = default;
};

struct PatternFamily {
  FamilyParams params;
  std::vector<std::vector<double>> prototypes;  // each HxWxC, values in [0, 1]
};

// Minimum pairwise mean-squared distance enforced between prototypes.
inline constexpr double kPrototypeDistanceFloor = 0.005;

PatternFamily make_family(const FamilyParams& params);

// One draw of the generative process: prototype circularly shifted by up to
// `jitter` pixels on each axis, plus N(0, noise_sigma^2) pixel noise, clipped
// to [0, 1].
void draw_sample(const std::vector<double>& prototype, const Dims& dims, double noise_sigma,
                 std::size_t jitter, Rng& rng, std::span<double> out);

struct DatasetSpec {
  FamilyParams family;
  std::size_t classes = 10;
  std::size_t samples_per_class = 300;
  double noise_sigma = 0.25;
  std::size_t jitter_pixels = 0;
  std::uint64_t split_seed = 0;
  double train_fraction = 2.0 / 3.0;

  void validate() const;
};

struct LabeledDataset {
  Dims dims;
  std::size_t classes = 0;
  Tensor inputs;  // N x n, normalized
  std::vector<std::size_t> labels;
  Normalization normalization;
  std::uint64_t family_seed = 0;
  std::uint64_t split_seed = 0;
  std::string part;  // "train" or "test"

  std::size_t size() const { return labels.size(); }
  Tensor raw_inputs() const { return normalization.invert(inputs); }
  void validate() const;
};

struct DatasetSplit {
  LabeledDataset train;
  LabeledDataset test;
  // Indices into the class-major full sample list (class c occupies
  // [c * samples_per_class, (c + 1) * samples_per_class)).
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

// Per-channel mean and population std of raw rows (std 1 for a constant
// channel).
Normalization channel_statistics(const Tensor& raw, std::size_t channels);

// Stratified split; both parts normalized with per-channel train statistics.
DatasetSplit sample_dataset(const DatasetSpec& spec);

struct PoolSource {
  std::uint64_t victim_family_seed = 0;
  std::uint64_t disjoint_family_seed = 0;
  std::uint64_t pool_seed = 0;
  std::vector<std::uint8_t> victim_origin;  // 1 = drawn from the victim family
};

// Unlabeled attacker data. Inputs are raw (pixel domain [0, 1]); they are
// what an API client would submit.
struct AttackerPool {
  Dims dims;
  Tensor inputs;  // P x n raw
  double alpha = 0.0;
  PoolSource source;

  std::size_t size() const { return inputs.rows(); }
  std::size_t victim_count() const;
};

struct PoolOptions {
  // Relative class frequencies for the victim-origin part; empty = uniform.
  std::vector<double> victim_class_weights;
  // Pixel noise for the disjoint-family part; unset = the victim spec's sigma.
  std::optional<double> foreign_noise_sigma;
};

// floor(alpha * P) samples come from the victim family (fresh draws of the
// victim generative process), the rest from `disjoint`, drawn with the victim
// spec's jitter and the foreign noise level. The final order is shuffled by `seed`.
AttackerPool sample_pool(const DatasetSpec& victim, const FamilyParams& disjoint, std::size_t size,
                         double alpha, std::uint64_t seed, const PoolOptions& options = {});

// XFB1 container files; see docs/formats.md.
void save_dataset(const std::string& path, const LabeledDataset& data);
LabeledDataset load_dataset(const std::string& path);
void save_pool(const std::string& path, const AttackerPool& pool);
AttackerPool load_pool(const std::string& path);

std::string serialize_dataset(const LabeledDataset& data);
LabeledDataset deserialize_dataset(std::string_view bytes);
std::string serialize_pool(const AttackerPool& pool);
AttackerPool deserialize_pool(std::string_view bytes);

}  // namespace xfb
