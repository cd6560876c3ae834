#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "xfb/arch.hpp"
#include "xfb/tensor.hpp"

namespace xfb {

// Per-channel affine normalization: normalized = (raw - mean) / stddev.
// Raw inputs live in the pixel domain [0, 1]; `lower`/`upper` are the images
// of 0 and 1, i.e. the bounds of the normalized domain.
struct Normalization {
  std::vector<double> mean;
  std::vector<double> stddev;

  bool empty() const { return mean.empty(); }
  std::size_t channels() const { return mean.size(); }
  void validate(std::size_t channels) const;

  double lower(std::size_t channel) const { return (0.0 - mean[channel]) / stddev[channel]; }
  double upper(std::size_t channel) const { return (1.0 - mean[channel]) / stddev[channel]; }

  void apply_inplace(std::span<double> row) const;
  void invert_inplace(std::span<double> row) const;
  Tensor apply(const Tensor& raw) const;
  Tensor invert(const Tensor& normalized) const;

  friend bool operator==(const Normalization&, const Normalization&) = default;
};

// One layer's slice of the flat parameter vector.
//   dense weights: [in][out] row-major
//   conv weights:  [ky][kx][in_channel][filter] row-major
// followed by `out channels` biases.
struct LayerLayout {
  bool conv = false;
  bool relu = true;
  Dims in;
  Dims out;  // dense layers use {1, 1, width}
  std::size_t kernel = 0;
  std::size_t weight_offset = 0;
  std::size_t weight_count = 0;
  std::size_t bias_offset = 0;
  std::size_t bias_count = 0;

  std::size_t in_size() const { return in.size(); }
  std::size_t out_size() const { return out.size(); }
  std::size_t fan_in() const { return conv ? kernel * kernel * in.channels : in.size(); }
};

std::vector<LayerLayout> layout(const ArchitectureSpec& arch);
std::size_t param_count(const ArchitectureSpec& arch);

// A network: architecture plus a flat parameter vector. Immutable once
// trained; concurrent read-only use is safe.
struct Model {
  ArchitectureSpec arch;
  std::vector<double> params;
  std::uint64_t seed = 0;
  std::size_t trained_epochs = 0;
  Normalization normalization;  // attached for serving; empty otherwise

  std::size_t input_size() const { return arch.input.size(); }
  std::size_t classes() const { return arch.classes; }
  void validate() const;

  // He initialization: weights ~ N(0, 2 / fan_in), biases 0, drawn from
  // Rng(seed) in layer order.
  static Model initialize(const ArchitectureSpec& arch, std::uint64_t seed);
  static Model zeros(const ArchitectureSpec& arch);

  friend bool operator==(const Model&, const Model&) = default;
};

// Model file: see docs/formats.md.
std::string serialize_model(const Model& model);
Model deserialize_model(std::string_view bytes);
void save_model(const std::string& path, const Model& model);
Model load_model(const std::string& path);

}  // namespace xfb
