#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

namespace xfb {

struct Dims {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;

  std::size_t size() const { return height * width * channels; }
  friend bool operator==(const Dims&, const Dims&) = default;
};

std::string to_string(const Dims& dims);  // "16x16x1"
Dims parse_dims(std::string_view text);

enum class Family { mlp, cnn };

struct LayerSpec {
  enum class Kind { dense, conv };
  Kind kind = Kind::dense;
  std::size_t units = 0;   // dense width or conv filter count
  std::size_t kernel = 0;  // conv only, odd

  static LayerSpec dense(std::size_t width) { return {Kind::dense, width, 0}; }
  static LayerSpec conv(std::size_t filters, std::size_t kernel) {
    return {Kind::conv, filters, kernel};
  }
  friend bool operator==(const LayerSpec&, const LayerSpec&) = default;
};

// Every hidden layer is followed by ReLU. The output layer is an implicit
// dense layer with `classes` logits and no activation. Conv layers use
// stride 1 and "same" zero padding and must precede all dense layers; the
// transition from conv to dense flattens the H x W x filters activation.
struct ArchitectureSpec {
  Family family = Family::mlp;
  Dims input;
  std::vector<LayerSpec> hidden;
  std::size_t classes = 0;

  void validate() const;

  // Canonical one-line form:
  //   family=cnn input=16x16x1 hidden=conv:8:3,conv:8:3,dense:32 classes=10
  std::string to_text() const;
  static ArchitectureSpec parse(std::string_view text);

  friend bool operator==(const ArchitectureSpec&, const ArchitectureSpec&) = default;
};

// Named presets used by the CLI and the experiments:
//   mlp        dense:128,dense:64
//   mlp-small  dense:32
//   cnn        conv:8:3,conv:8:3,dense:32
//   backbone   conv:8:3,conv:16:3,dense:64
// Anything containing '=' is parsed as a full architecture string instead.
ArchitectureSpec resolve_arch(std::string_view name_or_text, const Dims& input,
                              std::size_t classes);

}  // namespace xfb
