#include "xfb/model.hpp"

#include <cmath>

#include "xfb/error.hpp"
#include "xfb/io.hpp"
#include "xfb/rng.hpp"

namespace xfb {

namespace {

constexpr std::string_view kModelMagic = "XFBM";
constexpr std::uint64_t kModelFormatVersion = 1;

}  // namespace

void Normalization::validate(std::size_t expected_channels) const {
  require(mean.size() == expected_channels && stddev.size() == expected_channels,
          ErrorKind::validation, "normalization channel count mismatch");
  for (double s : stddev) {
    require(std::isfinite(s) && s > 0.0, ErrorKind::validation,
            "normalization stddev must be positive");
  }
}

void Normalization::apply_inplace(std::span<double> row) const {
  const std::size_t c = channels();
  for (std::size_t i = 0; i < row.size(); ++i) {
    row[i] = (row[i] - mean[i % c]) / stddev[i % c];
  }
}

void Normalization::invert_inplace(std::span<double> row) const {
  const std::size_t c = channels();
  for (std::size_t i = 0; i < row.size(); ++i) {
    row[i] = row[i] * stddev[i % c] + mean[i % c];
  }
}

Tensor Normalization::apply(const Tensor& raw) const {
  Tensor out = raw;
  for (std::size_t r = 0; r < out.rows(); ++r) apply_inplace(out.row(r));
  return out;
}

Tensor Normalization::invert(const Tensor& normalized) const {
  Tensor out = normalized;
  for (std::size_t r = 0; r < out.rows(); ++r) invert_inplace(out.row(r));
  return out;
}

std::vector<LayerLayout> layout(const ArchitectureSpec& arch) {
  arch.validate();
  std::vector<LayerLayout> layers;
  Dims current = arch.input;
  std::size_t offset = 0;
  auto add_dense = [&](std::size_t width, bool relu) {
    LayerLayout l;
    l.conv = false;
    l.relu = relu;
    l.in = current;
    l.out = {1, 1, width};
    l.weight_offset = offset;
    l.weight_count = current.size() * width;
    l.bias_offset = offset + l.weight_count;
    l.bias_count = width;
    offset = l.bias_offset + l.bias_count;
    layers.push_back(l);
    current = l.out;
  };
  for (const auto& spec : arch.hidden) {
    if (spec.kind == LayerSpec::Kind::conv) {
      LayerLayout l;
      l.conv = true;
      l.relu = true;
      l.in = current;
      l.out = {current.height, current.width, spec.units};
      l.kernel = spec.kernel;
      l.weight_offset = offset;
      l.weight_count = spec.kernel * spec.kernel * current.channels * spec.units;
      l.bias_offset = offset + l.weight_count;
      l.bias_count = spec.units;
      offset = l.bias_offset + l.bias_count;
      layers.push_back(l);
      current = l.out;
    } else {
      add_dense(spec.units, true);
    }
  }
  add_dense(arch.classes, false);
  return layers;
}

std::size_t param_count(const ArchitectureSpec& arch) {
  const auto layers = layout(arch);
  return layers.back().bias_offset + layers.back().bias_count;
}

void Model::validate() const {
  arch.validate();
  if (params.size() != param_count(arch)) {
    fail(ErrorKind::validation, "parameter count " + std::to_string(params.size()) +
                                    " does not match architecture (" +
                                    std::to_string(param_count(arch)) + ")");
  }
  if (!normalization.empty()) normalization.validate(arch.input.channels);
}

Model Model::initialize(const ArchitectureSpec& arch, std::uint64_t seed) {
  Model model = zeros(arch);
  model.seed = seed;
  Rng rng(seed);
  for (const auto& layer : layout(arch)) {
    const double scale = std::sqrt(2.0 / static_cast<double>(layer.fan_in()));
    for (std::size_t i = 0; i < layer.weight_count; ++i) {
      model.params[layer.weight_offset + i] = scale * rng.normal();
    }
  }
  return model;
}

Model Model::zeros(const ArchitectureSpec& arch) {
  Model model;
  model.arch = arch;
  model.params.assign(param_count(arch), 0.0);
  return model;
}

std::string serialize_model(const Model& model) {
  model.validate();
  HeaderWriter header(kModelMagic);
  header.field("format_version", std::to_string(kModelFormatVersion))
      .field("arch", model.arch.to_text())
      .field("seed", std::to_string(model.seed))
      .field("trained_epochs", std::to_string(model.trained_epochs))
      .field("norm_mean", join_doubles(model.normalization.mean))
      .field("norm_std", join_doubles(model.normalization.stddev))
      .field("param_count", std::to_string(model.params.size()));
  std::string bytes = header.finish();
  append_f64(bytes, model.params);
  return bytes;
}

Model deserialize_model(std::string_view bytes) {
  const ParsedHeader header = parse_header(bytes, kModelMagic);
  const auto version = parse_u64(header.get("format_version"), "format_version");
  if (version != kModelFormatVersion) {
    fail(ErrorKind::format, "unsupported model format version " + std::to_string(version));
  }
  Model model;
  try {
    model.arch = ArchitectureSpec::parse(header.get("arch"));
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string("bad arch in model header: ") + e.what());
  }
  model.seed = parse_u64(header.get("seed"), "seed");
  model.trained_epochs = parse_u64(header.get("trained_epochs"), "trained_epochs");
  model.normalization.mean = parse_double_list(header.get("norm_mean"));
  model.normalization.stddev = parse_double_list(header.get("norm_std"));
  const auto count = parse_u64(header.get("param_count"), "param_count");
  const std::string_view payload = bytes.substr(header.payload_offset);
  if (payload.size() != count * 8) {
    fail(ErrorKind::format, "model payload has " + std::to_string(payload.size()) +
                                " bytes, expected " + std::to_string(count * 8));
  }
  model.params = decode_f64(payload, count);
  try {
    model.validate();
  } catch (const Error& e) {
    fail(ErrorKind::format, std::string("inconsistent model file: ") + e.what());
  }
  return model;
}

void save_model(const std::string& path, const Model& model) {
  write_file(path, serialize_model(model));
}

Model load_model(const std::string& path) { return deserialize_model(read_file(path)); }

}  // namespace xfb
