#include "xfb/arch.hpp"

#include <charconv>
#include <map>
#include <sstream>

#include "xfb/error.hpp"

namespace xfb {

namespace {

std::size_t parse_count(std::string_view text, std::string_view what) {
  std::size_t value = 0;
  const auto* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    fail(ErrorKind::validation, "invalid " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

std::vector<std::string_view> split(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const std::size_t pos = text.find(sep, start);
    parts.push_back(text.substr(start, pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return parts;
}

}  // namespace

std::string to_string(const Dims& dims) {
  return std::to_string(dims.height) + "x" + std::to_string(dims.width) + "x" +
         std::to_string(dims.channels);
}

Dims parse_dims(std::string_view text) {
  const auto parts = split(text, 'x');
  require(parts.size() == 3, ErrorKind::validation,
          "dims must look like HxWxC, got '" + std::string(text) + "'");
  return {parse_count(parts[0], "height"), parse_count(parts[1], "width"),
          parse_count(parts[2], "channels")};
}

void ArchitectureSpec::validate() const {
  require(input.size() > 0, ErrorKind::validation, "architecture input dims must be positive");
  require(classes >= 2, ErrorKind::validation, "architecture needs at least 2 output classes");
  require(!hidden.empty(), ErrorKind::validation, "architecture needs at least one hidden layer");
  bool seen_dense = false;
  for (const auto& layer : hidden) {
    require(layer.units > 0, ErrorKind::validation, "hidden layer width must be positive");
    if (layer.kind == LayerSpec::Kind::conv) {
      require(family == Family::cnn, ErrorKind::validation, "mlp architectures cannot contain conv layers");
      require(!seen_dense, ErrorKind::validation, "conv layers must precede dense layers");
      require(layer.kernel % 2 == 1, ErrorKind::validation, "conv kernels must be odd-sized");
    } else {
      seen_dense = true;
    }
  }
  if (family == Family::cnn) {
    require(hidden.front().kind == LayerSpec::Kind::conv, ErrorKind::validation,
            "cnn architectures must start with a conv layer");
  }
}

std::string ArchitectureSpec::to_text() const {
  std::ostringstream out;
  out << "family=" << (family == Family::mlp ? "mlp" : "cnn") << " input=" << to_string(input)
      << " hidden=";
  for (std::size_t i = 0; i < hidden.size(); ++i) {
    if (i) out << ',';
    const auto& layer = hidden[i];
    if (layer.kind == LayerSpec::Kind::dense) {
      out << "dense:" << layer.units;
    } else {
      out << "conv:" << layer.units << ':' << layer.kernel;
    }
  }
  out << " classes=" << classes;
  return out.str();
}

ArchitectureSpec ArchitectureSpec::parse(std::string_view text) {
  std::map<std::string, std::string, std::less<>> fields;
  for (auto token : split(text, ' ')) {
    if (token.empty()) continue;
    const auto eq = token.find('=');
    require(eq != std::string_view::npos, ErrorKind::validation,
            "architecture token without '=': '" + std::string(token) + "'");
    fields[std::string(token.substr(0, eq))] = std::string(token.substr(eq + 1));
  }
  for (const char* key : {"family", "input", "hidden", "classes"}) {
    require(fields.count(key) == 1, ErrorKind::validation,
            std::string("architecture is missing '") + key + "'");
  }
  ArchitectureSpec arch;
  const auto& family = fields["family"];
  if (family == "mlp") {
    arch.family = Family::mlp;
  } else if (family == "cnn") {
    arch.family = Family::cnn;
  } else {
    fail(ErrorKind::validation, "unknown architecture family '" + family + "'");
  }
  arch.input = parse_dims(fields["input"]);
  arch.classes = parse_count(fields["classes"], "classes");
  for (auto layer : split(fields["hidden"], ',')) {
    const auto parts = split(layer, ':');
    if (parts.size() == 2 && parts[0] == "dense") {
      arch.hidden.push_back(LayerSpec::dense(parse_count(parts[1], "dense width")));
    } else if (parts.size() == 3 && parts[0] == "conv") {
      arch.hidden.push_back(
          LayerSpec::conv(parse_count(parts[1], "conv filters"), parse_count(parts[2], "conv kernel")));
    } else {
      fail(ErrorKind::validation, "invalid hidden layer '" + std::string(layer) + "'");
    }
  }
  arch.validate();
  return arch;
}

ArchitectureSpec resolve_arch(std::string_view name_or_text, const Dims& input,
                              std::size_t classes) {
  if (name_or_text.find('=') != std::string_view::npos) {
    auto arch = ArchitectureSpec::parse(name_or_text);
    require(arch.input == input, ErrorKind::validation,
            "architecture input " + to_string(arch.input) + " does not match data " +
                to_string(input));
    return arch;
  }
  ArchitectureSpec arch;
  arch.input = input;
  arch.classes = classes;
  if (name_or_text == "mlp") {
    arch.family = Family::mlp;
    arch.hidden = {LayerSpec::dense(128), LayerSpec::dense(64)};
  } else if (name_or_text == "mlp-small") {
    arch.family = Family::mlp;
    arch.hidden = {LayerSpec::dense(32)};
  } else if (name_or_text == "cnn") {
    arch.family = Family::cnn;
    arch.hidden = {LayerSpec::conv(8, 3), LayerSpec::conv(8, 3), LayerSpec::dense(32)};
  } else if (name_or_text == "backbone") {
    arch.family = Family::cnn;
    arch.hidden = {LayerSpec::conv(8, 3), LayerSpec::conv(16, 3), LayerSpec::dense(64)};
  } else {
    fail(ErrorKind::validation, "unknown architecture name '" + std::string(name_or_text) + "'");
  }
  arch.validate();
  return arch;
}

}  // namespace xfb
