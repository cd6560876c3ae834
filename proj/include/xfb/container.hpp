#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace xfb {

// Generic XFB1 file: magic line, "key: value" header (format_version, kind,
// kind-specific fields, then a `sections` field listing name=count pairs),
// "end", and the sections' float64 values back to back in little-endian.
struct Container {
  std::string kind;
  std::vector<std::pair<std::string, std::string>> fields;
  std::vector<std::pair<std::string, std::vector<double>>> sections;

  Container& field(std::string key, std::string value) {
    fields.emplace_back(std::move(key), std::move(value));
    return *this;
  }
  Container& section(std::string name, std::vector<double> values) {
    sections.emplace_back(std::move(name), std::move(values));
    return *this;
  }

  const std::string& get(std::string_view key) const;
  const std::vector<double>& data(std::string_view name) const;
};

inline constexpr std::string_view kContainerMagic = "XFB1";
inline constexpr unsigned kContainerVersion = 1;

std::string encode_container(const Container& c);
// Format error on bad magic/version, wrong kind, or any size mismatch.
Container decode_container(std::string_view bytes, std::string_view expected_kind);

}  // namespace xfb
