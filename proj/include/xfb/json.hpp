#pragma once

#include <span>
#include <string>

#include <json.hpp>

namespace xfb {

using Json = nlohmann::json;

// Compact JSON with object keys in sorted order and floating-point numbers
// printed with 17 significant digits, so equal values give equal bytes.
// Non-finite numbers are rejected.
std::string canonical_json(const Json& value);

// Same layout, two-space indented (still byte-stable).
std::string canonical_json_pretty(const Json& value);

Json json_array(std::span<const double> values);

}  // namespace xfb
