#include "xfb/json.hpp"

#include <map>

#include "xfb/error.hpp"
#include "xfb/io.hpp"

namespace xfb {

namespace {

void write_string(std::string& out, const std::string& s) {
  // Reuse the library's escaping for strings.
  out += Json(s).dump();
}

void write(std::string& out, const Json& v, int indent, int depth) {
  const auto newline = [&](int d) {
    if (indent < 0) return;
    out += '\n';
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (v.type()) {
    case Json::value_t::null:
      out += "null";
      break;
    case Json::value_t::boolean:
      out += v.get<bool>() ? "true" : "false";
      break;
    case Json::value_t::number_integer:
      out += std::to_string(v.get<std::int64_t>());
      break;
    case Json::value_t::number_unsigned:
      out += std::to_string(v.get<std::uint64_t>());
      break;
    case Json::value_t::number_float:
      out += format_double(v.get<double>());
      break;
    case Json::value_t::string:
      write_string(out, v.get_ref<const std::string&>());
      break;
    case Json::value_t::array: {
      out += '[';
      bool first = true;
      for (const auto& item : v) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        write(out, item, indent, depth + 1);
      }
      if (!v.empty()) newline(depth);
      out += ']';
      break;
    }
    case Json::value_t::object: {
      // nlohmann's default object type is already key-ordered; sort anyway
      // so the output does not depend on that.
      std::map<std::string, const Json*> sorted;
      for (auto it = v.begin(); it != v.end(); ++it) sorted.emplace(it.key(), &it.value());
      out += '{';
      bool first = true;
      for (const auto& [key, item] : sorted) {
        if (!first) out += ',';
        first = false;
        newline(depth + 1);
        write_string(out, key);
        out += indent < 0 ? ":" : ": ";
        write(out, *item, indent, depth + 1);
      }
      if (!v.empty()) newline(depth);
      out += '}';
      break;
    }
    case Json::value_t::binary:
    case Json::value_t::discarded:
      fail(ErrorKind::format, "cannot serialize this JSON value");
  }
}

}  // namespace

std::string canonical_json(const Json& value) {
  std::string out;
  write(out, value, -1, 0);
  return out;
}

std::string canonical_json_pretty(const Json& value) {
  std::string out;
  write(out, value, 2, 0);
  out += '\n';
  return out;
}

Json json_array(std::span<const double> values) {
  Json arr = Json::array();
  for (double v : values) arr.push_back(v);
  return arr;
}

}  // namespace xfb
