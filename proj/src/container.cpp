#include "xfb/container.hpp"

#include "xfb/error.hpp"
#include "xfb/io.hpp"

namespace xfb {

const std::string& Container::get(std::string_view key) const {
  for (const auto& [k, v] : fields) {
    if (k == key) return v;
  }
  fail(ErrorKind::format, "container is missing field '" + std::string(key) + "'");
}

const std::vector<double>& Container::data(std::string_view name) const {
  for (const auto& [k, v] : sections) {
    if (k == name) return v;
  }
  fail(ErrorKind::format, "container is missing section '" + std::string(name) + "'");
}

std::string encode_container(const Container& c) {
  HeaderWriter header(kContainerMagic);
  header.field("format_version", std::to_string(kContainerVersion)).field("kind", c.kind);
  for (const auto& [k, v] : c.fields) header.field(k, v);
  std::string listing;
  for (const auto& [name, values] : c.sections) {
    if (!listing.empty()) listing += ',';
    listing += name + "=" + std::to_string(values.size());
  }
  header.field("sections", listing);
  std::string bytes = header.finish();
  for (const auto& [name, values] : c.sections) append_f64(bytes, values);
  return bytes;
}

Container decode_container(std::string_view bytes, std::string_view expected_kind) {
  const ParsedHeader header = parse_header(bytes, kContainerMagic);
  const auto version = parse_u64(header.get("format_version"), "format_version");
  if (version != kContainerVersion) {
    fail(ErrorKind::format, "unsupported XFB1 format version " + std::to_string(version));
  }
  Container c;
  c.kind = header.get("kind");
  if (c.kind != expected_kind) {
    fail(ErrorKind::format, "expected a '" + std::string(expected_kind) + "' file, found '" +
                                c.kind + "'");
  }
  std::string listing;
  for (const auto& [k, v] : header.fields) {
    if (k == "format_version" || k == "kind") continue;
    if (k == "sections") {
      listing = v;
      continue;
    }
    c.fields.emplace_back(k, v);
  }
  if (!header.has("sections")) fail(ErrorKind::format, "container has no sections field");

  std::string_view payload = bytes.substr(header.payload_offset);
  std::string_view rest = listing;
  while (!rest.empty()) {
    const std::size_t comma = rest.find(',');
    const std::string_view entry = rest.substr(0, comma);
    rest = comma == std::string_view::npos ? std::string_view{} : rest.substr(comma + 1);
    const std::size_t eq = entry.find('=');
    if (eq == std::string_view::npos) fail(ErrorKind::format, "malformed sections entry");
    const auto count = parse_u64(entry.substr(eq + 1), "section size");
    if (payload.size() < count * 8) {
      fail(ErrorKind::format, "payload truncated in section '" + std::string(entry.substr(0, eq)) + "'");
    }
    c.sections.emplace_back(std::string(entry.substr(0, eq)), decode_f64(payload, count));
    payload.remove_prefix(count * 8);
  }
  if (!payload.empty()) {
    fail(ErrorKind::format, std::to_string(payload.size()) + " trailing bytes after payload");
  }
  return c;
}

}  // namespace xfb
