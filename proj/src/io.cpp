#include "xfb/io.hpp"

#include <openssl/evp.h>

#include <bit>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "xfb/error.hpp"

namespace xfb {

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open '" + path + "' for reading");
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return buffer.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(target.parent_path(), ec);
  }
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorKind::io, "cannot open '" + path + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) fail(ErrorKind::io, "write to '" + path + "' failed");
  }
  std::error_code ec;
  fs::rename(tmp, target, ec);
  if (ec) fail(ErrorKind::io, "cannot move '" + tmp + "' into place: " + ec.message());
}

void append_f64(std::string& out, std::span<const double> values) {
  const std::size_t start = out.size();
  out.resize(start + values.size() * 8);
  char* dst = out.data() + start;
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) {
      *dst++ = static_cast<char>((bits >> (8 * b)) & 0xffu);
    }
  }
}

std::vector<double> decode_f64(std::string_view bytes, std::size_t count) {
  if (bytes.size() < count * 8) {
    fail(ErrorKind::format, "payload truncated: need " + std::to_string(count * 8) +
                                " bytes, have " + std::to_string(bytes.size()));
  }
  std::vector<double> values(count);
  const auto* src = reinterpret_cast<const unsigned char*>(bytes.data());
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(src[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

std::string sha256_hex(std::string_view bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    fail(ErrorKind::runtime, "SHA-256 computation failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  hex.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xf]);
  }
  return hex;
}

std::string sha256_hex(std::span<const double> values) {
  std::string bytes;
  append_f64(bytes, values);
  return sha256_hex(bytes);
}

std::string format_double(double value) {
  if (!std::isfinite(value)) {
    fail(ErrorKind::numeric, "cannot serialize non-finite value");
  }
  char buffer[32];
  std::snprintf(buffer, sizeof(buffer), "%.17g", value);
  return buffer;
}

HeaderWriter::HeaderWriter(std::string_view magic) : text_(magic) { text_ += '\n'; }

HeaderWriter& HeaderWriter::field(std::string_view key, std::string_view value) {
  text_.append(key).append(": ").append(value).push_back('\n');
  return *this;
}

std::string HeaderWriter::finish() const { return text_ + "end\n"; }

bool ParsedHeader::has(std::string_view key) const {
  for (const auto& [k, v] : fields) {
    if (k == key) return true;
  }
  return false;
}

const std::string& ParsedHeader::get(std::string_view key) const {
  for (const auto& [k, v] : fields) {
    if (k == key) return v;
  }
  fail(ErrorKind::format, "header is missing field '" + std::string(key) + "'");
}

ParsedHeader parse_header(std::string_view bytes, std::string_view magic) {
  const std::string magic_line = std::string(magic) + "\n";
  if (bytes.substr(0, magic_line.size()) != magic_line) {
    fail(ErrorKind::format, "bad magic: expected '" + std::string(magic) + "'");
  }
  ParsedHeader header;
  std::size_t pos = magic_line.size();
  while (true) {
    const std::size_t eol = bytes.find('\n', pos);
    if (eol == std::string_view::npos) fail(ErrorKind::format, "header is truncated");
    const std::string_view line = bytes.substr(pos, eol - pos);
    pos = eol + 1;
    if (line == "end") break;
    const std::size_t colon = line.find(": ");
    if (colon == std::string_view::npos) {
      fail(ErrorKind::format, "malformed header line '" + std::string(line) + "'");
    }
    header.fields.emplace_back(std::string(line.substr(0, colon)),
                               std::string(line.substr(colon + 2)));
  }
  header.payload_offset = pos;
  return header;
}

std::uint64_t parse_u64(std::string_view text, std::string_view what) {
  std::uint64_t value = 0;
  const char* end = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end || text.empty()) {
    fail(ErrorKind::format, "invalid " + std::string(what) + ": '" + std::string(text) + "'");
  }
  return value;
}

double parse_double(std::string_view text, std::string_view what) {
  const std::string owned(text);
  char* end = nullptr;
  errno = 0;
  const double value = std::strtod(owned.c_str(), &end);
  if (owned.empty() || end != owned.c_str() + owned.size() ||
      !std::isfinite(value)) {
    fail(ErrorKind::format, "invalid " + std::string(what) + ": '" + owned + "'");
  }
  return value;
}

std::vector<double> parse_double_list(std::string_view text) {
  std::vector<double> values;
  if (text.empty()) return values;
  std::size_t start = 0;
  while (true) {
    const std::size_t comma = text.find(',', start);
    values.push_back(parse_double(text.substr(start, comma - start), "number"));
    if (comma == std::string_view::npos) break;
    start = comma + 1;
  }
  return values;
}

std::string join_doubles(std::span<const double> values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ',';
    out += format_double(values[i]);
  }
  return out;
}

}  // namespace xfb
