#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace xfb {

std::string read_file(const std::string& path);
// Writes via a temporary sibling and rename so readers never see partial files.
void write_file(const std::string& path, std::string_view bytes);

// Little-endian float64 payload helpers.
void append_f64(std::string& out, std::span<const double> values);
std::vector<double> decode_f64(std::string_view bytes, std::size_t count);

// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_hex(std::span<const double> values);  // over LE f64 bytes

// 17 significant digits, exact round trip for finite values.
std::string format_double(double value);

// Line-oriented "key: value" header shared by the binary containers.
// Layout: <magic>\n, then "key: value\n" lines, then "end\n", then payload.
class HeaderWriter {
 public:
  explicit HeaderWriter(std::string_view magic);
  HeaderWriter& field(std::string_view key, std::string_view value);
  std::string finish() const;

 private:
  std::string text_;
};

struct ParsedHeader {
  std::vector<std::pair<std::string, std::string>> fields;
  std::size_t payload_offset = 0;

  bool has(std::string_view key) const;
  const std::string& get(std::string_view key) const;  // format error if missing
};

// Format error on bad magic or a missing terminator.
ParsedHeader parse_header(std::string_view bytes, std::string_view magic);

std::vector<double> parse_double_list(std::string_view text);  // comma separated
std::string join_doubles(std::span<const double> values);
std::uint64_t parse_u64(std::string_view text, std::string_view what);
double parse_double(std::string_view text, std::string_view what);

}  // namespace xfb
