#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hedgehog {

// Malformed text input (checkpoint, spec file, config). Carries the line.
class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
  std::size_t line() const noexcept { return line_; }

 private:
  std::size_t line_;
};

// Shortest text that round-trips a double bit-exactly (17 significant digits).
std::string format_double(double v);
std::string format_doubles(std::span<const double> values);
std::string format_sig(double v, int significant_digits);

double parse_double(std::string_view text);
long long parse_integer(std::string_view text);
bool parse_bool(std::string_view text);
std::vector<double> parse_doubles(std::string_view text);

std::string_view trim(std::string_view s) noexcept;

struct KeyValueLine {
  std::string key;
  std::string value;
  std::size_t line = 0;
};

// Line cursor over "key=value" text. Blank lines and '#' comments are
// skipped by next_entry(); raw_line() hands back payload rows verbatim.
class LineCursor {
 public:
  explicit LineCursor(std::string_view text);

  bool at_end();
  KeyValueLine next_entry();
  std::string raw_line();
  std::size_t line_number() const noexcept { return line_; }

 private:
  void skip_blank();
  std::vector<std::string> lines_;
  std::size_t pos_ = 0;
  std::size_t line_ = 0;
};

std::vector<KeyValueLine> parse_key_values(std::string_view text);

std::string read_text_file(const std::filesystem::path& path);
// Writes via a temporary sibling and rename so readers never see a partial file.
void write_text_file(const std::filesystem::path& path, std::string_view contents);

}  // namespace hedgehog
