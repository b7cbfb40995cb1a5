#include "hedgehog/text_io.hpp"

#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

namespace hedgehog {

std::string format_double(double v) { return format_sig(v, 17); }

std::string format_sig(double v, int significant_digits) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*g", significant_digits, v);
  return buf;
}

std::string format_doubles(std::span<const double> values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out.push_back(' ');
    out += format_double(values[i]);
  }
  return out;
}

std::string_view trim(std::string_view s) noexcept {
  const auto first = s.find_first_not_of(" \t\r\n");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r\n");
  return s.substr(first, last - first + 1);
}

double parse_double(std::string_view text) {
  const std::string s(trim(text));
  if (s.empty()) throw std::invalid_argument("expected a number, got empty text");
  char* end = nullptr;
  errno = 0;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size() || errno == ERANGE) {
    throw std::invalid_argument("not a number: '" + s + "'");
  }
  return v;
}

long long parse_integer(std::string_view text) {
  const auto s = trim(text);
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) {
    throw std::invalid_argument("not an integer: '" + std::string(s) + "'");
  }
  return v;
}

bool parse_bool(std::string_view text) {
  const auto s = trim(text);
  if (s == "1" || s == "true" || s == "on" || s == "yes") return true;
  if (s == "0" || s == "false" || s == "off" || s == "no") return false;
  throw std::invalid_argument("not a boolean: '" + std::string(s) + "'");
}

std::vector<double> parse_doubles(std::string_view text) {
  std::vector<double> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && (text[i] == ' ' || text[i] == '\t' || text[i] == ',')) ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ' && text[j] != '\t' && text[j] != ',' && text[j] != '\r') ++j;
    if (j > i) out.push_back(parse_double(text.substr(i, j - i)));
    i = j + (j < text.size() && text[j] == '\r' ? 1 : 0);
  }
  return out;
}

LineCursor::LineCursor(std::string_view text) {
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto nl = text.find('\n', start);
    if (nl == std::string_view::npos) {
      if (start < text.size()) lines_.emplace_back(text.substr(start));
      break;
    }
    lines_.emplace_back(text.substr(start, nl - start));
    start = nl + 1;
  }
}

void LineCursor::skip_blank() {
  while (pos_ < lines_.size()) {
    const auto t = trim(lines_[pos_]);
    if (!t.empty() && t.front() != '#') break;
    ++pos_;
    ++line_;
  }
}

bool LineCursor::at_end() {
  skip_blank();
  return pos_ >= lines_.size();
}

KeyValueLine LineCursor::next_entry() {
  skip_blank();
  if (pos_ >= lines_.size()) throw ParseError("unexpected end of input", line_ + 1);
  const std::string& raw = lines_[pos_++];
  ++line_;
  const auto eq = raw.find('=');
  if (eq == std::string::npos) throw ParseError("expected key=value, got '" + raw + "'", line_);
  KeyValueLine kv;
  kv.key = std::string(trim(std::string_view(raw).substr(0, eq)));
  kv.value = std::string(trim(std::string_view(raw).substr(eq + 1)));
  kv.line = line_;
  if (kv.key.empty()) throw ParseError("empty key", line_);
  return kv;
}

std::string LineCursor::raw_line() {
  if (pos_ >= lines_.size()) throw ParseError("unexpected end of input", line_ + 1);
  ++line_;
  return lines_[pos_++];
}

std::vector<KeyValueLine> parse_key_values(std::string_view text) {
  LineCursor cursor(text);
  std::vector<KeyValueLine> out;
  while (!cursor.at_end()) out.push_back(cursor.next_entry());
  return out;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << contents;
    if (!out) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace hedgehog
