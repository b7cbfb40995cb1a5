#include "hhlab/config.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <sstream>

#include "hedgehog/text_io.hpp"

namespace hhlab {

const ConfigEntry* ExperimentConfig::find(std::string_view key) const noexcept {
  for (const auto& e : entries_) {
    if (e.key == key) return &e;
  }
  return nullptr;
}

bool ExperimentConfig::has(std::string_view key) const noexcept { return find(key) != nullptr; }

void ExperimentConfig::set(std::string_view key, std::string value) {
  for (auto& e : entries_) {
    if (e.key == key) {
      e.value = std::move(value);
      return;
    }
  }
  throw ConfigError(std::string(key), "unknown key");
}

void ExperimentConfig::merge_text(std::string_view text) {
  std::vector<hedgehog::KeyValueLine> lines;
  try {
    lines = hedgehog::parse_key_values(text);
  } catch (const hedgehog::ParseError& e) {
    throw ConfigError("", e.what());
  }
  for (auto& kv : lines) {
    if (!has(kv.key)) throw ConfigError(kv.key, "unknown key (line " + std::to_string(kv.line) + ")");
    set(kv.key, std::move(kv.value));
  }
}

void ExperimentConfig::merge_file(const std::filesystem::path& path) {
  std::error_code ec;
  if (!std::filesystem::is_regular_file(path, ec)) {
    throw ConfigError("", "config file not found: " + path.string());
  }
  merge_text(hedgehog::read_text_file(path));
}

const std::string& ExperimentConfig::get(std::string_view key) const {
  const auto* e = find(key);
  if (!e) throw ConfigError(std::string(key), "unknown key");
  return e->value;
}

double ExperimentConfig::get_double(std::string_view key) const {
  try {
    const double v = hedgehog::parse_double(get(key));
    if (!std::isfinite(v)) throw std::invalid_argument("not finite");
    return v;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(std::string(key), "expected a number, got '" + get(key) + "'");
  }
}

std::size_t ExperimentConfig::get_size(std::string_view key) const {
  return static_cast<std::size_t>(get_u64(key));
}

std::uint64_t ExperimentConfig::get_u64(std::string_view key) const {
  const std::string& text = get(key);
  if (text.empty() || text.find_first_not_of("0123456789") != std::string::npos) {
    throw ConfigError(std::string(key), "expected a non-negative integer, got '" + text + "'");
  }
  errno = 0;
  const unsigned long long v = std::strtoull(text.c_str(), nullptr, 10);
  if (errno == ERANGE) throw ConfigError(std::string(key), "integer out of range");
  return v;
}

bool ExperimentConfig::get_bool(std::string_view key) const {
  try {
    return hedgehog::parse_bool(get(key));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception&) {
    throw ConfigError(std::string(key), "expected a boolean, got '" + get(key) + "'");
  }
}

std::vector<std::string> ExperimentConfig::get_list(std::string_view key) const {
  std::vector<std::string> out;
  std::stringstream ss(get(key));
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto t = hedgehog::trim(item);
    if (!t.empty()) out.emplace_back(t);
  }
  return out;
}

std::vector<std::size_t> ExperimentConfig::get_size_list(std::string_view key) const {
  std::vector<std::size_t> out;
  for (const auto& item : get_list(key)) {
    if (item.find_first_not_of("0123456789") != std::string::npos) {
      throw ConfigError(std::string(key), "expected a list of non-negative integers, got '" + get(key) + "'");
    }
    out.push_back(static_cast<std::size_t>(std::stoull(item)));
  }
  return out;
}

std::string ExperimentConfig::to_text() const {
  std::string out;
  for (const auto& e : entries_) out += e.key + "=" + e.value + "\n";
  return out;
}

}  // namespace hhlab
