#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace hhlab {

// Bad or unknown config entry. key() names the offending entry.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string key, const std::string& what)
      : std::runtime_error(key.empty() ? what : key + ": " + what), key_(std::move(key)) {}
  const std::string& key() const noexcept { return key_; }

 private:
  std::string key_;
};

struct ConfigEntry {
  std::string key;
  std::string value;
  std::string help;
};

// Flat key=value settings. The key set and defaults are fixed by the command;
// a file may only override known keys.
class ExperimentConfig {
 public:
  ExperimentConfig() = default;
  explicit ExperimentConfig(std::vector<ConfigEntry> defaults) : entries_(std::move(defaults)) {}

  bool has(std::string_view key) const noexcept;
  void set(std::string_view key, std::string value);
  // Applies every entry of a key=value text; later lines win.
  void merge_text(std::string_view text);
  void merge_file(const std::filesystem::path& path);

  const std::string& get(std::string_view key) const;
  std::string get_string(std::string_view key) const { return get(key); }
  double get_double(std::string_view key) const;
  std::size_t get_size(std::string_view key) const;
  std::uint64_t get_u64(std::string_view key) const;
  bool get_bool(std::string_view key) const;
  std::vector<std::string> get_list(std::string_view key) const;
  std::vector<std::size_t> get_size_list(std::string_view key) const;

  // Resolved config, one key=value per line in declaration order.
  std::string to_text() const;
  const std::vector<ConfigEntry>& entries() const noexcept { return entries_; }

 private:
  const ConfigEntry* find(std::string_view key) const noexcept;
  std::vector<ConfigEntry> entries_;
};

}  // namespace hhlab
