#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>

#include "hhlab/config.hpp"

namespace hhlab {

enum ExitCode : int {
  kExitOk = 0,
  kExitAssertion = 1,
  kExitConfig = 2,
  kExitIo = 3,
};

struct RunOptions {
  std::optional<std::filesystem::path> config;
  std::optional<std::filesystem::path> out;
  std::optional<std::uint64_t> seed;
  bool dry_run = false;
  bool force = false;
  // Desk-scale defaults (recall: vocab 20, seq_len 64, 2k/500 and a small model).
  bool tiny = false;
  std::optional<std::size_t> max_n;
  std::optional<std::filesystem::path> resume;
  bool export_attention = false;
};

// Default config of a command before any file or flag is applied.
ExperimentConfig default_config(const std::string& command, bool tiny);

// Resolves defaults, the config file and flags. Throws ConfigError.
ExperimentConfig resolve_config(const std::string& command, const RunOptions& options);

// Runs one subcommand and maps failures onto ExitCode. Results go to
// options.out; the summary goes to `out`, progress and errors to `log`.
int run_command(const std::string& command, const RunOptions& options, std::ostream& out, std::ostream& log);

}  // namespace hhlab
