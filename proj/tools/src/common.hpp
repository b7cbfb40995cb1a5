#pragma once

#include <filesystem>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "hedgehog/feature_maps.hpp"
#include "hhlab/commands.hpp"
#include "hhlab/config.hpp"

namespace hhlab::detail {

// Output directory or checkpoint problem (exit 3).
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Seed sub-streams; every subsystem draws from RngStream(seed).split(id).
enum StreamId : std::uint64_t {
  kStreamData = 1,
  kStreamHeldout = 2,
  kStreamTeacher = 3,
  kStreamPanelInput = 4,
  kStreamBaselines = 5,
  kStreamModel = 100,  // + feature-map kind index
};

std::vector<hedgehog::FeatureMapKind> parse_kinds(const ExperimentConfig& cfg, const std::string& key);
hedgehog::FeatureMapOptions map_options(const ExperimentConfig& cfg);

// Creates the output directory, refusing an existing one unless forced.
std::filesystem::path prepare_output(const RunOptions& options);
void write_output(const std::filesystem::path& dir, const std::string& name, const std::string& contents);

int cmd_recall(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log);
int cmd_distill(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log);
int cmd_analyze(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log);
int cmd_bench(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log);

}  // namespace hhlab::detail
