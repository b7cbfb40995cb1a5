#include <cstdio>
#include <sstream>

#include "common.hpp"
#include "hedgehog/perf_bench.hpp"
#include "hedgehog/text_io.hpp"

namespace hhlab::detail {

int cmd_bench(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log) {
  hedgehog::BenchConfig bc;
  bc.seed = cfg.get_u64("seed");
  bc.n_heads = cfg.get_size("n_heads");
  bc.head_dim = cfg.get_size("head_dim");
  bc.seq_lens = cfg.get_size_list("seq_lens");
  bc.repeats = cfg.get_size("repeats");
  bc.warmup = cfg.get_size("warmup");
  const auto& dtype = cfg.get("dtype");
  if (dtype == "f32") {
    bc.dtype = hedgehog::BenchDtype::f32;
  } else if (dtype == "f64") {
    bc.dtype = hedgehog::BenchDtype::f64;
  } else {
    throw ConfigError("dtype", "expected f32 or f64");
  }
  bc.memory_budget_bytes = cfg.get_size("memory_budget_mib") << 20;
  bc.gate_prefix = cfg.get_size("gate_prefix");
  bc.gate_rows = cfg.get_size("gate_rows");
  if (options.max_n) std::erase_if(bc.seq_lens, [&](std::size_t n) { return n > *options.max_n; });
  std::vector<hedgehog::BenchKind> kinds;
  for (const auto& name : cfg.get_list("kinds")) {
    try {
      kinds.push_back(hedgehog::parse_bench_kind(name));
    } catch (const std::exception&) {
      throw ConfigError("kinds", "unknown bench kind '" + name + "'");
    }
  }
  if (kinds.empty()) throw ConfigError("kinds", "no bench kinds selected");
  try {
    bc.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(options.max_n && bc.seq_lens.empty() ? "--max-n" : "", e.what());
  }

  const auto dir = prepare_output(options);
  write_output(dir, "config.txt", cfg.to_text());

  const auto rows = hedgehog::bench_attention(bc, kinds, [&](const hedgehog::BenchRow& r) {
    log << hedgehog::to_string(r.kind) << " n=" << r.n << ' '
        << (r.skipped ? "skipped: " + r.skip_reason
                      : (r.gate_passed ? "median " + hedgehog::format_sig(r.median_seconds, 4) + " s" : "gate failed"))
        << '\n';
  });
  const auto checks = hedgehog::scaling_checks(rows);

  // Deterministic facts per cell; timings live in the timing*.csv files.
  std::ostringstream cells;
  cells << "kind,n,status,gate_error,peak_bytes,state_bytes,clamp_events,degenerate_rows\n";
  bool gates_ok = true;
  for (const auto& r : rows) {
    const char* status = r.skipped ? "skipped" : (r.gate_passed ? "ok" : "gate_failed");
    gates_ok = gates_ok && (r.skipped || r.gate_passed);
    cells << hedgehog::to_string(r.kind) << ',' << r.n << ',' << status << ','
          << (r.skipped ? std::string("") : hedgehog::format_double(r.gate_error)) << ',' << r.peak_live_bytes << ','
          << r.state_bytes << ',' << r.clamp_events << ',' << r.degenerate_rows << '\n';
  }
  std::ostringstream scaling;
  scaling << "kind,n_from,n_to,ratio,lo,hi,passed\n";
  bool scaling_ok = true;
  for (const auto& c : checks) {
    scaling << hedgehog::to_string(c.kind) << ',' << c.n_from << ',' << c.n_to << ','
            << hedgehog::format_sig(c.ratio, 6) << ',' << c.lo << ',' << c.hi << ',' << (c.passed ? 1 : 0) << '\n';
    scaling_ok = scaling_ok && c.passed;
  }

  write_output(dir, "cells.csv", cells.str());
  write_output(dir, "timing.csv", hedgehog::bench_csv(rows));
  write_output(dir, "timing_long.csv", hedgehog::bench_long_csv(rows));
  write_output(dir, "timing_scaling.csv", scaling.str());

  std::ostringstream summary;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %8s %12s %14s\n", "kind", "n", "median_s", "peak_bytes");
  summary << line;
  for (const auto& r : rows) {
    if (r.skipped || !r.gate_passed) {
      std::snprintf(line, sizeof line, "%-20s %8zu %12s %14zu\n", std::string(hedgehog::to_string(r.kind)).c_str(),
                    r.n, r.skipped ? "skipped" : "gate_failed", r.peak_live_bytes);
    } else {
      std::snprintf(line, sizeof line, "%-20s %8zu %12.6f %14zu\n", std::string(hedgehog::to_string(r.kind)).c_str(),
                    r.n, r.median_seconds, r.peak_live_bytes);
    }
    summary << line;
  }
  for (const auto& c : checks) {
    std::snprintf(line, sizeof line, "ratio %-14s %6zu->%-6zu %8.3f %s\n",
                  std::string(hedgehog::to_string(c.kind)).c_str(), c.n_from, c.n_to, c.ratio,
                  c.passed ? "PASS" : "FAIL");
    summary << line;
  }
  summary << "gates " << (gates_ok ? "passed" : "failed") << '\n';
  out << summary.str();
  if (!gates_ok) return kExitAssertion;
  if (cfg.get_bool("assert_scaling") && !scaling_ok) return kExitAssertion;
  return kExitOk;
}

}  // namespace hhlab::detail
