#include "hhlab/commands.hpp"

#include <filesystem>
#include <system_error>

#include "common.hpp"
#include "hedgehog/distill.hpp"
#include "hedgehog/recall.hpp"
#include "hedgehog/text_io.hpp"

namespace hhlab {

namespace {

constexpr const char* kAllKinds = "softmax,taylor2,exp_t,hedgehog,elu1,relu,performer,cosformer";

std::vector<ConfigEntry> feature_map_keys() {
  return {
      {"exp_temperature", "2", "temperature t of the exp_t map"},
      {"taylor_scaled", "false", "scale the taylor2 quadratic block by 1/sqrt(2)"},
      {"hedgehog_negation", "true", "hedgehog features [exp(z), exp(-z)]"},
      {"hedgehog_activation", "raw_exp", "raw_exp or stabilized_softmax"},
      {"performer_features", "0", "performer random features (0 means head_dim)"},
  };
}

std::vector<ConfigEntry> teacher_keys(bool tiny) {
  return {
      {"vocab_size", "256", "teacher vocabulary"},
      {"d_model", tiny ? "32" : "64", "teacher embedding width"},
      {"head_dim", "16", "teacher head dimension"},
      {"n_layers", "1", "teacher layers"},
      {"n_heads", tiny ? "2" : "4", "teacher heads per layer"},
      {"rotary", "false", "rotary embedding inside the teacher heads"},
  };
}

void append(std::vector<ConfigEntry>& to, std::vector<ConfigEntry> more) {
  for (auto& e : more) to.push_back(std::move(e));
}

ExperimentConfig recall_defaults(bool tiny) {
  std::vector<ConfigEntry> e = {
      {"seed", "0", "top-level seed"},
      {"kinds", kAllKinds, "attention kinds to train"},
      {"sweep", "default", "default (single cell) or full (lr x wd x batch grid)"},
      {"vocab_size", tiny ? "20" : "40", "recall vocabulary"},
      {"seq_len", tiny ? "64" : "128", "recall sequence length"},
      {"n_train", tiny ? "2000" : "10000", "training samples"},
      {"n_test", tiny ? "500" : "2000", "held-out samples"},
      {"n_keys", "0", "key alphabet size (0 means vocab_size/2)"},
      {"n_layers", tiny ? "2" : "4", "transformer layers"},
      {"n_heads", tiny ? "2" : "4", "heads per layer"},
      {"head_dim", tiny ? "16" : "64", "head dimension"},
      {"mlp_expansion", tiny ? "2" : "4", "feed-forward expansion factor"},
      {"rotary", "true", "rotary position embedding"},
      {"lr", tiny ? "5e-3" : "1e-2", "AdamW learning rate"},
      {"weight_decay", "0", "AdamW decoupled weight decay"},
      {"batch_size", "32", "samples per step"},
      {"max_epochs", tiny ? "30" : "100", "epoch cap"},
      {"patience", "10", "early stop after this many epochs without held-out loss improvement"},
      {"loss_positions", "key_positions", "key_positions or final_only"},
      {"stop_accuracy", "2", "stop once held-out accuracy reaches this (above 1 disables)"},
      {"entropy_samples", "200", "held-out samples used for attention entropy"},
  };
  append(e, feature_map_keys());
  append(e, {
                {"assert_separation", "false", "exit 1 unless spiky kinds >= 0.9 and the rest <= 0.5"},
                {"save_models", "false", "write trained parameters under models/"},
            });
  return ExperimentConfig(std::move(e));
}

ExperimentConfig distill_defaults(bool tiny) {
  std::vector<ConfigEntry> e = {{"seed", "0", "top-level seed"}};
  append(e, teacher_keys(tiny));
  append(e, {
                {"seq_len", tiny ? "32" : "64", "training sequence length"},
                {"n_train", tiny ? "64" : "256", "training sequences"},
                {"n_heldout", tiny ? "16" : "64", "held-out sequences"},
                {"lr", "1e-2", "AdamW learning rate"},
                {"weight_decay", "0", "AdamW decoupled weight decay"},
                {"epochs", "2", "total epochs (a resumed run continues up to this)"},
                {"batch_size", "8", "sequences per step"},
                {"teacher_scale", "true", "1/sqrt(d) inside the teacher softmax"},
                {"separate_qk", "false", "separate query and key maps per head"},
                {"hedgehog_negation", "true", "hedgehog features [exp(z), exp(-z)]"},
                {"hedgehog_activation", "raw_exp", "raw_exp or stabilized_softmax"},
                {"baselines", "elu1,relu,performer,cosformer", "fixed maps compared on held-out KL"},
                {"context_lengths", tiny ? "32,128" : "64,256", "held-out KL evaluation lengths"},
                {"context_sequences", "8", "sequences per context length"},
                {"assert_fidelity", "false", "exit 1 unless trained KL < identity KL / 3 and < every baseline"},
            });
  return ExperimentConfig(std::move(e));
}

ExperimentConfig analyze_defaults(bool tiny) {
  std::vector<ConfigEntry> e = {{"seed", "0", "top-level seed"}};
  append(e, teacher_keys(tiny));
  append(e, {
                {"seq_len", tiny ? "32" : "64", "frozen input length"},
                {"kinds", kAllKinds, "maps evaluated on the teacher inputs"},
                {"checkpoint", "", "distill checkpoint; adds its trained hedgehog maps and replaces the teacher"},
                {"prescale_fixed_maps", "true", "feed fixed maps q, k scaled by d^-1/4"},
            });
  append(e, feature_map_keys());
  append(e, {{"assert_properties", "false", "exit 1 unless softmax rows have concordance 1 and KL 0"}});
  return ExperimentConfig(std::move(e));
}

ExperimentConfig bench_defaults(bool tiny) {
  return ExperimentConfig({
      {"seed", "0", "top-level seed"},
      {"kinds", "softmax,hedgehog_recurrent,taylor2_recurrent", "algorithms to time"},
      {"n_heads", tiny ? "2" : "12", "heads"},
      {"head_dim", tiny ? "16" : "64", "head dimension"},
      {"seq_lens", tiny ? "256,512,1024" : "512,1024,2048,4096,8192,16384,32768", "ascending sequence lengths"},
      {"repeats", "3", "timed repeats per cell"},
      {"warmup", "1", "untimed warmup runs per cell"},
      {"dtype", "f32", "f32 or f64"},
      {"memory_budget_mib", "3072", "cells whose accounted memory exceeds this are skipped"},
      {"gate_prefix", "256", "prefix checked against the quadratic form"},
      {"gate_rows", "16", "rows spot-checked against a float64 reference"},
      {"assert_scaling", tiny ? "false" : "true", "exit 1 when a scaling ratio check fails"},
  });
}

}  // namespace

ExperimentConfig default_config(const std::string& command, bool tiny) {
  if (command == "recall") return recall_defaults(tiny);
  if (command == "distill") return distill_defaults(tiny);
  if (command == "analyze") return analyze_defaults(tiny);
  if (command == "bench") return bench_defaults(tiny);
  throw ConfigError("", "unknown command '" + command + "'");
}

ExperimentConfig resolve_config(const std::string& command, const RunOptions& options) {
  ExperimentConfig cfg = default_config(command, options.tiny);
  if (options.config) cfg.merge_file(*options.config);
  if (options.seed) cfg.set("seed", std::to_string(*options.seed));
  return cfg;
}

int run_command(const std::string& command, const RunOptions& options, std::ostream& out, std::ostream& log) {
  try {
    const ExperimentConfig cfg = resolve_config(command, options);
    if (options.dry_run) {
      out << cfg.to_text();
      return kExitOk;
    }
    if (command == "recall") return detail::cmd_recall(cfg, options, out, log);
    if (command == "distill") return detail::cmd_distill(cfg, options, out, log);
    if (command == "analyze") return detail::cmd_analyze(cfg, options, out, log);
    return detail::cmd_bench(cfg, options, out, log);
  } catch (const ConfigError& e) {
    log << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const detail::IoError& e) {
    log << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const hedgehog::ParseError& e) {
    log << "corrupt input: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::filesystem::filesystem_error& e) {
    log << "i/o error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    log << "run failed: " << e.what() << '\n';
    return kExitAssertion;
  }
}

namespace detail {

std::vector<hedgehog::FeatureMapKind> parse_kinds(const ExperimentConfig& cfg, const std::string& key) {
  std::vector<hedgehog::FeatureMapKind> kinds;
  for (const auto& name : cfg.get_list(key)) {
    try {
      kinds.push_back(hedgehog::parse_feature_map_kind(name));
    } catch (const std::exception&) {
      throw ConfigError(key, "unknown map kind '" + name + "'");
    }
  }
  return kinds;
}

hedgehog::FeatureMapOptions map_options(const ExperimentConfig& cfg) {
  hedgehog::FeatureMapOptions o;
  o.temperature = cfg.get_double("exp_temperature");
  o.taylor_scaled = cfg.get_bool("taylor_scaled");
  o.variant.negation = cfg.get_bool("hedgehog_negation");
  const auto& act = cfg.get("hedgehog_activation");
  if (act == "raw_exp") {
    o.variant.activation = hedgehog::HedgehogActivation::raw_exp;
  } else if (act == "stabilized_softmax") {
    o.variant.activation = hedgehog::HedgehogActivation::stabilized_softmax;
  } else {
    throw ConfigError("hedgehog_activation", "expected raw_exp or stabilized_softmax");
  }
  o.performer_features = cfg.get_size("performer_features");
  return o;
}

std::filesystem::path prepare_output(const RunOptions& options) {
  if (!options.out) throw ConfigError("--out", "an output directory is required");
  const auto dir = *options.out;
  std::error_code ec;
  if (std::filesystem::exists(dir, ec) && !options.force) {
    throw IoError("output directory " + dir.string() + " exists (pass --force to reuse it)");
  }
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  return dir;
}

void write_output(const std::filesystem::path& dir, const std::string& name, const std::string& contents) {
  try {
    hedgehog::write_text_file(dir / name, contents);
  } catch (const std::exception& e) {
    throw IoError(e.what());
  }
}

}  // namespace detail

}  // namespace hhlab
