#include <algorithm>
#include <cstdio>
#include <sstream>

#include "common.hpp"
#include "hedgehog/attention.hpp"
#include "hedgehog/diagnostics.hpp"
#include "hedgehog/distill.hpp"
#include "hedgehog/text_io.hpp"

namespace hhlab::detail {

namespace {

std::string matrix_csv(const hedgehog::Matrix& m) {
  std::ostringstream out;
  for (std::size_t i = 0; i < m.rows(); ++i) {
    for (std::size_t j = 0; j < m.cols(); ++j) {
      if (j) out << ',';
      out << hedgehog::format_double(m(i, j));
    }
    out << '\n';
  }
  return out.str();
}

// Panel quantities for a trained head, which may carry separate q and k maps.
hedgehog::PanelResult distilled_panel(const hedgehog::DistillHead& head, const hedgehog::Matrix& q,
                                      const hedgehog::Matrix& k) {
  hedgehog::PanelResult r;
  const auto d = hedgehog::scaled_dot_products(q, k);
  r.softmax_weights = hedgehog::softmax_rows(d, true);
  r.linear_weights = hedgehog::distilled_weights(head, q, k, true);
  r.softmax_entropy = hedgehog::attention_entropy(r.softmax_weights, true);
  r.entropy = hedgehog::attention_entropy(r.linear_weights, true);
  r.monotonicity = hedgehog::monotonicity_concordance(d, r.linear_weights, true);
  r.kl = hedgehog::attention_kl(r.softmax_weights, r.linear_weights, true);
  return r;
}

struct Aggregate {
  std::string label;
  double entropy = 0.0;
  double concordance = 0.0;
  double kl = 0.0;
  std::size_t count = 0;
};

}  // namespace

int cmd_analyze(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log) {
  const std::uint64_t seed = cfg.get_u64("seed");
  const auto kinds = parse_kinds(cfg, "kinds");
  const auto fo = map_options(cfg);
  const std::size_t seq_len = cfg.get_size("seq_len");
  if (seq_len == 0) throw ConfigError("seq_len", "must be positive");
  hedgehog::PanelOptions po;
  po.prescale_fixed_maps = cfg.get_bool("prescale_fixed_maps");
  po.degenerate_policy = hedgehog::DegeneratePolicy::lenient;

  hedgehog::SyntheticTeacherConfig tc;
  tc.vocab_size = cfg.get_size("vocab_size");
  tc.d_model = cfg.get_size("d_model");
  tc.head_dim = cfg.get_size("head_dim");
  tc.n_layers = cfg.get_size("n_layers");
  tc.n_heads = cfg.get_size("n_heads");
  tc.rotary = cfg.get_bool("rotary");
  if (tc.vocab_size == 0 || tc.d_model == 0 || tc.head_dim == 0 || tc.n_layers == 0 || tc.n_heads == 0) {
    throw ConfigError("", "teacher dimensions must be positive");
  }

  const hedgehog::RngStream root(seed);
  std::optional<hedgehog::DistillSession> trained;
  const std::string checkpoint = cfg.get("checkpoint");
  if (!checkpoint.empty()) {
    auto ck = [&] {
      try {
        return hedgehog::load_distill_checkpoint(checkpoint);
      } catch (const hedgehog::ParseError&) {
        throw;
      } catch (const std::exception& e) {
        throw IoError(std::string("cannot load checkpoint: ") + e.what());
      }
    }();
    tc = ck.teacher_config;
    trained.emplace(std::move(ck.session));
  }
  const hedgehog::Teacher teacher =
      trained ? trained->teacher
              : hedgehog::Teacher(
                    hedgehog::make_synthetic_teacher(tc, hedgehog::RngStream(root.split(kStreamTeacher).next_u64())));

  const auto dir = prepare_output(options);
  write_output(dir, "config.txt", cfg.to_text());

  const auto tokens =
      hedgehog::random_token_sequences(tc.vocab_size, seq_len, 1, root.split(kStreamPanelInput)).front();
  const auto inputs = teacher.project(tokens);

  std::vector<hedgehog::PanelRecord> records;
  std::vector<Aggregate> totals;
  std::size_t degenerate = 0;
  const auto add = [&](hedgehog::PanelRecord rec) {
    auto it = std::find_if(totals.begin(), totals.end(), [&](const Aggregate& a) { return a.label == rec.label; });
    if (it == totals.end()) it = totals.insert(totals.end(), Aggregate{rec.label});
    it->entropy += rec.result.entropy.mean;
    it->concordance += rec.result.monotonicity.concordance;
    it->kl += rec.result.kl;
    ++it->count;
    if (options.export_attention) {
      std::ostringstream name;
      name << "attention/" << rec.label << "_L" << rec.layer << "_H" << rec.head << ".csv";
      std::filesystem::create_directories(dir / "attention");
      write_output(dir, name.str(), matrix_csv(rec.result.linear_weights));
    }
    records.push_back(std::move(rec));
  };

  for (std::size_t ki = 0; ki < kinds.size(); ++ki) {
    const auto kind = kinds[ki];
    hedgehog::RngStream rng = root.split(kStreamBaselines).split(static_cast<std::uint64_t>(kind));
    const auto spec = hedgehog::make_feature_map(kind, tc.head_dim, fo, rng);
    for (std::size_t l = 0; l < inputs.size(); ++l) {
      for (std::size_t h = 0; h < inputs[l].size(); ++h) {
        const auto& [q, k] = inputs[l][h];
        auto panel = hedgehog::property_panel(q, k, spec, true, po);
        degenerate += panel.degenerate_rows;
        add({l, h, std::string(hedgehog::to_string(kind)), std::move(panel)});
      }
    }
  }
  if (trained) {
    for (const auto& head : trained->heads) {
      const auto& [q, k] = inputs.at(head.layer).at(head.head);
      add({head.layer, head.head, "hedgehog_distilled", distilled_panel(head, q, k)});
    }
  }
  if (options.export_attention) {
    for (std::size_t l = 0; l < inputs.size(); ++l) {
      for (std::size_t h = 0; h < inputs[l].size(); ++h) {
        const auto& [q, k] = inputs[l][h];
        std::ostringstream name;
        name << "attention/teacher_L" << l << "_H" << h << ".csv";
        std::filesystem::create_directories(dir / "attention");
        write_output(dir, name.str(), matrix_csv(hedgehog::softmax_rows(hedgehog::scaled_dot_products(q, k), true)));
      }
    }
  }

  write_output(dir, "panel.csv", hedgehog::panel_csv(records));
  write_output(dir, "panel.json", hedgehog::panel_json(records));

  std::ostringstream summary;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %10s %12s %12s\n", "map", "entropy", "concordance", "kl");
  summary << line;
  bool softmax_exact = true;
  for (const auto& a : totals) {
    const double n = static_cast<double>(a.count);
    std::snprintf(line, sizeof line, "%-20s %10.4f %12.4f %12.6f\n", a.label.c_str(), a.entropy / n,
                  a.concordance / n, a.kl / n);
    summary << line;
  }
  for (const auto& rec : records) {
    if (rec.label == "softmax") {
      softmax_exact = softmax_exact && rec.result.monotonicity.concordance == 1.0 && rec.result.kl == 0.0;
    }
  }
  summary << "degenerate rows " << degenerate << '\n';
  summary << "softmax rows exact " << (softmax_exact ? "yes" : "no") << '\n';
  write_output(dir, "summary.txt", summary.str());
  out << summary.str();
  if (cfg.get_bool("assert_properties") && !softmax_exact) return kExitAssertion;
  return kExitOk;
}

}  // namespace hhlab::detail
