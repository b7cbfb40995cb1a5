#include <cstdio>
#include <sstream>

#include "common.hpp"
#include "hedgehog/distill.hpp"
#include "hedgehog/perf_bench.hpp"
#include "hedgehog/text_io.hpp"

namespace hhlab::detail {

namespace {

using hedgehog::format_double;
using hedgehog::format_sig;

hedgehog::SyntheticTeacherConfig teacher_config(const ExperimentConfig& cfg) {
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
  return tc;
}

hedgehog::DistillConfig distill_config(const ExperimentConfig& cfg) {
  hedgehog::DistillConfig dc;
  dc.optimizer.lr = cfg.get_double("lr");
  dc.optimizer.weight_decay = cfg.get_double("weight_decay");
  dc.epochs = cfg.get_size("epochs");
  dc.batch_size = cfg.get_size("batch_size");
  dc.teacher_scale = cfg.get_bool("teacher_scale");
  dc.separate_qk = cfg.get_bool("separate_qk");
  dc.variant.negation = cfg.get_bool("hedgehog_negation");
  const auto& act = cfg.get("hedgehog_activation");
  if (act == "raw_exp") {
    dc.variant.activation = hedgehog::HedgehogActivation::raw_exp;
  } else if (act == "stabilized_softmax") {
    dc.variant.activation = hedgehog::HedgehogActivation::stabilized_softmax;
  } else {
    throw ConfigError("hedgehog_activation", "expected raw_exp or stabilized_softmax");
  }
  dc.seed = cfg.get_u64("seed");
  if (dc.optimizer.lr <= 0.0) throw ConfigError("lr", "must be positive");
  if (dc.optimizer.weight_decay < 0.0) throw ConfigError("weight_decay", "must be non-negative");
  if (dc.batch_size == 0) throw ConfigError("batch_size", "must be positive");
  return dc;
}

// A resumed run must continue the exact run the checkpoint came from.
void check_resume_matches(const hedgehog::LoadedCheckpoint& ck, const hedgehog::SyntheticTeacherConfig& tc,
                          const hedgehog::DistillConfig& dc) {
  const auto& t = ck.teacher_config;
  const auto& c = ck.session.config;
  const auto mismatch = [](const char* key) { throw ConfigError(key, "differs from the resumed checkpoint"); };
  if (t.vocab_size != tc.vocab_size) mismatch("vocab_size");
  if (t.d_model != tc.d_model) mismatch("d_model");
  if (t.head_dim != tc.head_dim) mismatch("head_dim");
  if (t.n_layers != tc.n_layers) mismatch("n_layers");
  if (t.n_heads != tc.n_heads) mismatch("n_heads");
  if (t.rotary != tc.rotary) mismatch("rotary");
  if (c.seed != dc.seed) mismatch("seed");
  if (c.optimizer.lr != dc.optimizer.lr) mismatch("lr");
  if (c.optimizer.weight_decay != dc.optimizer.weight_decay) mismatch("weight_decay");
  if (c.batch_size != dc.batch_size) mismatch("batch_size");
  if (c.teacher_scale != dc.teacher_scale) mismatch("teacher_scale");
  if (c.separate_qk != dc.separate_qk) mismatch("separate_qk");
  if (c.variant != dc.variant) mismatch("hedgehog_negation");
  if (ck.session.epochs_completed > dc.epochs) mismatch("epochs");
}

}  // namespace

int cmd_distill(const ExperimentConfig& cfg, const RunOptions& options, std::ostream& out, std::ostream& log) {
  const auto tc = teacher_config(cfg);
  const auto dc = distill_config(cfg);
  const std::size_t seq_len = cfg.get_size("seq_len");
  const std::size_t n_train = cfg.get_size("n_train");
  const std::size_t n_heldout = cfg.get_size("n_heldout");
  if (seq_len < 2) throw ConfigError("seq_len", "must be at least 2");
  if (n_train == 0) throw ConfigError("n_train", "must be positive");
  if (n_heldout == 0) throw ConfigError("n_heldout", "must be positive");
  const auto baselines = parse_kinds(cfg, "baselines");
  const auto lengths = cfg.get_size_list("context_lengths");
  for (auto len : lengths) {
    if (len < seq_len) throw ConfigError("context_lengths", "every length must be at least seq_len");
  }
  const std::size_t context_sequences = cfg.get_size("context_sequences");

  const hedgehog::RngStream root(dc.seed);
  const std::uint64_t teacher_seed = root.split(kStreamTeacher).next_u64();

  // Load the checkpoint before touching the output so a corrupt one leaves no trace.
  std::optional<hedgehog::DistillSession> session;
  if (options.resume) {
    auto ck = [&] {
      try {
        return hedgehog::load_distill_checkpoint(*options.resume);
      } catch (const hedgehog::ParseError&) {
        throw;
      } catch (const std::exception& e) {
        throw IoError(std::string("cannot load checkpoint: ") + e.what());
      }
    }();
    check_resume_matches(ck, tc, dc);
    if (ck.teacher_seed != teacher_seed) throw ConfigError("seed", "teacher seed differs from the resumed checkpoint");
    session.emplace(std::move(ck.session));
    session->config.epochs = dc.epochs;
    log << "resuming after epoch " << session->epochs_completed << '\n';
  } else {
    session.emplace(hedgehog::make_distill_session(
        hedgehog::Teacher(hedgehog::make_synthetic_teacher(tc, hedgehog::RngStream(teacher_seed))), dc));
  }

  const auto dir = prepare_output(options);
  write_output(dir, "config.txt", cfg.to_text());

  const auto train = hedgehog::random_token_sequences(tc.vocab_size, seq_len, n_train, root.split(kStreamData));
  const auto heldout =
      hedgehog::random_token_sequences(tc.vocab_size, seq_len, n_heldout, root.split(kStreamHeldout));
  const std::uint64_t teacher_hash = session->teacher.hash();

  hedgehog::distill_session_run(*session, train, [&](std::size_t epoch, const hedgehog::DistillSession& s) {
    double mean = 0.0;
    for (const auto& h : s.heads) mean += h.loss_history.back();
    log << "epoch " << epoch << " mean loss " << format_sig(mean / static_cast<double>(s.heads.size()), 6) << '\n';
  });
  if (session->teacher.hash() != teacher_hash) throw std::runtime_error("teacher parameters changed during training");

  hedgehog::save_distill_checkpoint(*session, tc, teacher_seed, dir / "checkpoint");
  write_output(dir, "loss.csv", hedgehog::distill_loss_csv(*session));

  // Held-out KL against the teacher: trained maps, identity init, fixed baselines.
  const double trained_kl = hedgehog::heldout_kl(*session, heldout);
  auto untrained = hedgehog::make_distill_session(session->teacher, dc);
  const double identity_kl = hedgehog::heldout_kl(untrained, heldout);
  std::ostringstream kl_csv;
  kl_csv << "map,kl\n";
  kl_csv << "hedgehog_trained," << format_double(trained_kl) << '\n';
  kl_csv << "hedgehog_identity," << format_double(identity_kl) << '\n';
  hedgehog::FeatureMapOptions fo;
  hedgehog::RngStream brng = root.split(kStreamBaselines);
  bool beats_baselines = true;
  std::vector<std::pair<std::string, double>> baseline_kl;
  for (const auto kind : baselines) {
    const auto spec = hedgehog::make_feature_map(kind, tc.head_dim, fo, brng);
    const double kl = hedgehog::heldout_kl(*session, heldout, spec);
    baseline_kl.emplace_back(std::string(hedgehog::to_string(kind)), kl);
    kl_csv << hedgehog::to_string(kind) << ',' << format_double(kl) << '\n';
    beats_baselines = beats_baselines && trained_kl < kl;
  }
  write_output(dir, "kl.csv", kl_csv.str());

  std::ostringstream ctx_csv;
  ctx_csv << "length,mean_kl\n";
  std::vector<hedgehog::ContextKlRow> ctx;
  if (!lengths.empty()) {
    ctx = hedgehog::context_length_kl(*session, heldout, lengths, context_sequences);
    for (const auto& r : ctx) ctx_csv << r.length << ',' << format_double(r.mean_kl) << '\n';
  }
  write_output(dir, "context_kl.csv", ctx_csv.str());

  std::ostringstream summary;
  char line[160];
  summary << "heads " << session->heads.size() << ", epochs " << session->epochs_completed << '\n';
  std::snprintf(line, sizeof line, "%-20s %12s\n", "map", "heldout_kl");
  summary << line;
  std::snprintf(line, sizeof line, "%-20s %12.6f\n", "hedgehog_trained", trained_kl);
  summary << line;
  std::snprintf(line, sizeof line, "%-20s %12.6f\n", "hedgehog_identity", identity_kl);
  summary << line;
  for (const auto& [name, kl] : baseline_kl) {
    std::snprintf(line, sizeof line, "%-20s %12.6f\n", name.c_str(), kl);
    summary << line;
  }
  for (const auto& r : ctx) {
    std::snprintf(line, sizeof line, "context %-12zu %12.6f\n", r.length, r.mean_kl);
    summary << line;
  }
  const bool faithful = trained_kl < identity_kl / 3.0 && beats_baselines;
  summary << "fidelity " << (faithful ? "holds" : "does not hold") << '\n';
  write_output(dir, "summary.txt", summary.str());
  out << summary.str();
  if (cfg.get_bool("assert_fidelity") && !faithful) return kExitAssertion;
  return kExitOk;
}

}  // namespace hhlab::detail
