#include "hedgehog/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "hedgehog/attention.hpp"
#include "hedgehog/diagnostics.hpp"
#include "hedgehog/text_io.hpp"

namespace hedgehog {

Matrix teacher_weights(const Matrix& q, const Matrix& k, bool causal, bool teacher_scale) {
  if (q.rows() != k.rows() || q.cols() != k.cols() || q.empty()) {
    throw std::invalid_argument("teacher_weights: q and k must have equal non-empty shapes");
  }
  Matrix logits = matmul_nt(q, k);
  if (teacher_scale) logits.map() *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
  return softmax_rows(logits, causal);
}

double mean_teacher_entropy(const Matrix& targets, bool causal) {
  double total = 0.0;
  for (std::size_t i = 0; i < targets.rows(); ++i) {
    const auto row = targets.row(i);
    const std::size_t valid = causal ? i + 1 : targets.cols();
    for (std::size_t j = 0; j < valid; ++j) {
      if (row[j] > 0.0) total -= row[j] * std::log(row[j]);
    }
  }
  return total / static_cast<double>(targets.rows());
}

double distillation_loss_with_targets(const Matrix& targets, const Matrix& q, const Matrix& k,
                                      const FeatureMapSpec& q_map, const FeatureMapSpec* k_map, bool causal,
                                      HedgehogGrads* grad_q, HedgehogGrads* grad_k) {
  const std::size_t n = q.rows();
  if (targets.rows() != n || targets.cols() != n || k.rows() != n) {
    throw std::invalid_argument("distillation_loss: targets must be n x n for n queries and keys");
  }
  const FeatureMapSpec& km = k_map ? *k_map : q_map;
  const Matrix fq = apply_feature_map(q_map, q);
  const Matrix fk = apply_feature_map(km, k);
  const Matrix a = matmul_nt(fq, fk);
  const bool want_grad = grad_q != nullptr || grad_k != nullptr;
  Matrix g(want_grad ? n : 0, want_grad ? n : 0);
  const double inv_n = 1.0 / static_cast<double>(n);
  double loss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const auto arow = a.row(i);
    const auto trow = targets.row(i);
    const std::size_t valid = causal ? i + 1 : n;
    double raw = 0.0;
    double mass = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
      raw += arow[j];
      mass += trow[j];
    }
    if (raw < kDenominatorEps) {
      std::ostringstream msg;
      msg << "degenerate normalization at row " << i << " (denominator " << raw << ")";
      throw std::domain_error(msg.str());
    }
    const double den = raw + kDenominatorEps;
    const double log_den = std::log(den);
    for (std::size_t j = 0; j < valid; ++j) {
      if (trow[j] > 0.0) loss -= trow[j] * (std::log(arow[j]) - log_den);
    }
    if (want_grad) {
      auto grow = g.row(i);
      for (std::size_t j = 0; j < valid; ++j) {
        const double t = trow[j] > 0.0 ? trow[j] / arow[j] : 0.0;
        grow[j] = inv_n * (mass / den - t);
      }
    }
  }
  loss *= inv_n;
  if (!std::isfinite(loss)) throw std::domain_error("distillation_loss: non-finite loss");
  if (want_grad) {
    const Matrix dfq = matmul(g, fk);
    Matrix dfk(n, fq.cols());
    dfk.map().noalias() = g.map().transpose() * fq.map();
    if (grad_q) feature_map_backward(q_map, q, dfq, q_map.trainable() ? grad_q : nullptr);
    HedgehogGrads* kg = k_map ? grad_k : grad_q;
    if (kg) feature_map_backward(km, k, dfk, km.trainable() ? kg : nullptr);
  }
  return loss;
}

namespace {

FeatureMapSpec hedgehog_spec(const HedgehogParams& params, HedgehogVariant variant) {
  FeatureMapSpec spec;
  spec.kind = FeatureMapKind::hedgehog;
  spec.head_dim = params.dim();
  spec.variant = variant;
  spec.hedgehog = params;
  spec.validate();
  return spec;
}

}  // namespace

double distillation_loss(const Matrix& q, const Matrix& k, const HedgehogParams& params, HedgehogVariant variant,
                         bool causal, bool teacher_scale) {
  const Matrix t = teacher_weights(q, k, causal, teacher_scale);
  return distillation_loss_with_targets(t, q, k, hedgehog_spec(params, variant), nullptr, causal);
}

HedgehogGrads distillation_grad(const Matrix& q, const Matrix& k, const HedgehogParams& params,
                                HedgehogVariant variant, bool causal, bool teacher_scale) {
  const Matrix t = teacher_weights(q, k, causal, teacher_scale);
  HedgehogGrads g = HedgehogGrads::zeros(params.dim());
  distillation_loss_with_targets(t, q, k, hedgehog_spec(params, variant), nullptr, causal, &g);
  return g;
}

// ----------------------------------------------------------------- teacher

SyntheticTeacher make_synthetic_teacher(const SyntheticTeacherConfig& config, const RngStream& rng) {
  if (config.vocab_size == 0 || config.d_model == 0 || config.head_dim == 0 || config.n_layers == 0 ||
      config.n_heads == 0) {
    throw std::invalid_argument("synthetic teacher: all dimensions must be positive");
  }
  if (config.rotary && config.head_dim % 2 != 0) throw std::invalid_argument("synthetic teacher: rotary needs even d");
  SyntheticTeacher t;
  t.config = config;
  RngStream er = rng.split(1);
  t.embedding = seeded_gaussian(er, config.vocab_size, config.d_model);
  // Projections N(0, 1/d_model) keep q and k entries at unit variance.
  const double s = 1.0 / std::sqrt(static_cast<double>(config.d_model));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    auto& layer = t.heads.emplace_back();
    for (std::size_t h = 0; h < config.n_heads; ++h) {
      RngStream r = rng.split(100 + l * config.n_heads + h);
      TeacherHead head;
      head.wq = seeded_gaussian(r, config.d_model, config.head_dim);
      head.wk = seeded_gaussian(r, config.d_model, config.head_dim);
      head.wq.map() *= s;
      head.wk.map() *= s;
      head.rotary = config.rotary;
      layer.push_back(std::move(head));
    }
  }
  return t;
}

Teacher::Teacher(SyntheticTeacher synthetic) : source_(std::move(synthetic)) {}
Teacher::Teacher(ToyTransformer transformer) : source_(std::move(transformer)) {
  const auto& m = std::get<ToyTransformer>(source_);
  if (m.config.attention_kind != FeatureMapKind::softmax_reference) {
    throw std::invalid_argument("teacher transformer must use softmax attention");
  }
  if (m.config.n_layers == 0) throw std::invalid_argument("teacher transformer has no attention layers");
}

std::size_t Teacher::n_layers() const noexcept {
  if (const auto* s = std::get_if<SyntheticTeacher>(&source_)) return s->config.n_layers;
  return std::get<ToyTransformer>(source_).config.n_layers;
}
std::size_t Teacher::n_heads() const noexcept {
  if (const auto* s = std::get_if<SyntheticTeacher>(&source_)) return s->config.n_heads;
  return std::get<ToyTransformer>(source_).config.n_heads;
}
std::size_t Teacher::head_dim() const noexcept {
  if (const auto* s = std::get_if<SyntheticTeacher>(&source_)) return s->config.head_dim;
  return std::get<ToyTransformer>(source_).config.head_dim;
}
std::size_t Teacher::vocab_size() const noexcept {
  if (const auto* s = std::get_if<SyntheticTeacher>(&source_)) return s->config.vocab_size;
  return std::get<ToyTransformer>(source_).config.vocab_size;
}

HeadInputs Teacher::project(std::span<const int> tokens) const {
  if (const auto* m = std::get_if<ToyTransformer>(&source_)) return attention_inputs(*m, tokens);
  const auto& t = std::get<SyntheticTeacher>(source_);
  Matrix x(tokens.size(), t.config.d_model);
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] < 0 || static_cast<std::size_t>(tokens[i]) >= t.config.vocab_size) {
      throw std::invalid_argument("teacher: token outside vocabulary");
    }
    const auto e = t.embedding.row(static_cast<std::size_t>(tokens[i]));
    std::copy(e.begin(), e.end(), x.row(i).begin());
  }
  HeadInputs out;
  for (const auto& layer : t.heads) {
    auto& dst = out.emplace_back();
    for (const auto& head : layer) {
      Matrix q = matmul(x, head.wq);
      Matrix k = matmul(x, head.wk);
      if (head.rotary) {
        apply_rotary_inplace(q);
        apply_rotary_inplace(k);
      }
      dst.emplace_back(std::move(q), std::move(k));
    }
  }
  return out;
}

std::uint64_t Teacher::hash() const {
  if (const auto* m = std::get_if<ToyTransformer>(&source_)) return content_hash(m->params);
  const auto& t = std::get<SyntheticTeacher>(source_);
  std::uint64_t h = content_hash(t.embedding.values());
  for (const auto& layer : t.heads) {
    for (const auto& head : layer) {
      h = mix64(h ^ content_hash(head.wq.values()));
      h = mix64(h ^ content_hash(head.wk.values()));
    }
  }
  return h;
}

TokenSequences random_token_sequences(std::size_t vocab_size, std::size_t seq_len, std::size_t count,
                                      const RngStream& rng) {
  if (vocab_size == 0 || seq_len == 0) throw std::invalid_argument("random_token_sequences: empty vocabulary or length");
  TokenSequences out(count);
  for (std::size_t s = 0; s < count; ++s) {
    RngStream r = rng.split(s);
    out[s].resize(seq_len);
    for (int& t : out[s]) t = static_cast<int>(r.below(vocab_size));
  }
  return out;
}

// ----------------------------------------------------------------- session

DistillSession make_distill_session(Teacher teacher, const DistillConfig& config) {
  if (config.batch_size == 0) throw std::invalid_argument("distill: batch_size must be positive");
  DistillSession s{config, std::move(teacher), {}, 0};
  const std::size_t d = s.teacher.head_dim();
  for (std::size_t l = 0; l < s.teacher.n_layers(); ++l) {
    for (std::size_t h = 0; h < s.teacher.n_heads(); ++h) {
      DistillHead head;
      head.layer = l;
      head.head = h;
      head.q_map = hedgehog_spec(HedgehogParams::identity(d), config.variant);
      head.q_state = AdamWState::zeros(head.q_map.hedgehog.parameter_count());
      if (config.separate_qk) {
        head.k_map = head.q_map;
        head.k_state = head.q_state;
      }
      s.heads.push_back(std::move(head));
    }
  }
  return s;
}

namespace {

struct HeadBatch {
  double loss = 0.0;
  HedgehogGrads gq;
  HedgehogGrads gk;
};

HeadBatch head_batch(const DistillSession& s, const DistillHead& head, const std::vector<HeadInputs>& inputs) {
  const std::size_t d = s.teacher.head_dim();
  HeadBatch b{0.0, HedgehogGrads::zeros(d), HedgehogGrads::zeros(d)};
  const bool causal = s.teacher.causal();
  for (const auto& in : inputs) {
    const auto& [q, k] = in[head.layer][head.head];
    const Matrix t = teacher_weights(q, k, causal, s.config.teacher_scale);
    b.loss += distillation_loss_with_targets(t, q, k, head.q_map, head.k_map ? &*head.k_map : nullptr, causal, &b.gq,
                                             &b.gk);
  }
  const double inv = 1.0 / static_cast<double>(inputs.size());
  b.loss *= inv;
  b.gq.weight.map() *= inv;
  b.gk.weight.map() *= inv;
  for (double& v : b.gq.bias) v *= inv;
  for (double& v : b.gk.bias) v *= inv;
  return b;
}

void apply_update(FeatureMapSpec& map, AdamWState& state, const HedgehogGrads& g, const AdamWConfig& config) {
  auto flat = map.hedgehog.flatten();
  std::vector<double> grad(g.weight.values().begin(), g.weight.values().end());
  grad.insert(grad.end(), g.bias.begin(), g.bias.end());
  adamw_step(flat, grad, state, config);
  map.hedgehog = HedgehogParams::unflatten(flat, map.head_dim);
}

std::vector<HeadInputs> project_all(const Teacher& t, const TokenSequences& seqs, std::span<const std::size_t> idx) {
  std::vector<HeadInputs> out;
  out.reserve(idx.size());
  for (std::size_t i : idx) out.push_back(t.project(seqs[i]));
  return out;
}

}  // namespace

std::vector<double> evaluate_distill_loss(const DistillSession& session, const TokenSequences& sequences) {
  std::vector<double> losses(session.heads.size(), 0.0);
  if (sequences.empty()) return losses;
  const bool causal = session.teacher.causal();
  for (const auto& seq : sequences) {
    const auto in = session.teacher.project(seq);
    for (std::size_t h = 0; h < session.heads.size(); ++h) {
      const auto& head = session.heads[h];
      const auto& [q, k] = in[head.layer][head.head];
      const Matrix t = teacher_weights(q, k, causal, session.config.teacher_scale);
      losses[h] += distillation_loss_with_targets(t, q, k, head.q_map, head.k_map ? &*head.k_map : nullptr, causal);
    }
  }
  for (double& l : losses) l /= static_cast<double>(sequences.size());
  return losses;
}

void distill_session_run(DistillSession& session, const TokenSequences& train,
                         const std::function<void(std::size_t, const DistillSession&)>& on_epoch) {
  if (train.empty()) throw std::invalid_argument("distill: no training batches");
  const std::uint64_t teacher_hash = session.teacher.hash();
  if (session.heads.empty()) return;
  if (session.heads.front().loss_history.empty()) {
    const auto initial = evaluate_distill_loss(session, train);
    for (std::size_t h = 0; h < session.heads.size(); ++h) session.heads[h].loss_history.push_back(initial[h]);
  }
  const auto& cfg = session.config;
  const RngStream root = RngStream(cfg.seed).split(0xd1);
  std::vector<std::size_t> order(train.size());
  while (session.epochs_completed < cfg.epochs) {
    const std::size_t epoch = session.epochs_completed + 1;
    std::iota(order.begin(), order.end(), 0);
    RngStream r = root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);
    std::vector<double> epoch_loss(session.heads.size(), 0.0);
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      const auto inputs = project_all(session.teacher, train, std::span(order).subspan(start, end - start));
      for (std::size_t h = 0; h < session.heads.size(); ++h) {
        auto& head = session.heads[h];
        const HeadBatch b = head_batch(session, head, inputs);
        apply_update(head.q_map, head.q_state, b.gq, cfg.optimizer);
        if (head.k_map) apply_update(*head.k_map, *head.k_state, b.gk, cfg.optimizer);
        epoch_loss[h] += b.loss;
      }
      ++batches;
    }
    for (std::size_t h = 0; h < session.heads.size(); ++h) {
      session.heads[h].loss_history.push_back(epoch_loss[h] / static_cast<double>(batches));
    }
    session.epochs_completed = epoch;
    if (on_epoch) on_epoch(epoch, session);
    // Divergence: any head above factor x its initial loss for the last k epochs.
    for (const auto& head : session.heads) {
      const auto& hist = head.loss_history;
      if (hist.size() <= cfg.divergence_epochs) continue;
      bool bad = true;
      for (std::size_t e = hist.size() - cfg.divergence_epochs; e < hist.size(); ++e) {
        bad = bad && (!std::isfinite(hist[e]) || hist[e] > cfg.divergence_factor * hist.front());
      }
      if (bad) {
        std::ostringstream msg;
        msg << "distillation diverged: layer " << head.layer << " head " << head.head << " loss " << hist.back()
            << " vs initial " << hist.front() << " for " << cfg.divergence_epochs << " epochs";
        throw DistillDivergence(msg.str());
      }
    }
  }
  if (session.teacher.hash() != teacher_hash) throw std::logic_error("distill: teacher parameters changed");
}

Matrix distilled_weights(const DistillHead& head, const Matrix& q, const Matrix& k, bool causal) {
  return linear_attention_weights(apply_feature_map(head.q_map, q), apply_feature_map(head.key_map(), k), causal);
}

double heldout_kl(const DistillSession& session, const TokenSequences& sequences,
                  const std::optional<FeatureMapSpec>& baseline) {
  if (sequences.empty()) throw std::invalid_argument("heldout_kl: no sequences");
  const bool causal = session.teacher.causal();
  // Fixed maps such as relu can zero a whole row; score it rather than abort.
  PanelOptions lenient;
  lenient.degenerate_policy = DegeneratePolicy::lenient;
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    const auto in = session.teacher.project(seq);
    for (const auto& head : session.heads) {
      const auto& [q, k] = in[head.layer][head.head];
      const Matrix t = teacher_weights(q, k, causal, session.config.teacher_scale);
      const Matrix p = baseline ? student_weights(q, k, *baseline, causal, lenient) : distilled_weights(head, q, k, causal);
      total += attention_kl(t, p, causal);
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

std::string distill_loss_csv(const DistillSession& session) {
  std::ostringstream out;
  out << "epoch,head,loss\n";
  if (session.heads.empty()) return out.str();
  const std::size_t epochs = session.heads.front().loss_history.size();
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t h = 0; h < session.heads.size(); ++h) {
      out << e << ',' << h << ',' << format_double(session.heads[h].loss_history[e]) << '\n';
    }
  }
  return out.str();
}

// -------------------------------------------------------------- checkpoints

namespace {

std::string head_stem(const DistillHead& h) {
  return "layer" + std::to_string(h.layer) + "_head" + std::to_string(h.head);
}

}  // namespace

void save_distill_checkpoint(const DistillSession& session, const SyntheticTeacherConfig& tc,
                             std::uint64_t teacher_seed, const std::filesystem::path& dir) {
  if (!std::holds_alternative<SyntheticTeacher>(session.teacher.source())) {
    throw std::invalid_argument("checkpoints are only supported for synthetic teachers");
  }
  std::filesystem::create_directories(dir);
  const auto& c = session.config;
  std::ostringstream m;
  m << "format=distill-checkpoint-1\n"
    << "lr=" << format_double(c.optimizer.lr) << '\n'
    << "weight_decay=" << format_double(c.optimizer.weight_decay) << '\n'
    << "beta1=" << format_double(c.optimizer.beta1) << '\n'
    << "beta2=" << format_double(c.optimizer.beta2) << '\n'
    << "adam_eps=" << format_double(c.optimizer.eps) << '\n'
    << "epochs=" << c.epochs << '\n'
    << "batch_size=" << c.batch_size << '\n'
    << "teacher_scale=" << (c.teacher_scale ? 1 : 0) << '\n'
    << "separate_qk=" << (c.separate_qk ? 1 : 0) << '\n'
    << "hedgehog_activation="
    << (c.variant.activation == HedgehogActivation::raw_exp ? "raw_exp" : "stabilized_softmax") << '\n'
    << "hedgehog_negation=" << (c.variant.negation ? 1 : 0) << '\n'
    << "seed=" << c.seed << '\n'
    << "teacher.vocab_size=" << tc.vocab_size << '\n'
    << "teacher.d_model=" << tc.d_model << '\n'
    << "teacher.head_dim=" << tc.head_dim << '\n'
    << "teacher.n_layers=" << tc.n_layers << '\n'
    << "teacher.n_heads=" << tc.n_heads << '\n'
    << "teacher.rotary=" << (tc.rotary ? 1 : 0) << '\n'
    << "teacher.seed=" << teacher_seed << '\n'
    << "teacher.hash=" << session.teacher.hash() << '\n'
    << "epochs_completed=" << session.epochs_completed << '\n'
    << "heads=" << session.heads.size() << '\n';
  for (std::size_t i = 0; i < session.heads.size(); ++i) {
    const auto& h = session.heads[i];
    m << "head." << i << ".layer=" << h.layer << '\n';
    m << "head." << i << ".head=" << h.head << '\n';
    m << "head." << i << ".losses=" << format_doubles(h.loss_history) << '\n';
    save_feature_map(h.q_map, dir / (head_stem(h) + ".spec"));
    write_text_file(dir / (head_stem(h) + ".optim"), serialize_adamw_state(h.q_state));
    if (h.k_map) {
      save_feature_map(*h.k_map, dir / (head_stem(h) + ".k.spec"));
      write_text_file(dir / (head_stem(h) + ".k.optim"), serialize_adamw_state(*h.k_state));
    }
  }
  write_text_file(dir / "loss.csv", distill_loss_csv(session));
  // Manifest last: a directory without one is an incomplete checkpoint.
  write_text_file(dir / "manifest.txt", m.str());
}

LoadedCheckpoint load_distill_checkpoint(const std::filesystem::path& dir) {
  const auto manifest = dir / "manifest.txt";
  if (!std::filesystem::exists(manifest)) throw ParseError("checkpoint has no manifest.txt", 0);
  DistillConfig c;
  SyntheticTeacherConfig tc;
  std::uint64_t teacher_seed = 0;
  std::uint64_t teacher_hash = 0;
  std::size_t epochs_completed = 0;
  std::size_t n_heads = 0;
  struct HeadEntry {
    std::size_t layer = 0, head = 0;
    std::vector<double> losses;
  };
  std::vector<HeadEntry> entries;
  bool have_format = false;
  for (const auto& kv : parse_key_values(read_text_file(manifest))) {
    try {
      const auto as_size = [&] {
        const long long v = parse_integer(kv.value);
        if (v < 0) throw ParseError("negative value for " + kv.key, kv.line);
        return static_cast<std::size_t>(v);
      };
      const auto& k = kv.key;
      if (k == "format") {
        if (kv.value != "distill-checkpoint-1") throw ParseError("unknown checkpoint format", kv.line);
        have_format = true;
      } else if (k == "lr") c.optimizer.lr = parse_double(kv.value);
      else if (k == "weight_decay") c.optimizer.weight_decay = parse_double(kv.value);
      else if (k == "beta1") c.optimizer.beta1 = parse_double(kv.value);
      else if (k == "beta2") c.optimizer.beta2 = parse_double(kv.value);
      else if (k == "adam_eps") c.optimizer.eps = parse_double(kv.value);
      else if (k == "epochs") c.epochs = as_size();
      else if (k == "batch_size") c.batch_size = as_size();
      else if (k == "teacher_scale") c.teacher_scale = parse_bool(kv.value);
      else if (k == "separate_qk") c.separate_qk = parse_bool(kv.value);
      else if (k == "hedgehog_activation")
        c.variant.activation =
            kv.value == "raw_exp" ? HedgehogActivation::raw_exp : HedgehogActivation::stabilized_softmax;
      else if (k == "hedgehog_negation") c.variant.negation = parse_bool(kv.value);
      else if (k == "seed") c.seed = static_cast<std::uint64_t>(std::stoull(kv.value));
      else if (k == "teacher.vocab_size") tc.vocab_size = as_size();
      else if (k == "teacher.d_model") tc.d_model = as_size();
      else if (k == "teacher.head_dim") tc.head_dim = as_size();
      else if (k == "teacher.n_layers") tc.n_layers = as_size();
      else if (k == "teacher.n_heads") tc.n_heads = as_size();
      else if (k == "teacher.rotary") tc.rotary = parse_bool(kv.value);
      else if (k == "teacher.seed") teacher_seed = static_cast<std::uint64_t>(std::stoull(kv.value));
      else if (k == "teacher.hash") teacher_hash = static_cast<std::uint64_t>(std::stoull(kv.value));
      else if (k == "epochs_completed") epochs_completed = as_size();
      else if (k == "heads") {
        n_heads = as_size();
        entries.resize(n_heads);
      } else if (k.rfind("head.", 0) == 0) {
        const auto dot = k.find('.', 5);
        if (dot == std::string::npos) throw ParseError("bad head key '" + k + "'", kv.line);
        const auto idx = static_cast<std::size_t>(parse_integer(std::string_view(k).substr(5, dot - 5)));
        if (idx >= entries.size()) throw ParseError("head index out of range", kv.line);
        const auto field = k.substr(dot + 1);
        if (field == "layer") entries[idx].layer = as_size();
        else if (field == "head") entries[idx].head = as_size();
        else if (field == "losses") entries[idx].losses = parse_doubles(kv.value);
        else throw ParseError("unknown head field '" + field + "'", kv.line);
      } else {
        throw ParseError("unknown manifest key '" + k + "'", kv.line);
      }
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), kv.line);
    } catch (const std::out_of_range& e) {
      throw ParseError(e.what(), kv.line);
    }
  }
  if (!have_format) throw ParseError("manifest lacks a format line", 0);
  Teacher teacher(make_synthetic_teacher(tc, RngStream(teacher_seed)));
  if (teacher.hash() != teacher_hash) throw ParseError("teacher hash does not match the manifest", 0);
  LoadedCheckpoint out{make_distill_session(std::move(teacher), c), tc, teacher_seed};
  auto& s = out.session;
  if (s.heads.size() != n_heads) throw ParseError("manifest head count does not match the teacher", 0);
  s.epochs_completed = epochs_completed;
  for (std::size_t i = 0; i < n_heads; ++i) {
    auto& h = s.heads[i];
    if (entries[i].layer != h.layer || entries[i].head != h.head) throw ParseError("head order mismatch", 0);
    h.loss_history = entries[i].losses;
    if (h.loss_history.size() != epochs_completed + 1) {
      throw ParseError("loss history length does not match epochs_completed", 0);
    }
    const auto load_map = [&](const std::string& suffix) {
      auto spec = load_feature_map(dir / (head_stem(h) + suffix));
      if (spec.kind != FeatureMapKind::hedgehog || spec.head_dim != tc.head_dim || !(spec.variant == c.variant)) {
        throw ParseError("head spec " + head_stem(h) + suffix + " does not match the manifest", 0);
      }
      return spec;
    };
    const auto load_state = [&](const std::string& suffix, std::size_t size) {
      auto st = parse_adamw_state(read_text_file(dir / (head_stem(h) + suffix)));
      if (st.m.size() != size) throw ParseError("optimizer state size mismatch in " + head_stem(h) + suffix, 0);
      return st;
    };
    h.q_map = load_map(".spec");
    h.q_state = load_state(".optim", h.q_map.hedgehog.parameter_count());
    if (c.separate_qk) {
      h.k_map = load_map(".k.spec");
      h.k_state = load_state(".k.optim", h.k_map->hedgehog.parameter_count());
    }
  }
  return out;
}

}  // namespace hedgehog
