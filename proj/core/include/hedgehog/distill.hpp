#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "hedgehog/feature_maps.hpp"
#include "hedgehog/numerics.hpp"
#include "hedgehog/optim.hpp"
#include "hedgehog/recall.hpp"

namespace hedgehog {

// Softmax weights of q k^T (scaled by 1/sqrt(d) when teacher_scale).
Matrix teacher_weights(const Matrix& q, const Matrix& k, bool causal, bool teacher_scale = true);

// Cross-entropy between target rows and the linear attention weights of
// phi(q), phi(k), averaged over query positions. Gradients of the loss with
// respect to the hedgehog parameters of q_map / k_map are added when the
// pointers are non-null. With k_map == nullptr the q map is shared and all
// gradient goes to grad_q.
double distillation_loss_with_targets(const Matrix& targets, const Matrix& q, const Matrix& k,
                                      const FeatureMapSpec& q_map, const FeatureMapSpec* k_map, bool causal,
                                      HedgehogGrads* grad_q = nullptr, HedgehogGrads* grad_k = nullptr);

double distillation_loss(const Matrix& q, const Matrix& k, const HedgehogParams& params, HedgehogVariant variant,
                         bool causal, bool teacher_scale = true);

// dL/dW and dL/db of distillation_loss (the `input` field is left zero).
HedgehogGrads distillation_grad(const Matrix& q, const Matrix& k, const HedgehogParams& params,
                                HedgehogVariant variant, bool causal, bool teacher_scale = true);

// Mean over rows of the teacher's row entropy; a lower bound for the loss.
double mean_teacher_entropy(const Matrix& targets, bool causal);

struct TeacherHead {
  Matrix wq;  // d_model x d
  Matrix wk;
  bool rotary = false;
  bool causal = true;
};

struct SyntheticTeacherConfig {
  std::size_t vocab_size = 256;
  std::size_t d_model = 64;
  std::size_t head_dim = 16;
  std::size_t n_layers = 1;
  std::size_t n_heads = 4;
  bool rotary = false;
};

// Random token embedding feeding frozen random projection heads.
struct SyntheticTeacher {
  SyntheticTeacherConfig config;
  Matrix embedding;                             // vocab x d_model
  std::vector<std::vector<TeacherHead>> heads;  // [layer][head]
};

SyntheticTeacher make_synthetic_teacher(const SyntheticTeacherConfig& config, const RngStream& rng);

using HeadInputs = std::vector<std::vector<std::pair<Matrix, Matrix>>>;  // [layer][head] -> (q, k)

// Frozen source of per-head queries and keys for a token sequence.
class Teacher {
 public:
  explicit Teacher(SyntheticTeacher synthetic);
  explicit Teacher(ToyTransformer transformer);

  std::size_t n_layers() const noexcept;
  std::size_t n_heads() const noexcept;
  std::size_t head_dim() const noexcept;
  std::size_t vocab_size() const noexcept;
  bool causal() const noexcept { return true; }

  HeadInputs project(std::span<const int> tokens) const;
  // Hash of every frozen parameter.
  std::uint64_t hash() const;

  const std::variant<SyntheticTeacher, ToyTransformer>& source() const noexcept { return source_; }

 private:
  std::variant<SyntheticTeacher, ToyTransformer> source_;
};

using TokenSequences = std::vector<std::vector<int>>;

TokenSequences random_token_sequences(std::size_t vocab_size, std::size_t seq_len, std::size_t count,
                                      const RngStream& rng);

struct DistillConfig {
  AdamWConfig optimizer;  // lr 1e-2, wd 0
  std::size_t epochs = 2;
  std::size_t batch_size = 8;
  bool teacher_scale = true;
  bool separate_qk = false;
  HedgehogVariant variant;
  std::uint64_t seed = 0;
  double divergence_factor = 10.0;
  std::size_t divergence_epochs = 3;
};

struct DistillHead {
  std::size_t layer = 0;
  std::size_t head = 0;
  FeatureMapSpec q_map;
  std::optional<FeatureMapSpec> k_map;
  AdamWState q_state;
  std::optional<AdamWState> k_state;
  // Entry 0 is the loss at initialization, entry e the mean loss of epoch e.
  std::vector<double> loss_history;

  const FeatureMapSpec& key_map() const noexcept { return k_map ? *k_map : q_map; }
};

struct DistillSession {
  DistillConfig config;
  Teacher teacher;
  std::vector<DistillHead> heads;
  std::size_t epochs_completed = 0;
};

class DistillDivergence : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

DistillSession make_distill_session(Teacher teacher, const DistillConfig& config);

// Trains until config.epochs epochs are complete (resumes from
// epochs_completed). The head order only affects scheduling, not results.
void distill_session_run(DistillSession& session, const TokenSequences& train,
                         const std::function<void(std::size_t epoch, const DistillSession&)>& on_epoch = {});

// Student attention weights of a trained head on teacher inputs.
Matrix distilled_weights(const DistillHead& head, const Matrix& q, const Matrix& k, bool causal);

// Mean KL(teacher || student) over heads and sequences. With
// `baseline` set, that fixed map (prescaled as in the diagnostics panel)
// replaces the distilled maps.
double heldout_kl(const DistillSession& session, const TokenSequences& sequences,
                  const std::optional<FeatureMapSpec>& baseline = std::nullopt);

// Cross-entropy loss of each head averaged over sequences.
std::vector<double> evaluate_distill_loss(const DistillSession& session, const TokenSequences& sequences);

std::string distill_loss_csv(const DistillSession& session);

// Checkpoint directory: one spec (+ optimizer state) per head, loss.csv and
// a manifest. The synthetic teacher is rebuilt from the manifest and checked
// against the recorded hash.
void save_distill_checkpoint(const DistillSession& session, const SyntheticTeacherConfig& teacher_config,
                             std::uint64_t teacher_seed, const std::filesystem::path& dir);

struct LoadedCheckpoint {
  DistillSession session;
  SyntheticTeacherConfig teacher_config;
  std::uint64_t teacher_seed = 0;
};

LoadedCheckpoint load_distill_checkpoint(const std::filesystem::path& dir);

}  // namespace hedgehog
