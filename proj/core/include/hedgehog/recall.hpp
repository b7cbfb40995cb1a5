#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hedgehog/feature_maps.hpp"
#include "hedgehog/numerics.hpp"
#include "hedgehog/optim.hpp"

namespace hedgehog {

struct RecallConfig {
  std::size_t vocab_size = 40;
  std::size_t seq_len = 128;
  std::size_t n_train = 10000;
  std::size_t n_test = 2000;
  // Tokens [0, n_keys) are keys, the rest are values. 0 means vocab_size / 2.
  std::size_t n_keys = 0;

  std::size_t key_count() const noexcept { return n_keys ? n_keys : vocab_size / 2; }
  std::size_t value_count() const noexcept { return vocab_size - key_count(); }
  // (seq_len - 1) / 2 key-value pairs followed by one query key.
  std::size_t n_pairs() const noexcept { return (seq_len - 1) / 2; }
  std::size_t token_count() const noexcept { return 2 * n_pairs() + 1; }
  void validate() const;

  static RecallConfig tiny();
};

struct RecallSample {
  std::vector<int> tokens;  // k v k v ... k_query
  int label = 0;

  friend bool operator==(const RecallSample&, const RecallSample&) = default;
};

struct RecallDataset {
  RecallConfig config;
  std::vector<RecallSample> train;
  std::vector<RecallSample> test;
};

RecallDataset gen_recall_dataset(const RecallConfig& config, const RngStream& rng);
std::vector<RecallSample> gen_recall_samples(const RecallConfig& config, std::size_t count, const RngStream& rng);

// True when the query key occurs earlier and every occurrence is paired with the label.
bool recall_label_recoverable(const RecallSample& sample, const RecallConfig& config);

struct ToyTransformerConfig {
  std::size_t vocab_size = 40;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t head_dim = 64;
  std::size_t mlp_expansion = 4;
  FeatureMapKind attention_kind = FeatureMapKind::softmax_reference;
  FeatureMapOptions feature_options;
  bool rotary = true;
  double rotary_base = 10000.0;
  std::size_t max_len = 128;

  std::size_t width() const noexcept { return n_heads * head_dim; }
  std::size_t hidden() const noexcept { return mlp_expansion * width(); }
  void validate() const;
};

// Offsets into the flat parameter vector.
struct LayerOffsets {
  std::size_t norm1, wq, wk, wv, wo, norm2, w1, b1, w2, b2;
};

struct ParameterLayout {
  std::size_t embed = 0;
  std::vector<LayerOffsets> layers;
  std::size_t final_norm = 0;
  std::size_t head_weight = 0;
  std::size_t head_bias = 0;
  // Hedgehog maps, one per (layer, head), each laid out as HedgehogParams::flatten().
  std::size_t hedgehog = 0;
  std::size_t total = 0;

  std::size_t hedgehog_offset(std::size_t layer, std::size_t head, std::size_t n_heads,
                              std::size_t head_dim) const noexcept {
    return hedgehog + (layer * n_heads + head) * (head_dim * head_dim + head_dim);
  }
};

ParameterLayout make_layout(const ToyTransformerConfig& config);

// V*D + L*(4D^2 + 2DF + F + 3D) + D + D*V + V, plus L*H*(dh^2 + dh) for hedgehog.
std::size_t closed_form_parameter_count(const ToyTransformerConfig& config);

struct ToyTransformer {
  ToyTransformerConfig config;
  ParameterLayout layout;
  std::vector<double> params;
  // Frozen random projections (performer only), one per (layer, head).
  std::vector<Matrix> performer_projections;

  std::size_t parameter_count() const noexcept { return params.size(); }
  // Feature map spec of (layer, head) built from the current parameters.
  FeatureMapSpec head_feature_map(std::size_t layer, std::size_t head) const;
};

ToyTransformer build_toy_transformer(const ToyTransformerConfig& config, const RngStream& rng);

enum class LossPositions {
  final_only,     // only the query answer
  key_positions,  // every key position (predicting its value) plus the query answer
};

struct BatchResult {
  double loss_sum = 0.0;  // sum over samples of per-sample mean cross-entropy
  double final_loss_sum = 0.0;  // sum over samples of final-position cross-entropy
  std::size_t correct = 0;
  std::size_t samples = 0;
};

// Sum reduction over samples. When grads is non-null it receives the gradient
// of loss_sum (overwritten, sized to the parameter count).
BatchResult forward_backward(const ToyTransformer& model, std::span<const RecallSample> batch,
                             std::vector<double>* grads, LossPositions positions = LossPositions::key_positions);

// Same network, parameters taken from `params` instead of model.params.
double sample_loss(const ToyTransformer& model, std::span<const double> params, const RecallSample& sample,
                   LossPositions positions);

struct HeadTrace {
  Matrix q;  // after rotary and, for linear kinds, the d^-1/4 input scale
  Matrix k;
  Matrix v;
  Matrix weights;
};

struct LayerTrace {
  Matrix input;       // residual stream entering the layer
  Matrix normed;      // attention pre-norm output
  std::vector<HeadTrace> heads;
  Matrix attention_out;  // concatenated heads before the output projection
  Matrix output;         // residual stream leaving the layer
};

struct ForwardTrace {
  std::vector<LayerTrace> layers;
  Matrix logits;  // n x vocab
};

ForwardTrace forward_trace(const ToyTransformer& model, std::span<const int> tokens);

// Per (layer, head) query/key after rotary, for distillation teachers.
std::vector<std::vector<std::pair<Matrix, Matrix>>> attention_inputs(const ToyTransformer& model,
                                                                     std::span<const int> tokens);

struct RecallTrainConfig {
  AdamWConfig optimizer;  // lr 1e-2, wd 0 by default
  std::size_t batch_size = 32;
  std::size_t max_epochs = 100;
  std::size_t patience = 10;
  LossPositions loss_positions = LossPositions::key_positions;
  std::uint64_t seed = 0;
  std::size_t entropy_samples = 200;
  double divergence_factor = 10.0;
  std::size_t divergence_epochs = 3;
  // Stop once held-out accuracy reaches this value (> 1 disables).
  double stop_accuracy = 2.0;
};

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_loss = 0.0;
  double test_accuracy = 0.0;
};

struct TrainRunResult {
  double best_test_accuracy = 0.0;
  std::size_t best_epoch = 0;
  std::size_t epochs_run = 0;
  double initial_accuracy = 0.0;
  double initial_loss = 0.0;
  std::vector<EpochRecord> curve;
  std::vector<double> entropy_per_layer;  // at the best checkpoint
  double mean_entropy = 0.0;
  bool early_stopped = false;
};

class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EvalResult {
  double loss = 0.0;  // mean final-position cross-entropy
  double accuracy = 0.0;
};

EvalResult evaluate_recall(const ToyTransformer& model, std::span<const RecallSample> samples);

// Mean causal row entropy (nats) per layer, averaged over heads, rows and samples.
std::vector<double> attention_entropy_by_layer(const ToyTransformer& model, std::span<const RecallSample> samples);

// On return model holds the best-checkpoint parameters.
TrainRunResult train_recall(ToyTransformer& model, const RecallDataset& data, const RecallTrainConfig& config,
                            const std::function<void(const EpochRecord&)>& on_epoch = {});

struct LedgerRow {
  std::string map_kind;
  std::uint64_t seed = 0;
  double lr = 0.0;
  double wd = 0.0;
  std::size_t batch = 0;
  double best_acc = 0.0;
  double mean_entropy = 0.0;
  std::size_t epochs = 0;
};

std::string ledger_header();
std::string ledger_line(const LedgerRow& row);

void save_toy_transformer(const ToyTransformer& model, const std::filesystem::path& dir);
ToyTransformer load_toy_transformer(const std::filesystem::path& dir);

}  // namespace hedgehog
