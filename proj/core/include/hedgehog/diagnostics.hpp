#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "hedgehog/attention.hpp"
#include "hedgehog/feature_maps.hpp"
#include "hedgehog/numerics.hpp"

namespace hedgehog {

struct EntropyReport {
  std::vector<double> per_row;  // nats
  double mean = 0.0;
  // Mean of H_i / ln(support_i) over rows with support > 1.
  double normalized_mean = 0.0;
};

struct MonotonicityReport {
  double concordance = 1.0;
  std::size_t violations = 0;
  std::size_t pairs_tested = 0;
};

inline constexpr double kKlSmoothing = 1e-12;

EntropyReport attention_entropy(const Matrix& a, bool causal);

// Within-row pairwise concordance between weights a and dot products d.
// Pairs with tied dot products are skipped.
MonotonicityReport monotonicity_concordance(const Matrix& d, const Matrix& a, bool causal);

// Mean over rows of KL(a_true || a_pred), both smoothed with kKlSmoothing
// per entry over the row support and renormalized.
double attention_kl(const Matrix& a_true, const Matrix& a_pred, bool causal);

// Scaled dot products q_i.k_j / sqrt(d).
Matrix scaled_dot_products(const Matrix& q, const Matrix& k);

struct PanelOptions {
  // Fixed (non-trainable) maps see q and k scaled by d^-1/4, so that
  // phi(q).phi(k) targets the same logit scale as the softmax teacher.
  bool prescale_fixed_maps = true;
  // lenient: a row with a zero denominator yields zero weights (uniform once
  // KL smoothing renormalizes it) and is counted in degenerate_rows.
  DegeneratePolicy degenerate_policy = DegeneratePolicy::strict;
};

struct PanelResult {
  Matrix softmax_weights;
  Matrix linear_weights;
  EntropyReport softmax_entropy;
  EntropyReport entropy;
  MonotonicityReport monotonicity;
  double kl = 0.0;
  std::size_t degenerate_rows = 0;
};

// A degenerate student row throws unless options select the lenient policy.
PanelResult property_panel(const Matrix& q, const Matrix& k, const FeatureMapSpec& spec, bool causal,
                           const PanelOptions& options = {});

// Student attention weights for spec on (q, k), honoring panel prescaling.
Matrix student_weights(const Matrix& q, const Matrix& k, const FeatureMapSpec& spec, bool causal,
                       const PanelOptions& options = {}, std::size_t* degenerate_rows = nullptr);

struct PanelRecord {
  std::size_t layer = 0;
  std::size_t head = 0;
  std::string label;  // usually the map kind
  PanelResult result;
};

// Columns: layer, head, kind, metric, value.
std::string panel_csv(const std::vector<PanelRecord>& records);
std::string panel_json(const std::vector<PanelRecord>& records);

// Average ranks (ties share the mean rank) then Pearson on ranks.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

}  // namespace hedgehog
