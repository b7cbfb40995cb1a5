#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "hedgehog/numerics.hpp"

namespace hedgehog {

enum class FeatureMapKind {
  softmax_reference,
  hedgehog,
  taylor2,
  exp_t,
  elu1,
  relu,
  performer,
  cosformer,
};

inline constexpr std::array<FeatureMapKind, 8> kAllFeatureMapKinds = {
    FeatureMapKind::softmax_reference, FeatureMapKind::taylor2, FeatureMapKind::exp_t,
    FeatureMapKind::hedgehog,          FeatureMapKind::elu1,    FeatureMapKind::relu,
    FeatureMapKind::performer,         FeatureMapKind::cosformer,
};

std::string_view to_string(FeatureMapKind kind) noexcept;
FeatureMapKind parse_feature_map_kind(std::string_view name);

// Pre-activations feeding exp() are clamped to [-kExpClamp, kExpClamp].
inline constexpr double kExpClamp = 30.0;

std::uint64_t clamp_event_count() noexcept;
void reset_clamp_event_count() noexcept;

enum class HedgehogActivation { raw_exp, stabilized_softmax };

struct HedgehogVariant {
  HedgehogActivation activation = HedgehogActivation::raw_exp;
  bool negation = true;

  friend bool operator==(const HedgehogVariant&, const HedgehogVariant&) = default;
};

// Single affine layer: pre-activation z = W^T x + b, W is d x d (column r is w_r).
struct HedgehogParams {
  Matrix weight;
  std::vector<double> bias;

  static HedgehogParams identity(std::size_t dim);
  static HedgehogParams zeros(std::size_t dim);

  std::size_t dim() const noexcept { return bias.size(); }
  std::size_t parameter_count() const noexcept { return weight.size() + bias.size(); }

  // Layout: weight (row-major) followed by bias.
  std::vector<double> flatten() const;
  static HedgehogParams unflatten(std::span<const double> flat, std::size_t dim);

  friend bool operator==(const HedgehogParams&, const HedgehogParams&) = default;
};

struct HedgehogGrads {
  Matrix weight;
  std::vector<double> bias;
  std::vector<double> input;

  static HedgehogGrads zeros(std::size_t dim);
};

std::vector<double> phi_hedgehog(std::span<const double> x, const HedgehogParams& params,
                                 HedgehogVariant variant = {});

// Gradients of upstream^T phi(x) with respect to W, b and x.
HedgehogGrads phi_hedgehog_grads(std::span<const double> x, const HedgehogParams& params,
                                 HedgehogVariant variant, std::span<const double> upstream);

// Accumulating form used inside batched backward passes; returns nothing,
// adds into grads (which must be sized for params).
void accumulate_hedgehog_grads(std::span<const double> x, const HedgehogParams& params,
                               HedgehogVariant variant, std::span<const double> upstream,
                               HedgehogGrads& grads);

// [1, x, x_i x_j for all ordered (i, j)]; scaled multiplies the quadratic
// block by 2^-1/2 so that phi(q).phi(k) = 1 + q.k + (q.k)^2 / 2.
std::vector<double> phi_taylor(std::span<const double> x, bool scaled = false);
std::vector<double> phi_taylor_backward(std::span<const double> x, bool scaled,
                                        std::span<const double> upstream);

enum class ElementwiseKind { elu1, relu, exp_t };

std::vector<double> phi_elementwise(std::span<const double> x, ElementwiseKind kind,
                                    double temperature = 1.0);
std::vector<double> phi_elementwise_backward(std::span<const double> x, ElementwiseKind kind,
                                             double temperature, std::span<const double> upstream);

// Positive random features exp(w_r.x - |x|^2 / 2) / sqrt(m); proj is m x d.
std::vector<double> phi_performer(std::span<const double> x, const Matrix& proj);
std::vector<double> phi_performer_backward(std::span<const double> x, const Matrix& proj,
                                           std::span<const double> upstream);

// [relu(x) cos(pi i / 2M), relu(x) sin(pi i / 2M)]
std::vector<double> phi_cosformer(std::span<const double> x, std::size_t position, std::size_t max_len);
std::vector<double> phi_cosformer_backward(std::span<const double> x, std::size_t position,
                                           std::size_t max_len, std::span<const double> upstream);

// Tagged description of a feature map. Only the payload fields relevant to
// `kind` are meaningful; validate() checks them against head_dim.
struct FeatureMapSpec {
  FeatureMapKind kind = FeatureMapKind::hedgehog;
  std::size_t head_dim = 0;
  HedgehogVariant variant;
  HedgehogParams hedgehog;
  double temperature = 2.0;
  bool taylor_scaled = false;
  Matrix performer_projection;
  std::size_t cosformer_max_len = 0;

  std::size_t feature_dim() const;
  void validate() const;
  bool trainable() const noexcept { return kind == FeatureMapKind::hedgehog; }

  friend bool operator==(const FeatureMapSpec&, const FeatureMapSpec&) = default;
};

struct FeatureMapOptions {
  HedgehogVariant variant;
  double temperature = 2.0;
  bool taylor_scaled = false;
  std::size_t performer_features = 0;  // 0 means m = head_dim
  std::size_t cosformer_max_len = 4096;
};

// Builds a spec with default payload: identity Hedgehog init, a Performer
// projection drawn from rng, and so on.
FeatureMapSpec make_feature_map(FeatureMapKind kind, std::size_t head_dim, const FeatureMapOptions& options,
                                RngStream& rng);

std::vector<double> apply_feature_map(const FeatureMapSpec& spec, std::span<const double> x,
                                      std::size_t position);

// Row r of x is the vector at sequence position r.
Matrix apply_feature_map(const FeatureMapSpec& spec, const Matrix& x);

// Returns d(loss)/dx given d(loss)/d(features). Hedgehog parameter
// gradients are added into param_grads when it is non-null.
Matrix feature_map_backward(const FeatureMapSpec& spec, const Matrix& x, const Matrix& d_features,
                            HedgehogGrads* param_grads);

std::string serialize_feature_map(const FeatureMapSpec& spec);
FeatureMapSpec parse_feature_map(std::string_view text);

void save_feature_map(const FeatureMapSpec& spec, const std::filesystem::path& path);
FeatureMapSpec load_feature_map(const std::filesystem::path& path);

}  // namespace hedgehog
