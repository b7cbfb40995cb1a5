#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "hedgehog/numerics.hpp"

namespace hedgehog {

// Added to every linear-attention denominator.
inline constexpr double kDenominatorEps = 1e-12;

struct AttentionResult {
  Matrix outputs;
  std::optional<Matrix> weights;
  // Rows whose raw denominator fell below kDenominatorEps.
  std::size_t degenerate_rows = 0;
};

// strict: a degenerate row throws. lenient: it is counted and the row
// produces (near) zero weights.
enum class DegeneratePolicy { strict, lenient };

// Running sums S = sum phi(k_j) v_j^T (d' x d) and z = sum phi(k_j).
class RecurrentState {
 public:
  RecurrentState(std::size_t feature_dim, std::size_t value_dim);

  void push(std::span<const double> phi_k, std::span<const double> v);
  // Writes phi_q^T S / (phi_q^T z + eps) into out; returns the raw denominator.
  double read(std::span<const double> phi_q, std::span<double> out) const;

  const Matrix& S() const noexcept { return s_; }
  const std::vector<double>& z() const noexcept { return z_; }
  std::size_t position() const noexcept { return position_; }
  std::size_t live_values() const noexcept { return s_.size() + z_.size(); }

 private:
  Matrix s_;
  std::vector<double> z_;
  std::size_t position_ = 0;
};

AttentionResult softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v, bool causal,
                                  bool scale = true, bool keep_weights = true);

AttentionResult linear_attention_quadratic(const Matrix& qf, const Matrix& kf, const Matrix& v, bool causal,
                                           bool keep_weights = true,
                                           DegeneratePolicy policy = DegeneratePolicy::strict);

// Causal only; never materializes an n x n object.
Matrix linear_attention_recurrent(const Matrix& qf, const Matrix& kf, const Matrix& v, bool causal = true,
                                  DegeneratePolicy policy = DegeneratePolicy::strict,
                                  std::size_t* degenerate_rows = nullptr);

// Row-normalized phi(q_i).phi(k_j) weights without the value product.
Matrix linear_attention_weights(const Matrix& qf, const Matrix& kf, bool causal,
                                DegeneratePolicy policy = DegeneratePolicy::strict,
                                std::size_t* degenerate_rows = nullptr);

// Rotates dimension pairs (2k, 2k+1) of row i by angle i * base^(-2k/d).
// inverse applies the transpose rotation, which is also the backward pass.
Matrix apply_rotary(const Matrix& x, double base = 10000.0, bool inverse = false);
void apply_rotary_inplace(Matrix& x, double base = 10000.0, bool inverse = false);

std::string weights_csv(const Matrix& a);
void write_weights_csv(const Matrix& a, const std::filesystem::path& path);
Matrix read_weights_csv(const std::filesystem::path& path);

}  // namespace hedgehog
