#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

namespace hedgehog {

using RowMajorMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMajorMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMajorMatrix>;

// Dense row-major matrix of doubles. Rows are sequence positions, columns are
// feature / head dimensions.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }

  MatrixMap map() { return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)}; }
  ConstMatrixMap map() const {
    return {data_.data(), static_cast<Eigen::Index>(rows_), static_cast<Eigen::Index>(cols_)};
  }

  bool all_finite() const noexcept;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  // Aligned storage keeps Eigen's vectorized reductions on one summation
  // order regardless of where the allocator placed the buffer.
  std::vector<double, Eigen::aligned_allocator<double>> data_;
};

Matrix from_eigen(const RowMajorMatrix& m);

// C = A * B
Matrix matmul(const Matrix& a, const Matrix& b);
// C = A * B^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

double dot(std::span<const double> a, std::span<const double> b);
double max_abs_diff(const Matrix& a, const Matrix& b);

// Counter-based generator: draw k of a stream is a pure function of
// (key, k), so a stream can be split or replayed without shared state.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed = 0);

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t counter() const noexcept { return counter_; }

  std::uint64_t next_u64();
  // Uniform in (0, 1); never returns exactly 0 or 1.
  double uniform();
  double gaussian();
  // Uniform integer in [0, bound).
  std::uint64_t below(std::uint64_t bound);

  // Independent child stream; does not advance this stream.
  RngStream split(std::uint64_t stream_id) const;

 private:
  std::uint64_t seed_;
  std::uint64_t key_;
  std::uint64_t counter_ = 0;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

Matrix seeded_gaussian(RngStream& rng, std::size_t rows, std::size_t cols);

// Row-wise softmax. With mask_causal, entry (i, j) for j > i is exactly zero.
Matrix softmax_rows(const Matrix& m, bool mask_causal);

using ScalarFunction = std::function<double(std::span<const double>)>;

// Central differences (f(x + eps e_k) - f(x - eps e_k)) / (2 eps).
std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> theta,
                                     double eps = 1e-5);

// |a - n| / max(1e-8, |a|, |n|)
double relative_error(double analytic, double numeric) noexcept;

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_coordinate = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

GradCheckReport compare_gradients(std::span<const double> analytic, std::span<const double> numeric);

GradCheckReport grad_check(const ScalarFunction& f, std::span<const double> theta,
                           std::span<const double> analytic, double eps = 1e-5);

// FNV-1a over the raw bytes; used to prove frozen tensors stay frozen.
std::uint64_t content_hash(std::span<const double> values) noexcept;

}  // namespace hedgehog
