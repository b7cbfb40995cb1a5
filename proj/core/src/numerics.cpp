#include "hedgehog/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numbers>
#include <sstream>

namespace hedgehog {

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(data.begin(), data.end()) {
  if (data_.size() != rows * cols) {
    throw std::invalid_argument("matrix data length does not match rows x cols");
  }
}

Matrix::Matrix(std::initializer_list<std::initializer_list<double>> rows) {
  rows_ = rows.size();
  cols_ = rows_ == 0 ? 0 : rows.begin()->size();
  data_.reserve(rows_ * cols_);
  for (const auto& r : rows) {
    if (r.size() != cols_) throw std::invalid_argument("ragged matrix literal");
    data_.insert(data_.end(), r.begin(), r.end());
  }
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Matrix from_eigen(const RowMajorMatrix& m) {
  Matrix out(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()));
  out.map() = m;
  return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw std::invalid_argument("matmul: shape mismatch");
  Matrix c(a.rows(), b.cols());
  c.map().noalias() = a.map() * b.map();
  return c;
}

Matrix matmul_nt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw std::invalid_argument("matmul_nt: shape mismatch");
  Matrix c(a.rows(), b.rows());
  c.map().noalias() = a.map() * b.map().transpose();
  return c;
}

Matrix transpose(const Matrix& a) {
  Matrix t(a.cols(), a.rows());
  t.map() = a.map().transpose();
  return t;
}

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("dot: length mismatch");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double max_abs_diff(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument("max_abs_diff: shape mismatch");
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    worst = std::max(worst, std::abs(a.data()[i] - b.data()[i]));
  }
  return worst;
}

std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

RngStream::RngStream(std::uint64_t seed) : seed_(seed), key_(mix64(seed ^ 0x6A09E667F3BCC908ULL)) {}

std::uint64_t RngStream::next_u64() {
  // Two rounds keep neighbouring counters decorrelated for nearby keys.
  const std::uint64_t c = counter_++;
  return mix64(mix64(key_ + c * 0xD1B54A32D192ED03ULL) ^ key_);
}

double RngStream::uniform() {
  // 53 random mantissa bits, shifted off zero.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

double RngStream::gaussian() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = uniform();
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

std::uint64_t RngStream::below(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("RngStream::below: zero bound");
  // Rejection sampling removes modulo bias.
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                              std::numeric_limits<std::uint64_t>::max() % bound;
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % bound;
}

RngStream RngStream::split(std::uint64_t stream_id) const {
  return RngStream(mix64(seed_ ^ mix64(stream_id + 0x3C6EF372FE94F82BULL)));
}

Matrix seeded_gaussian(RngStream& rng, std::size_t rows, std::size_t cols) {
  if (rows == 0 || cols == 0) throw std::invalid_argument("seeded_gaussian: zero dimension");
  Matrix m(rows, cols);
  for (double& v : m.values()) v = rng.gaussian();
  return m;
}

Matrix softmax_rows(const Matrix& m, bool mask_causal) {
  if (m.empty()) throw std::invalid_argument("softmax_rows: empty input");
  if (!m.all_finite()) throw std::invalid_argument("softmax_rows: non-finite input");
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) {
    const std::size_t valid = mask_causal ? std::min(i + 1, m.cols()) : m.cols();
    const auto in = m.row(i);
    auto o = out.row(i);
    double row_max = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < valid; ++j) row_max = std::max(row_max, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
      o[j] = std::exp(in[j] - row_max);
      total += o[j];
    }
    for (std::size_t j = 0; j < valid; ++j) o[j] /= total;
  }
  return out;
}

std::vector<double> finite_diff_grad(const ScalarFunction& f, std::span<const double> theta, double eps) {
  if (!(eps >= 1e-6 && eps <= 1e-4)) {
    throw std::invalid_argument("finite_diff_grad: eps must lie in [1e-6, 1e-4]");
  }
  std::vector<double> x(theta.begin(), theta.end());
  std::vector<double> grad(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double saved = x[k];
    x[k] = saved + eps;
    const double up = f(x);
    x[k] = saved - eps;
    const double down = f(x);
    x[k] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      std::ostringstream msg;
      msg << "finite_diff_grad: non-finite evaluation at coordinate " << k;
      throw std::runtime_error(msg.str());
    }
    grad[k] = (up - down) / (2.0 * eps);
  }
  return grad;
}

double relative_error(double analytic, double numeric) noexcept {
  const double scale = std::max({1e-8, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

GradCheckReport compare_gradients(std::span<const double> analytic, std::span<const double> numeric) {
  if (analytic.size() != numeric.size()) {
    throw std::invalid_argument("compare_gradients: length mismatch");
  }
  GradCheckReport report;
  for (std::size_t k = 0; k < analytic.size(); ++k) {
    const double err = relative_error(analytic[k], numeric[k]);
    if (err > report.max_rel_error || k == 0) {
      report.max_rel_error = err;
      report.worst_coordinate = k;
      report.analytic = analytic[k];
      report.numeric = numeric[k];
    }
  }
  return report;
}

GradCheckReport grad_check(const ScalarFunction& f, std::span<const double> theta,
                           std::span<const double> analytic, double eps) {
  const auto numeric = finite_diff_grad(f, theta, eps);
  return compare_gradients(analytic, numeric);
}

std::uint64_t content_hash(std::span<const double> values) noexcept {
  std::uint64_t h = 0xCBF29CE484222325ULL;
  for (double v : values) {
    unsigned char bytes[sizeof(double)];
    std::memcpy(bytes, &v, sizeof(double));
    for (unsigned char b : bytes) {
      h ^= b;
      h *= 0x100000001B3ULL;
    }
  }
  return h;
}

}  // namespace hedgehog
