#include "hedgehog/attention.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "hedgehog/text_io.hpp"

namespace hedgehog {

namespace {

void check_qkv(const Matrix& q, const Matrix& k, const Matrix& v, const char* who) {
  if (q.rows() == 0) throw std::invalid_argument(std::string(who) + ": empty input");
  if (q.cols() != k.cols() || q.rows() != k.rows() || v.rows() != k.rows()) {
    std::ostringstream msg;
    msg << who << ": shape mismatch (q " << q.rows() << 'x' << q.cols() << ", k " << k.rows() << 'x' << k.cols()
        << ", v " << v.rows() << 'x' << v.cols() << ')';
    throw std::invalid_argument(msg.str());
  }
}

[[noreturn]] void degenerate(std::size_t row, double den) {
  std::ostringstream msg;
  msg << "degenerate normalization at row " << row << " (denominator " << den << ")";
  throw std::domain_error(msg.str());
}

}  // namespace

RecurrentState::RecurrentState(std::size_t feature_dim, std::size_t value_dim)
    : s_(feature_dim, value_dim), z_(feature_dim, 0.0) {}

void RecurrentState::push(std::span<const double> phi_k, std::span<const double> v) {
  if (phi_k.size() != s_.rows() || v.size() != s_.cols()) throw std::invalid_argument("RecurrentState::push: shape");
  const std::size_t dv = v.size();
  for (std::size_t r = 0; r < phi_k.size(); ++r) {
    const double f = phi_k[r];
    double* row = s_.data() + r * dv;
    for (std::size_t c = 0; c < dv; ++c) row[c] += f * v[c];
    z_[r] += f;
  }
  ++position_;
}

double RecurrentState::read(std::span<const double> phi_q, std::span<double> out) const {
  if (phi_q.size() != s_.rows() || out.size() != s_.cols()) throw std::invalid_argument("RecurrentState::read: shape");
  const std::size_t dv = out.size();
  std::fill(out.begin(), out.end(), 0.0);
  double den = 0.0;
  for (std::size_t r = 0; r < phi_q.size(); ++r) {
    const double f = phi_q[r];
    const double* row = s_.data() + r * dv;
    for (std::size_t c = 0; c < dv; ++c) out[c] += f * row[c];
    den += f * z_[r];
  }
  const double scale = 1.0 / (den + kDenominatorEps);
  for (double& o : out) o *= scale;
  return den;
}

AttentionResult softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v, bool causal, bool scale,
                                  bool keep_weights) {
  check_qkv(q, k, v, "softmax_attention");
  Matrix logits = matmul_nt(q, k);
  if (scale) logits.map() *= 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix a = softmax_rows(logits, causal);
  AttentionResult result;
  result.outputs = matmul(a, v);
  if (keep_weights) result.weights = std::move(a);
  return result;
}

Matrix linear_attention_weights(const Matrix& qf, const Matrix& kf, bool causal, DegeneratePolicy policy,
                                std::size_t* degenerate_rows) {
  if (qf.cols() != kf.cols() || qf.rows() != kf.rows() || qf.rows() == 0) {
    throw std::invalid_argument("linear_attention: feature shape mismatch");
  }
  Matrix a = matmul_nt(qf, kf);
  std::size_t bad = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    auto row = a.row(i);
    const std::size_t valid = causal ? i + 1 : a.cols();
    double den = 0.0;
    for (std::size_t j = 0; j < valid; ++j) den += row[j];
    if (den < kDenominatorEps) {
      if (policy == DegeneratePolicy::strict) degenerate(i, den);
      ++bad;
    }
    const double inv = 1.0 / (den + kDenominatorEps);
    for (std::size_t j = 0; j < valid; ++j) row[j] *= inv;
    for (std::size_t j = valid; j < a.cols(); ++j) row[j] = 0.0;
  }
  if (degenerate_rows) *degenerate_rows = bad;
  return a;
}

AttentionResult linear_attention_quadratic(const Matrix& qf, const Matrix& kf, const Matrix& v, bool causal,
                                           bool keep_weights, DegeneratePolicy policy) {
  if (v.rows() != kf.rows()) throw std::invalid_argument("linear_attention_quadratic: value shape mismatch");
  AttentionResult result;
  Matrix a = linear_attention_weights(qf, kf, causal, policy, &result.degenerate_rows);
  result.outputs = matmul(a, v);
  if (keep_weights) result.weights = std::move(a);
  return result;
}

Matrix linear_attention_recurrent(const Matrix& qf, const Matrix& kf, const Matrix& v, bool causal,
                                  DegeneratePolicy policy, std::size_t* degenerate_rows) {
  if (!causal) throw std::invalid_argument("linear_attention_recurrent: only causal attention has a recurrent form");
  if (qf.cols() != kf.cols() || qf.rows() != kf.rows() || v.rows() != kf.rows() || qf.rows() == 0) {
    throw std::invalid_argument("linear_attention_recurrent: shape mismatch");
  }
  RecurrentState state(qf.cols(), v.cols());
  Matrix y(qf.rows(), v.cols());
  std::size_t bad = 0;
  for (std::size_t i = 0; i < qf.rows(); ++i) {
    state.push(kf.row(i), v.row(i));
    const double den = state.read(qf.row(i), y.row(i));
    if (den < kDenominatorEps) {
      if (policy == DegeneratePolicy::strict) degenerate(i, den);
      ++bad;
    }
  }
  if (degenerate_rows) *degenerate_rows = bad;
  return y;
}

void apply_rotary_inplace(Matrix& x, double base, bool inverse) {
  const std::size_t d = x.cols();
  if (d % 2 != 0) throw std::invalid_argument("apply_rotary: head dimension must be even");
  std::vector<double> freq(d / 2);
  for (std::size_t p = 0; p < d / 2; ++p) {
    freq[p] = std::pow(base, -2.0 * static_cast<double>(p) / static_cast<double>(d));
  }
  const double sign = inverse ? -1.0 : 1.0;
  for (std::size_t i = 1; i < x.rows(); ++i) {
    auto row = x.row(i);
    for (std::size_t p = 0; p < d / 2; ++p) {
      const double angle = sign * static_cast<double>(i) * freq[p];
      const double c = std::cos(angle);
      const double s = std::sin(angle);
      const double a = row[2 * p];
      const double b = row[2 * p + 1];
      row[2 * p] = a * c - b * s;
      row[2 * p + 1] = a * s + b * c;
    }
  }
}

Matrix apply_rotary(const Matrix& x, double base, bool inverse) {
  Matrix out = x;
  apply_rotary_inplace(out, base, inverse);
  return out;
}

std::string weights_csv(const Matrix& a) {
  std::string out;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto row = a.row(i);
    for (std::size_t j = 0; j < row.size(); ++j) {
      if (j) out.push_back(',');
      out += format_sig(row[j], 9);
    }
    out.push_back('\n');
  }
  return out;
}

void write_weights_csv(const Matrix& a, const std::filesystem::path& path) { write_text_file(path, weights_csv(a)); }

Matrix read_weights_csv(const std::filesystem::path& path) {
  const std::string text = read_text_file(path);
  std::vector<double> data;
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    auto values = parse_doubles(line);
    if (rows == 0) cols = values.size();
    if (values.size() != cols) throw ParseError("ragged weights csv", rows + 1);
    data.insert(data.end(), values.begin(), values.end());
    ++rows;
  }
  return Matrix(rows, cols, std::move(data));
}

}  // namespace hedgehog
