#include "hedgehog/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hedgehog/attention.hpp"
#include "hedgehog/text_io.hpp"

namespace hedgehog {

namespace {

std::size_t support(std::size_t row, std::size_t cols, bool causal) {
  return causal ? std::min(row + 1, cols) : cols;
}

void check_square_pair(const Matrix& a, const Matrix& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) throw std::invalid_argument(std::string(who) + ": shape mismatch");
}

int sign(double v) { return (v > 0.0) - (v < 0.0); }

}  // namespace

EntropyReport attention_entropy(const Matrix& a, bool causal) {
  if (a.empty()) throw std::invalid_argument("attention_entropy: empty input");
  EntropyReport report;
  report.per_row.resize(a.rows());
  double normalized_total = 0.0;
  std::size_t normalized_rows = 0;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto row = a.row(i);
    const std::size_t valid = support(i, a.cols(), causal);
    double total = 0.0;
    double h = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
      const double p = row[j];
      if (!(p >= 0.0)) {
        std::ostringstream msg;
        msg << "attention_entropy: negative or non-finite weight in row " << i;
        throw std::invalid_argument(msg.str());
      }
      total += p;
      if (p > 0.0) h -= p * std::log(p);
    }
    if (std::abs(total - 1.0) > 1e-6) {
      std::ostringstream msg;
      msg << "attention_entropy: row " << i << " is not stochastic (sum " << total << ")";
      throw std::invalid_argument(msg.str());
    }
    report.per_row[i] = std::max(h, 0.0);
    if (valid > 1) {
      normalized_total += report.per_row[i] / std::log(static_cast<double>(valid));
      ++normalized_rows;
    }
  }
  report.mean = std::accumulate(report.per_row.begin(), report.per_row.end(), 0.0) /
                static_cast<double>(report.per_row.size());
  report.normalized_mean = normalized_rows ? normalized_total / static_cast<double>(normalized_rows) : 0.0;
  return report;
}

MonotonicityReport monotonicity_concordance(const Matrix& d, const Matrix& a, bool causal) {
  check_square_pair(d, a, "monotonicity_concordance");
  MonotonicityReport report;
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const auto dr = d.row(i);
    const auto ar = a.row(i);
    const std::size_t valid = support(i, a.cols(), causal);
    for (std::size_t j = 0; j < valid; ++j) {
      for (std::size_t jj = j + 1; jj < valid; ++jj) {
        const int sd = sign(dr[j] - dr[jj]);
        if (sd == 0) continue;
        ++report.pairs_tested;
        if (sign(ar[j] - ar[jj]) != sd) ++report.violations;
      }
    }
  }
  report.concordance = report.pairs_tested == 0 ? 1.0
                                                : 1.0 - static_cast<double>(report.violations) /
                                                            static_cast<double>(report.pairs_tested);
  return report;
}

double attention_kl(const Matrix& a_true, const Matrix& a_pred, bool causal) {
  check_square_pair(a_true, a_pred, "attention_kl");
  if (a_true.empty()) throw std::invalid_argument("attention_kl: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < a_true.rows(); ++i) {
    const auto p = a_true.row(i);
    const auto q = a_pred.row(i);
    const std::size_t valid = support(i, a_true.cols(), causal);
    double zp = 0.0;
    double zq = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
      zp += p[j] + kKlSmoothing;
      zq += q[j] + kKlSmoothing;
    }
    double kl = 0.0;
    for (std::size_t j = 0; j < valid; ++j) {
      const double ps = (p[j] + kKlSmoothing) / zp;
      const double qs = (q[j] + kKlSmoothing) / zq;
      kl += ps * std::log(ps / qs);
    }
    total += kl;
  }
  // Rounding can push an exact match a hair below zero.
  return std::max(0.0, total / static_cast<double>(a_true.rows()));
}

Matrix scaled_dot_products(const Matrix& q, const Matrix& k) {
  if (q.cols() != k.cols()) throw std::invalid_argument("scaled_dot_products: shape mismatch");
  // One summation order for every entry: a blocked GEMM can give equal key
  // rows dot products an ulp apart, which softmax then rounds to a tie.
  const double scale = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Matrix d(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i) {
    const auto qi = q.row(i);
    for (std::size_t j = 0; j < k.rows(); ++j) {
      const auto kj = k.row(j);
      double s = 0.0;
      for (std::size_t c = 0; c < q.cols(); ++c) s += qi[c] * kj[c];
      d(i, j) = s * scale;
    }
  }
  return d;
}

namespace {

// Lenient panels score a zero row as uniform over its support.
Matrix uniform_degenerate_rows(Matrix w, bool causal) {
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const std::size_t support = causal ? i + 1 : w.cols();
    double sum = 0.0;
    for (std::size_t j = 0; j < support; ++j) sum += w(i, j);
    if (sum > 0.5) continue;
    for (std::size_t j = 0; j < support; ++j) w(i, j) = 1.0 / static_cast<double>(support);
  }
  return w;
}

}  // namespace

Matrix student_weights(const Matrix& q, const Matrix& k, const FeatureMapSpec& spec, bool causal,
                       const PanelOptions& options, std::size_t* degenerate_rows) {
  if (spec.kind == FeatureMapKind::softmax_reference) {
    if (degenerate_rows) *degenerate_rows = 0;
    return softmax_rows(scaled_dot_products(q, k), causal);
  }
  std::size_t degenerate = 0;
  Matrix w;
  if (options.prescale_fixed_maps && !spec.trainable()) {
    const double s = std::pow(static_cast<double>(q.cols()), -0.25);
    Matrix qs = q;
    Matrix ks = k;
    qs.map() *= s;
    ks.map() *= s;
    w = linear_attention_weights(apply_feature_map(spec, qs), apply_feature_map(spec, ks), causal,
                                 options.degenerate_policy, &degenerate);
  } else {
    w = linear_attention_weights(apply_feature_map(spec, q), apply_feature_map(spec, k), causal,
                                 options.degenerate_policy, &degenerate);
  }
  if (degenerate_rows) *degenerate_rows = degenerate;
  return degenerate ? uniform_degenerate_rows(std::move(w), causal) : w;
}

PanelResult property_panel(const Matrix& q, const Matrix& k, const FeatureMapSpec& spec, bool causal,
                           const PanelOptions& options) {
  if (q.rows() != k.rows() || q.cols() != k.cols() || q.empty()) {
    throw std::invalid_argument("property_panel: q and k must have equal non-empty shapes");
  }
  PanelResult r;
  const Matrix d = scaled_dot_products(q, k);
  r.softmax_weights = softmax_rows(d, causal);
  r.linear_weights = student_weights(q, k, spec, causal, options, &r.degenerate_rows);
  r.softmax_entropy = attention_entropy(r.softmax_weights, causal);
  r.entropy = attention_entropy(r.linear_weights, causal);
  r.monotonicity = monotonicity_concordance(d, r.linear_weights, causal);
  r.kl = attention_kl(r.softmax_weights, r.linear_weights, causal);
  return r;
}

std::string panel_csv(const std::vector<PanelRecord>& records) {
  std::ostringstream out;
  out << "layer,head,kind,metric,value\n";
  for (const auto& rec : records) {
    const auto emit = [&](const char* metric, double value) {
      out << rec.layer << ',' << rec.head << ',' << rec.label << ',' << metric << ',' << format_sig(value, 12)
          << '\n';
    };
    emit("entropy", rec.result.entropy.mean);
    emit("normalized_entropy", rec.result.entropy.normalized_mean);
    emit("concordance", rec.result.monotonicity.concordance);
    emit("kl", rec.result.kl);
    emit("degenerate_rows", static_cast<double>(rec.result.degenerate_rows));
  }
  return out.str();
}

std::string panel_json(const std::vector<PanelRecord>& records) {
  std::ostringstream out;
  out << "[\n";
  for (std::size_t r = 0; r < records.size(); ++r) {
    const auto& rec = records[r];
    const auto& res = rec.result;
    out << "  {\"layer\": " << rec.layer << ", \"head\": " << rec.head << ", \"kind\": \"" << rec.label << "\""
        << ", \"entropy\": " << format_sig(res.entropy.mean, 12)
        << ", \"normalized_entropy\": " << format_sig(res.entropy.normalized_mean, 12)
        << ", \"softmax_entropy\": " << format_sig(res.softmax_entropy.mean, 12)
        << ", \"concordance\": " << format_sig(res.monotonicity.concordance, 12)
        << ", \"violations\": " << res.monotonicity.violations
        << ", \"pairs_tested\": " << res.monotonicity.pairs_tested << ", \"kl\": " << format_sig(res.kl, 12)
        << ", \"degenerate_rows\": " << res.degenerate_rows << "}" << (r + 1 < records.size() ? "," : "") << '\n';
  }
  out << "]\n";
  return out.str();
}

namespace {

std::vector<double> average_ranks(const std::vector<double>& v) {
  std::vector<std::size_t> idx(v.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
  std::vector<double> ranks(v.size());
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j);
    for (std::size_t t = i; t <= j; ++t) ranks[idx[t]] = r;
    i = j + 1;
  }
  return ranks;
}

}  // namespace

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw std::invalid_argument("spearman: need two equal-length samples");
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0;
  double sxx = 0.0;
  double syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

}  // namespace hedgehog
