#include "hedgehog/feature_maps.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "hedgehog/text_io.hpp"

namespace hedgehog {

namespace {

std::atomic<std::uint64_t> g_clamp_events{0};

// Clamped pre-activation; sets `clamped` when the guard fired.
inline double guard(double z, bool& clamped) {
  if (std::isnan(z)) {
    std::ostringstream msg;
    msg << "feature map: non-finite pre-activation " << z;
    throw std::runtime_error(msg.str());
  }
  if (z > kExpClamp) {
    clamped = true;
    return kExpClamp;
  }
  if (z < -kExpClamp) {
    clamped = true;
    return -kExpClamp;
  }
  clamped = false;
  return z;
}

inline void note_clamps(std::uint64_t n) {
  if (n) g_clamp_events.fetch_add(n, std::memory_order_relaxed);
}

void require_finite(std::span<const double> x, const char* who) {
  for (double v : x) {
    if (!std::isfinite(v)) throw std::invalid_argument(std::string(who) + ": non-finite input");
  }
}

void check_hedgehog_shapes(std::span<const double> x, const HedgehogParams& p) {
  if (p.weight.rows() != x.size() || p.weight.cols() != p.bias.size()) {
    throw std::invalid_argument("phi_hedgehog: parameter shape does not match input dimension");
  }
}

// z = W^T x (+ b); returns the number of clamped coordinates.
std::uint64_t hedgehog_preactivation(std::span<const double> x, const HedgehogParams& p, bool with_bias,
                                     std::span<double> z, std::span<unsigned char> clamped) {
  const std::size_t d_in = p.weight.rows();
  const std::size_t d_out = p.weight.cols();
  for (std::size_t r = 0; r < d_out; ++r) z[r] = with_bias ? p.bias[r] : 0.0;
  for (std::size_t i = 0; i < d_in; ++i) {
    const double xi = x[i];
    const double* w = p.weight.data() + i * d_out;
    for (std::size_t r = 0; r < d_out; ++r) z[r] += w[r] * xi;
  }
  std::uint64_t events = 0;
  for (std::size_t r = 0; r < d_out; ++r) {
    bool c = false;
    z[r] = guard(z[r], c);
    clamped[r] = c;
    events += c;
  }
  return events;
}

void hedgehog_forward_into(std::span<const double> x, const HedgehogParams& p, HedgehogVariant v,
                           std::span<double> out) {
  const std::size_t d = p.weight.cols();
  std::vector<double> z(d);
  std::vector<unsigned char> clamped(d);
  const bool stabilized = v.activation == HedgehogActivation::stabilized_softmax;
  note_clamps(hedgehog_preactivation(x, p, !stabilized, z, clamped));
  if (!stabilized) {
    for (std::size_t r = 0; r < d; ++r) out[r] = std::exp(z[r]);
    if (v.negation) {
      for (std::size_t r = 0; r < d; ++r) out[d + r] = std::exp(-z[r]);
    }
    return;
  }
  // Softmax over the output dimension (over [z, -z] with negation).
  const std::size_t width = v.negation ? 2 * d : d;
  double top = -std::numeric_limits<double>::infinity();
  for (std::size_t r = 0; r < d; ++r) {
    top = std::max(top, z[r]);
    if (v.negation) top = std::max(top, -z[r]);
  }
  double total = 0.0;
  for (std::size_t r = 0; r < d; ++r) {
    out[r] = std::exp(z[r] - top);
    total += out[r];
    if (v.negation) {
      out[d + r] = std::exp(-z[r] - top);
      total += out[d + r];
    }
  }
  for (std::size_t c = 0; c < width; ++c) out[c] /= total;
}

void hedgehog_backward_into(std::span<const double> x, const HedgehogParams& p, HedgehogVariant v,
                            std::span<const double> upstream, Matrix* d_weight, std::span<double> d_bias,
                            std::span<double> d_input) {
  const std::size_t d_in = p.weight.rows();
  const std::size_t d = p.weight.cols();
  std::vector<double> z(d);
  std::vector<unsigned char> clamped(d);
  const bool stabilized = v.activation == HedgehogActivation::stabilized_softmax;
  hedgehog_preactivation(x, p, !stabilized, z, clamped);

  std::vector<double> dz(d, 0.0);
  if (!stabilized) {
    for (std::size_t r = 0; r < d; ++r) {
      if (clamped[r]) continue;
      double g = upstream[r] * std::exp(z[r]);
      if (v.negation) g -= upstream[d + r] * std::exp(-z[r]);
      dz[r] = g;
    }
  } else {
    const std::size_t width = v.negation ? 2 * d : d;
    std::vector<double> s(width);
    hedgehog_forward_into(x, p, v, s);
    double su = 0.0;
    for (std::size_t c = 0; c < width; ++c) su += s[c] * upstream[c];
    for (std::size_t r = 0; r < d; ++r) {
      double g = s[r] * (upstream[r] - su);
      if (v.negation) g -= s[d + r] * (upstream[d + r] - su);
      dz[r] = g;
    }
  }

  if (d_weight) {
    for (std::size_t i = 0; i < d_in; ++i) {
      double* w = d_weight->data() + i * d;
      for (std::size_t r = 0; r < d; ++r) w[r] += x[i] * dz[r];
    }
  }
  if (!stabilized && !d_bias.empty()) {
    for (std::size_t r = 0; r < d; ++r) d_bias[r] += dz[r];
  }
  if (!d_input.empty()) {
    for (std::size_t i = 0; i < d_in; ++i) {
      const double* w = p.weight.data() + i * d;
      double acc = 0.0;
      for (std::size_t r = 0; r < d; ++r) acc += w[r] * dz[r];
      d_input[i] += acc;
    }
  }
}

void taylor_into(std::span<const double> x, bool scaled, std::span<double> out) {
  const std::size_t d = x.size();
  const double s = scaled ? std::numbers::sqrt2 / 2.0 : 1.0;
  out[0] = 1.0;
  for (std::size_t i = 0; i < d; ++i) out[1 + i] = x[i];
  double* quad = out.data() + 1 + d;
  for (std::size_t i = 0; i < d; ++i) {
    const double xi = s * x[i];
    for (std::size_t j = 0; j < d; ++j) quad[i * d + j] = xi * x[j];
  }
}

void taylor_backward_into(std::span<const double> x, bool scaled, std::span<const double> up,
                          std::span<double> dx) {
  const std::size_t d = x.size();
  const double s = scaled ? std::numbers::sqrt2 / 2.0 : 1.0;
  const double* quad = up.data() + 1 + d;
  for (std::size_t i = 0; i < d; ++i) {
    double acc = up[1 + i];
    for (std::size_t j = 0; j < d; ++j) acc += s * (quad[i * d + j] + quad[j * d + i]) * x[j];
    dx[i] += acc;
  }
}

void elementwise_into(std::span<const double> x, ElementwiseKind kind, double t, std::span<double> out) {
  std::uint64_t events = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case ElementwiseKind::elu1:
        out[i] = v >= 0.0 ? v + 1.0 : std::exp(v);
        break;
      case ElementwiseKind::relu:
        out[i] = v > 0.0 ? v : 0.0;
        break;
      case ElementwiseKind::exp_t: {
        bool c = false;
        out[i] = std::exp(guard(t * v, c));
        events += c;
        break;
      }
    }
  }
  note_clamps(events);
}

void elementwise_backward_into(std::span<const double> x, ElementwiseKind kind, double t,
                               std::span<const double> up, std::span<double> dx) {
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    switch (kind) {
      case ElementwiseKind::elu1:
        dx[i] += up[i] * (v >= 0.0 ? 1.0 : std::exp(v));
        break;
      case ElementwiseKind::relu:
        dx[i] += v > 0.0 ? up[i] : 0.0;
        break;
      case ElementwiseKind::exp_t: {
        bool c = false;
        const double e = std::exp(guard(t * v, c));
        if (!c) dx[i] += up[i] * t * e;
        break;
      }
    }
  }
}

void performer_into(std::span<const double> x, const Matrix& proj, std::span<double> out,
                    std::span<unsigned char> clamped) {
  const std::size_t m = proj.rows();
  const double half_norm = 0.5 * dot(x, x);
  const double scale = 1.0 / std::sqrt(static_cast<double>(m));
  std::uint64_t events = 0;
  for (std::size_t r = 0; r < m; ++r) {
    bool c = false;
    const double z = guard(dot(proj.row(r), x) - half_norm, c);
    if (!clamped.empty()) clamped[r] = c;
    events += c;
    out[r] = std::exp(z) * scale;
  }
  note_clamps(events);
}

void performer_backward_into(std::span<const double> x, const Matrix& proj, std::span<const double> up,
                             std::span<double> dx) {
  const std::size_t m = proj.rows();
  const std::size_t d = x.size();
  std::vector<double> phi(m);
  std::vector<unsigned char> clamped(m);
  performer_into(x, proj, phi, clamped);
  for (std::size_t r = 0; r < m; ++r) {
    if (clamped[r]) continue;
    const double g = up[r] * phi[r];
    const auto w = proj.row(r);
    for (std::size_t i = 0; i < d; ++i) dx[i] += g * (w[i] - x[i]);
  }
}

std::pair<double, double> cosformer_weights(std::size_t position, std::size_t max_len) {
  if (position >= max_len) {
    std::ostringstream msg;
    msg << "phi_cosformer: position " << position << " outside max_len " << max_len;
    throw std::out_of_range(msg.str());
  }
  const double angle = std::numbers::pi * static_cast<double>(position) / (2.0 * static_cast<double>(max_len));
  return {std::cos(angle), std::sin(angle)};
}

void cosformer_into(std::span<const double> x, std::size_t position, std::size_t max_len, std::span<double> out) {
  const auto [c, s] = cosformer_weights(position, max_len);
  const std::size_t d = x.size();
  for (std::size_t i = 0; i < d; ++i) {
    const double r = x[i] > 0.0 ? x[i] : 0.0;
    out[i] = r * c;
    out[d + i] = r * s;
  }
}

void cosformer_backward_into(std::span<const double> x, std::size_t position, std::size_t max_len,
                             std::span<const double> up, std::span<double> dx) {
  const auto [c, s] = cosformer_weights(position, max_len);
  const std::size_t d = x.size();
  for (std::size_t i = 0; i < d; ++i) {
    if (x[i] > 0.0) dx[i] += up[i] * c + up[d + i] * s;
  }
}

ElementwiseKind elementwise_kind(FeatureMapKind kind) {
  switch (kind) {
    case FeatureMapKind::elu1:
      return ElementwiseKind::elu1;
    case FeatureMapKind::relu:
      return ElementwiseKind::relu;
    default:
      return ElementwiseKind::exp_t;
  }
}

void apply_into(const FeatureMapSpec& spec, std::span<const double> x, std::size_t position, std::span<double> out) {
  switch (spec.kind) {
    case FeatureMapKind::softmax_reference:
      throw std::invalid_argument("softmax_reference has no feature map");
    case FeatureMapKind::hedgehog:
      hedgehog_forward_into(x, spec.hedgehog, spec.variant, out);
      return;
    case FeatureMapKind::taylor2:
      taylor_into(x, spec.taylor_scaled, out);
      return;
    case FeatureMapKind::exp_t:
    case FeatureMapKind::elu1:
    case FeatureMapKind::relu:
      elementwise_into(x, elementwise_kind(spec.kind), spec.temperature, out);
      return;
    case FeatureMapKind::performer:
      performer_into(x, spec.performer_projection, out, {});
      return;
    case FeatureMapKind::cosformer:
      cosformer_into(x, position, spec.cosformer_max_len, out);
      return;
  }
}

}  // namespace

std::string_view to_string(FeatureMapKind kind) noexcept {
  switch (kind) {
    case FeatureMapKind::softmax_reference:
      return "softmax";
    case FeatureMapKind::hedgehog:
      return "hedgehog";
    case FeatureMapKind::taylor2:
      return "taylor2";
    case FeatureMapKind::exp_t:
      return "exp_t";
    case FeatureMapKind::elu1:
      return "elu1";
    case FeatureMapKind::relu:
      return "relu";
    case FeatureMapKind::performer:
      return "performer";
    case FeatureMapKind::cosformer:
      return "cosformer";
  }
  return "unknown";
}

FeatureMapKind parse_feature_map_kind(std::string_view name) {
  const auto n = trim(name);
  if (n == "softmax_reference" || n == "softmax") return FeatureMapKind::softmax_reference;
  for (auto k : kAllFeatureMapKinds) {
    if (to_string(k) == n) return k;
  }
  throw std::invalid_argument("unknown feature map kind '" + std::string(n) + "'");
}

std::uint64_t clamp_event_count() noexcept { return g_clamp_events.load(std::memory_order_relaxed); }
void reset_clamp_event_count() noexcept { g_clamp_events.store(0, std::memory_order_relaxed); }

HedgehogParams HedgehogParams::identity(std::size_t dim) {
  return {Matrix::identity(dim), std::vector<double>(dim, 0.0)};
}

HedgehogParams HedgehogParams::zeros(std::size_t dim) { return {Matrix(dim, dim), std::vector<double>(dim, 0.0)}; }

std::vector<double> HedgehogParams::flatten() const {
  std::vector<double> flat(weight.values().begin(), weight.values().end());
  flat.insert(flat.end(), bias.begin(), bias.end());
  return flat;
}

HedgehogParams HedgehogParams::unflatten(std::span<const double> flat, std::size_t dim) {
  if (flat.size() != dim * dim + dim) throw std::invalid_argument("HedgehogParams::unflatten: bad length");
  HedgehogParams p = zeros(dim);
  std::copy(flat.begin(), flat.begin() + static_cast<std::ptrdiff_t>(dim * dim), p.weight.data());
  std::copy(flat.begin() + static_cast<std::ptrdiff_t>(dim * dim), flat.end(), p.bias.begin());
  return p;
}

HedgehogGrads HedgehogGrads::zeros(std::size_t dim) {
  return {Matrix(dim, dim), std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
}

std::vector<double> phi_hedgehog(std::span<const double> x, const HedgehogParams& params, HedgehogVariant variant) {
  require_finite(x, "phi_hedgehog");
  check_hedgehog_shapes(x, params);
  std::vector<double> out(variant.negation ? 2 * params.dim() : params.dim());
  hedgehog_forward_into(x, params, variant, out);
  return out;
}

HedgehogGrads phi_hedgehog_grads(std::span<const double> x, const HedgehogParams& params, HedgehogVariant variant,
                                 std::span<const double> upstream) {
  HedgehogGrads g = HedgehogGrads::zeros(params.dim());
  g.input.assign(x.size(), 0.0);
  g.weight = Matrix(x.size(), params.dim());
  accumulate_hedgehog_grads(x, params, variant, upstream, g);
  return g;
}

void accumulate_hedgehog_grads(std::span<const double> x, const HedgehogParams& params, HedgehogVariant variant,
                               std::span<const double> upstream, HedgehogGrads& grads) {
  require_finite(x, "phi_hedgehog_grads");
  check_hedgehog_shapes(x, params);
  const std::size_t width = variant.negation ? 2 * params.dim() : params.dim();
  if (upstream.size() != width) throw std::invalid_argument("phi_hedgehog_grads: upstream has wrong length");
  hedgehog_backward_into(x, params, variant, upstream, &grads.weight, grads.bias, grads.input);
}

std::vector<double> phi_taylor(std::span<const double> x, bool scaled) {
  require_finite(x, "phi_taylor");
  const std::size_t d = x.size();
  std::vector<double> out(1 + d + d * d);
  taylor_into(x, scaled, out);
  return out;
}

std::vector<double> phi_taylor_backward(std::span<const double> x, bool scaled, std::span<const double> upstream) {
  const std::size_t d = x.size();
  if (upstream.size() != 1 + d + d * d) throw std::invalid_argument("phi_taylor_backward: upstream has wrong length");
  std::vector<double> dx(d, 0.0);
  taylor_backward_into(x, scaled, upstream, dx);
  return dx;
}

std::vector<double> phi_elementwise(std::span<const double> x, ElementwiseKind kind, double temperature) {
  require_finite(x, "phi_elementwise");
  if (kind == ElementwiseKind::exp_t && !(temperature > 0.0)) {
    throw std::invalid_argument("phi_elementwise: exp_t needs t > 0");
  }
  std::vector<double> out(x.size());
  elementwise_into(x, kind, temperature, out);
  return out;
}

std::vector<double> phi_elementwise_backward(std::span<const double> x, ElementwiseKind kind, double temperature,
                                             std::span<const double> upstream) {
  if (upstream.size() != x.size()) throw std::invalid_argument("phi_elementwise_backward: length mismatch");
  std::vector<double> dx(x.size(), 0.0);
  elementwise_backward_into(x, kind, temperature, upstream, dx);
  return dx;
}

std::vector<double> phi_performer(std::span<const double> x, const Matrix& proj) {
  require_finite(x, "phi_performer");
  if (proj.rows() == 0 || proj.cols() != x.size()) throw std::invalid_argument("phi_performer: projection shape");
  std::vector<double> out(proj.rows());
  performer_into(x, proj, out, {});
  return out;
}

std::vector<double> phi_performer_backward(std::span<const double> x, const Matrix& proj,
                                           std::span<const double> upstream) {
  if (upstream.size() != proj.rows()) throw std::invalid_argument("phi_performer_backward: upstream length");
  std::vector<double> dx(x.size(), 0.0);
  performer_backward_into(x, proj, upstream, dx);
  return dx;
}

std::vector<double> phi_cosformer(std::span<const double> x, std::size_t position, std::size_t max_len) {
  require_finite(x, "phi_cosformer");
  std::vector<double> out(2 * x.size());
  cosformer_into(x, position, max_len, out);
  return out;
}

std::vector<double> phi_cosformer_backward(std::span<const double> x, std::size_t position, std::size_t max_len,
                                           std::span<const double> upstream) {
  if (upstream.size() != 2 * x.size()) throw std::invalid_argument("phi_cosformer_backward: upstream length");
  std::vector<double> dx(x.size(), 0.0);
  cosformer_backward_into(x, position, max_len, upstream, dx);
  return dx;
}

std::size_t FeatureMapSpec::feature_dim() const {
  const std::size_t d = head_dim;
  switch (kind) {
    case FeatureMapKind::softmax_reference:
      return d;
    case FeatureMapKind::hedgehog:
      return variant.negation ? 2 * d : d;
    case FeatureMapKind::taylor2:
      return 1 + d + d * d;
    case FeatureMapKind::exp_t:
    case FeatureMapKind::elu1:
    case FeatureMapKind::relu:
      return d;
    case FeatureMapKind::performer:
      return performer_projection.rows();
    case FeatureMapKind::cosformer:
      return 2 * d;
  }
  return d;
}

void FeatureMapSpec::validate() const {
  if (head_dim == 0) throw std::invalid_argument("feature map: head_dim must be positive");
  switch (kind) {
    case FeatureMapKind::hedgehog:
      if (hedgehog.weight.rows() != head_dim || hedgehog.weight.cols() != head_dim ||
          hedgehog.bias.size() != head_dim) {
        throw std::invalid_argument("feature map: hedgehog parameters do not match head_dim");
      }
      if (!hedgehog.weight.all_finite()) throw std::invalid_argument("feature map: non-finite hedgehog weight");
      for (double b : hedgehog.bias) {
        if (!std::isfinite(b)) throw std::invalid_argument("feature map: non-finite hedgehog bias");
      }
      break;
    case FeatureMapKind::exp_t:
      if (!(temperature > 0.0)) throw std::invalid_argument("feature map: exp_t temperature must be positive");
      break;
    case FeatureMapKind::performer:
      if (performer_projection.rows() == 0 || performer_projection.cols() != head_dim) {
        throw std::invalid_argument("feature map: performer projection must be m x head_dim");
      }
      break;
    case FeatureMapKind::cosformer:
      if (cosformer_max_len == 0) throw std::invalid_argument("feature map: cosformer max_len must be positive");
      break;
    default:
      break;
  }
}

FeatureMapSpec make_feature_map(FeatureMapKind kind, std::size_t head_dim, const FeatureMapOptions& options,
                                RngStream& rng) {
  FeatureMapSpec spec;
  spec.kind = kind;
  spec.head_dim = head_dim;
  spec.variant = options.variant;
  spec.temperature = options.temperature;
  spec.taylor_scaled = options.taylor_scaled;
  if (kind == FeatureMapKind::hedgehog) spec.hedgehog = HedgehogParams::identity(head_dim);
  if (kind == FeatureMapKind::performer) {
    const std::size_t m = options.performer_features ? options.performer_features : head_dim;
    spec.performer_projection = seeded_gaussian(rng, m, head_dim);
  }
  if (kind == FeatureMapKind::cosformer) spec.cosformer_max_len = options.cosformer_max_len;
  spec.validate();
  return spec;
}

std::vector<double> apply_feature_map(const FeatureMapSpec& spec, std::span<const double> x, std::size_t position) {
  if (x.size() != spec.head_dim) throw std::invalid_argument("apply_feature_map: input dimension mismatch");
  require_finite(x, "apply_feature_map");
  std::vector<double> out(spec.feature_dim());
  apply_into(spec, x, position, out);
  return out;
}

Matrix apply_feature_map(const FeatureMapSpec& spec, const Matrix& x) {
  if (x.cols() != spec.head_dim) throw std::invalid_argument("apply_feature_map: input dimension mismatch");
  if (!x.all_finite()) throw std::invalid_argument("apply_feature_map: non-finite input");
  Matrix out(x.rows(), spec.feature_dim());
  for (std::size_t r = 0; r < x.rows(); ++r) apply_into(spec, x.row(r), r, out.row(r));
  return out;
}

Matrix feature_map_backward(const FeatureMapSpec& spec, const Matrix& x, const Matrix& d_features,
                            HedgehogGrads* param_grads) {
  if (x.cols() != spec.head_dim || d_features.rows() != x.rows() || d_features.cols() != spec.feature_dim()) {
    throw std::invalid_argument("feature_map_backward: shape mismatch");
  }
  Matrix dx(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const auto xr = x.row(r);
    const auto up = d_features.row(r);
    auto out = dx.row(r);
    switch (spec.kind) {
      case FeatureMapKind::softmax_reference:
        throw std::invalid_argument("softmax_reference has no feature map");
      case FeatureMapKind::hedgehog:
        hedgehog_backward_into(xr, spec.hedgehog, spec.variant, up, param_grads ? &param_grads->weight : nullptr,
                               param_grads ? std::span<double>(param_grads->bias) : std::span<double>{}, out);
        break;
      case FeatureMapKind::taylor2:
        taylor_backward_into(xr, spec.taylor_scaled, up, out);
        break;
      case FeatureMapKind::exp_t:
      case FeatureMapKind::elu1:
      case FeatureMapKind::relu:
        elementwise_backward_into(xr, elementwise_kind(spec.kind), spec.temperature, up, out);
        break;
      case FeatureMapKind::performer:
        performer_backward_into(xr, spec.performer_projection, up, out);
        break;
      case FeatureMapKind::cosformer:
        cosformer_backward_into(xr, r, spec.cosformer_max_len, up, out);
        break;
    }
  }
  return dx;
}

namespace {

void write_matrix(std::ostringstream& out, std::string_view name, const Matrix& m) {
  out << name << '=' << m.rows() << 'x' << m.cols() << '\n';
  for (std::size_t r = 0; r < m.rows(); ++r) out << format_doubles(m.row(r)) << '\n';
}

Matrix read_matrix(LineCursor& cursor, const KeyValueLine& header) {
  const auto x = header.value.find('x');
  if (x == std::string::npos) throw ParseError("matrix header must be ROWSxCOLS", header.line);
  long long rows = 0;
  long long cols = 0;
  try {
    rows = parse_integer(std::string_view(header.value).substr(0, x));
    cols = parse_integer(std::string_view(header.value).substr(x + 1));
  } catch (const std::invalid_argument& e) {
    throw ParseError(e.what(), header.line);
  }
  if (rows < 0 || cols < 0) throw ParseError("negative matrix dimension", header.line);
  Matrix m(static_cast<std::size_t>(rows), static_cast<std::size_t>(cols));
  for (long long r = 0; r < rows; ++r) {
    const std::string line = cursor.raw_line();
    std::vector<double> values;
    try {
      values = parse_doubles(line);
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), cursor.line_number());
    }
    if (values.size() != static_cast<std::size_t>(cols)) {
      throw ParseError("matrix row has wrong number of entries", cursor.line_number());
    }
    std::copy(values.begin(), values.end(), m.row(static_cast<std::size_t>(r)).begin());
  }
  return m;
}

}  // namespace

std::string serialize_feature_map(const FeatureMapSpec& spec) {
  std::ostringstream out;
  out << "kind=" << to_string(spec.kind) << '\n';
  out << "head_dim=" << spec.head_dim << '\n';
  switch (spec.kind) {
    case FeatureMapKind::hedgehog:
      out << "variant.activation="
          << (spec.variant.activation == HedgehogActivation::raw_exp ? "raw_exp" : "stabilized_softmax") << '\n';
      out << "variant.negation=" << (spec.variant.negation ? 1 : 0) << '\n';
      write_matrix(out, "hedgehog.weight", spec.hedgehog.weight);
      out << "hedgehog.bias=" << format_doubles(spec.hedgehog.bias) << '\n';
      break;
    case FeatureMapKind::exp_t:
      out << "temperature=" << format_double(spec.temperature) << '\n';
      break;
    case FeatureMapKind::taylor2:
      out << "taylor.scaled=" << (spec.taylor_scaled ? 1 : 0) << '\n';
      break;
    case FeatureMapKind::performer:
      write_matrix(out, "performer.projection", spec.performer_projection);
      break;
    case FeatureMapKind::cosformer:
      out << "cosformer.max_len=" << spec.cosformer_max_len << '\n';
      break;
    default:
      break;
  }
  return out.str();
}

FeatureMapSpec parse_feature_map(std::string_view text) {
  LineCursor cursor(text);
  FeatureMapSpec spec;
  bool have_kind = false;
  bool have_dim = false;
  bool have_weight = false;
  bool have_bias = false;
  while (!cursor.at_end()) {
    const auto kv = cursor.next_entry();
    try {
      if (kv.key == "kind") {
        spec.kind = parse_feature_map_kind(kv.value);
        have_kind = true;
      } else if (kv.key == "head_dim") {
        spec.head_dim = static_cast<std::size_t>(parse_integer(kv.value));
        have_dim = true;
      } else if (kv.key == "variant.activation") {
        if (kv.value == "raw_exp") {
          spec.variant.activation = HedgehogActivation::raw_exp;
        } else if (kv.value == "stabilized_softmax") {
          spec.variant.activation = HedgehogActivation::stabilized_softmax;
        } else {
          throw ParseError("unknown activation '" + kv.value + "'", kv.line);
        }
      } else if (kv.key == "variant.negation") {
        spec.variant.negation = parse_bool(kv.value);
      } else if (kv.key == "hedgehog.weight") {
        spec.hedgehog.weight = read_matrix(cursor, kv);
        have_weight = true;
      } else if (kv.key == "hedgehog.bias") {
        spec.hedgehog.bias = parse_doubles(kv.value);
        have_bias = true;
      } else if (kv.key == "temperature") {
        spec.temperature = parse_double(kv.value);
      } else if (kv.key == "taylor.scaled") {
        spec.taylor_scaled = parse_bool(kv.value);
      } else if (kv.key == "performer.projection") {
        spec.performer_projection = read_matrix(cursor, kv);
      } else if (kv.key == "cosformer.max_len") {
        spec.cosformer_max_len = static_cast<std::size_t>(parse_integer(kv.value));
      } else {
        throw ParseError("unknown key '" + kv.key + "'", kv.line);
      }
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), kv.line);
    }
  }
  if (!have_kind || !have_dim) throw ParseError("feature map text needs kind and head_dim", cursor.line_number());
  if (spec.kind == FeatureMapKind::hedgehog && (!have_weight || !have_bias)) {
    throw ParseError("hedgehog feature map needs weight and bias", cursor.line_number());
  }
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ParseError(e.what(), cursor.line_number());
  }
  return spec;
}

void save_feature_map(const FeatureMapSpec& spec, const std::filesystem::path& path) {
  write_text_file(path, serialize_feature_map(spec));
}

FeatureMapSpec load_feature_map(const std::filesystem::path& path) { return parse_feature_map(read_text_file(path)); }

}  // namespace hedgehog
