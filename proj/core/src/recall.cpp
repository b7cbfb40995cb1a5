#include "hedgehog/recall.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "hedgehog/attention.hpp"
#include "hedgehog/text_io.hpp"

namespace hedgehog {

// ---------------------------------------------------------------- dataset

void RecallConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("recall: vocab_size must be at least 2");
  if (seq_len < 3) throw std::invalid_argument("recall: seq_len must be at least 3 (pairs plus one query token)");
  if (key_count() == 0 || key_count() >= vocab_size) {
    throw std::invalid_argument("recall: key/value split leaves an empty alphabet");
  }
  if (n_train == 0 && n_test == 0) throw std::invalid_argument("recall: empty dataset");
}

RecallConfig RecallConfig::tiny() {
  RecallConfig c;
  c.vocab_size = 20;
  c.seq_len = 64;
  c.n_train = 2000;
  c.n_test = 500;
  return c;
}

std::vector<RecallSample> gen_recall_samples(const RecallConfig& config, std::size_t count, const RngStream& rng) {
  config.validate();
  const std::size_t keys = config.key_count();
  const std::size_t values = config.value_count();
  const std::size_t pairs = config.n_pairs();
  std::vector<RecallSample> out(count);
  std::vector<int> assoc(keys);
  for (std::size_t s = 0; s < count; ++s) {
    RngStream r = rng.split(s);
    for (std::size_t k = 0; k < keys; ++k) assoc[k] = static_cast<int>(keys + r.below(values));
    auto& sample = out[s];
    sample.tokens.resize(2 * pairs + 1);
    for (std::size_t p = 0; p < pairs; ++p) {
      const int key = static_cast<int>(r.below(keys));
      sample.tokens[2 * p] = key;
      sample.tokens[2 * p + 1] = assoc[static_cast<std::size_t>(key)];
    }
    const std::size_t chosen = r.below(pairs);
    const int query = sample.tokens[2 * chosen];
    sample.tokens[2 * pairs] = query;
    sample.label = assoc[static_cast<std::size_t>(query)];
  }
  return out;
}

RecallDataset gen_recall_dataset(const RecallConfig& config, const RngStream& rng) {
  RecallDataset data;
  data.config = config;
  data.train = gen_recall_samples(config, config.n_train, rng.split(1));
  data.test = gen_recall_samples(config, config.n_test, rng.split(2));
  return data;
}

bool recall_label_recoverable(const RecallSample& sample, const RecallConfig& config) {
  if (sample.tokens.size() < 3 || sample.tokens.size() % 2 == 0) return false;
  const int query = sample.tokens.back();
  if (query < 0 || static_cast<std::size_t>(query) >= config.key_count()) return false;
  bool seen = false;
  for (std::size_t p = 0; p + 1 < sample.tokens.size(); p += 2) {
    if (sample.tokens[p] != query) continue;
    if (sample.tokens[p + 1] != sample.label) return false;
    seen = true;
  }
  return seen;
}

// ------------------------------------------------------------------ model

void ToyTransformerConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("transformer: vocab_size must be at least 2");
  if (n_heads == 0 || head_dim == 0) throw std::invalid_argument("transformer: n_heads and head_dim must be positive");
  if (rotary && head_dim % 2 != 0) throw std::invalid_argument("transformer: rotary needs an even head_dim");
  if (mlp_expansion == 0) throw std::invalid_argument("transformer: mlp_expansion must be positive");
  if (max_len == 0) throw std::invalid_argument("transformer: max_len must be positive");
}

ParameterLayout make_layout(const ToyTransformerConfig& c) {
  const std::size_t D = c.width();
  const std::size_t F = c.hidden();
  const std::size_t V = c.vocab_size;
  ParameterLayout lay;
  std::size_t at = 0;
  const auto take = [&](std::size_t n) {
    const std::size_t o = at;
    at += n;
    return o;
  };
  lay.embed = take(V * D);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerOffsets o{};
    o.norm1 = take(D);
    o.wq = take(D * D);
    o.wk = take(D * D);
    o.wv = take(D * D);
    o.wo = take(D * D);
    o.norm2 = take(D);
    o.w1 = take(D * F);
    o.b1 = take(F);
    o.w2 = take(F * D);
    o.b2 = take(D);
    lay.layers.push_back(o);
  }
  lay.final_norm = take(D);
  lay.head_weight = take(D * V);
  lay.head_bias = take(V);
  lay.hedgehog = at;
  if (c.attention_kind == FeatureMapKind::hedgehog) {
    take(c.n_layers * c.n_heads * (c.head_dim * c.head_dim + c.head_dim));
  }
  lay.total = at;
  return lay;
}

std::size_t closed_form_parameter_count(const ToyTransformerConfig& c) {
  const std::size_t D = c.width();
  const std::size_t F = c.hidden();
  const std::size_t V = c.vocab_size;
  const std::size_t L = c.n_layers;
  std::size_t n = V * D + L * (4 * D * D + 2 * D * F + F + 3 * D) + D + D * V + V;
  if (c.attention_kind == FeatureMapKind::hedgehog) n += L * c.n_heads * (c.head_dim * c.head_dim + c.head_dim);
  return n;
}

namespace {

FeatureMapSpec head_spec(const ToyTransformer& m, std::span<const double> params, std::size_t layer,
                         std::size_t head) {
  const auto& c = m.config;
  FeatureMapSpec spec;
  spec.kind = c.attention_kind;
  spec.head_dim = c.head_dim;
  spec.variant = c.feature_options.variant;
  spec.temperature = c.feature_options.temperature;
  spec.taylor_scaled = c.feature_options.taylor_scaled;
  if (spec.kind == FeatureMapKind::hedgehog) {
    const std::size_t off = m.layout.hedgehog_offset(layer, head, c.n_heads, c.head_dim);
    spec.hedgehog =
        HedgehogParams::unflatten(params.subspan(off, c.head_dim * c.head_dim + c.head_dim), c.head_dim);
  } else if (spec.kind == FeatureMapKind::performer) {
    spec.performer_projection = m.performer_projections.at(layer * c.n_heads + head);
  } else if (spec.kind == FeatureMapKind::cosformer) {
    spec.cosformer_max_len = c.max_len;
  }
  return spec;
}

}  // namespace

FeatureMapSpec ToyTransformer::head_feature_map(std::size_t layer, std::size_t head) const {
  return head_spec(*this, params, layer, head);
}

ToyTransformer build_toy_transformer(const ToyTransformerConfig& config, const RngStream& rng) {
  config.validate();
  ToyTransformer m;
  m.config = config;
  m.layout = make_layout(config);
  m.params.assign(m.layout.total, 0.0);
  const std::size_t D = config.width();
  const std::size_t F = config.hidden();
  const std::size_t V = config.vocab_size;
  auto& p = m.params;
  // Embeddings N(0, 1); linear layers and biases U(-1/sqrt(fan_in), 1/sqrt(fan_in)); norm gains 1.
  RngStream embed_rng = rng.split(100);
  for (std::size_t i = 0; i < V * D; ++i) p[m.layout.embed + i] = embed_rng.gaussian();
  const auto uniform_fill = [&](RngStream& r, std::size_t off, std::size_t count, std::size_t fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < count; ++i) p[off + i] = bound * (2.0 * r.uniform() - 1.0);
  };
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    RngStream r = rng.split(200 + l);
    const auto& o = m.layout.layers[l];
    std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(o.norm1), D, 1.0);
    std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(o.norm2), D, 1.0);
    uniform_fill(r, o.wq, D * D, D);
    uniform_fill(r, o.wk, D * D, D);
    uniform_fill(r, o.wv, D * D, D);
    uniform_fill(r, o.wo, D * D, D);
    uniform_fill(r, o.w1, D * F, D);
    uniform_fill(r, o.b1, F, D);
    uniform_fill(r, o.w2, F * D, F);
    uniform_fill(r, o.b2, D, F);
  }
  std::fill_n(p.begin() + static_cast<std::ptrdiff_t>(m.layout.final_norm), D, 1.0);
  RngStream head_rng = rng.split(300);
  uniform_fill(head_rng, m.layout.head_weight, D * V, D);
  uniform_fill(head_rng, m.layout.head_bias, V, D);
  if (config.attention_kind == FeatureMapKind::hedgehog) {
    const auto ident = HedgehogParams::identity(config.head_dim).flatten();
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (std::size_t h = 0; h < config.n_heads; ++h) {
        std::copy(ident.begin(), ident.end(),
                  p.begin() + static_cast<std::ptrdiff_t>(
                                  m.layout.hedgehog_offset(l, h, config.n_heads, config.head_dim)));
      }
    }
  }
  if (config.attention_kind == FeatureMapKind::performer) {
    const std::size_t feats = config.feature_options.performer_features ? config.feature_options.performer_features
                                                                         : config.head_dim;
    for (std::size_t l = 0; l < config.n_layers; ++l) {
      for (std::size_t h = 0; h < config.n_heads; ++h) {
        RngStream r = rng.split(400 + l * config.n_heads + h);
        m.performer_projections.push_back(seeded_gaussian(r, feats, config.head_dim));
      }
    }
  }
  return m;
}

// ---------------------------------------------------------- forward/backward

namespace {

using Mat = RowMajorMatrix;
using CMap = Eigen::Map<const RowMajorMatrix>;
using MMap = Eigen::Map<RowMajorMatrix>;
using CVec = Eigen::Map<const Eigen::RowVectorXd>;
using MVec = Eigen::Map<Eigen::RowVectorXd>;

constexpr double kNormEps = 1e-6;

// Gradients accumulate in aligned storage so Eigen's vectorized reductions
// follow the same summation order on every call.
using GradBuffer = std::vector<double, Eigen::aligned_allocator<double>>;

CMap cmap(std::span<const double> p, std::size_t off, std::size_t r, std::size_t c) {
  return CMap(p.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
MMap mmap(GradBuffer& p, std::size_t off, std::size_t r, std::size_t c) {
  return MMap(p.data() + off, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
CVec cvec(std::span<const double> p, std::size_t off, std::size_t n) {
  return CVec(p.data() + off, static_cast<Eigen::Index>(n));
}
MVec mvec(GradBuffer& p, std::size_t off, std::size_t n) {
  return MVec(p.data() + off, static_cast<Eigen::Index>(n));
}

Matrix to_matrix(const Mat& m) { return from_eigen(m); }

struct NormCache {
  Mat xhat;
  Eigen::VectorXd inv;
};

Mat rmsnorm(const Mat& x, const CVec& gain, NormCache& cache) {
  const auto D = static_cast<double>(x.cols());
  cache.inv.resize(x.rows());
  cache.xhat.resize(x.rows(), x.cols());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double ms = x.row(r).squaredNorm() / D;
    cache.inv(r) = 1.0 / std::sqrt(ms + kNormEps);
    cache.xhat.row(r) = x.row(r) * cache.inv(r);
  }
  return cache.xhat.array().rowwise() * gain.array();
}

// Returns dx; adds dgain.
Mat rmsnorm_backward(const NormCache& cache, const CVec& gain, const Mat& dy, MVec dgain) {
  const auto D = static_cast<double>(dy.cols());
  dgain += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  Mat dxhat = dy.array().rowwise() * gain.array();
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double m = dxhat.row(r).dot(cache.xhat.row(r)) / D;
    dx.row(r) = cache.inv(r) * (dxhat.row(r) - m * cache.xhat.row(r));
  }
  return dx;
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)); }
inline double gelu_grad(double x) {
  return 0.5 * (1.0 + std::erf(x * std::numbers::sqrt2 / 2.0)) +
         x * std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

struct HeadCache {
  Matrix q;  // post-rotary
  Matrix k;
  Matrix v;
  Matrix fq;
  Matrix fk;
  Matrix a;  // normalized weights (causal, n x n)
  std::vector<double> den;  // raw + eps, linear kinds only
};

struct LayerCache {
  Mat x_in;
  NormCache n1;
  Mat xn1;
  std::vector<HeadCache> heads;
  Mat ycat;
  Mat x_mid;
  NormCache n2;
  Mat xn2;
  Mat h1;
  Mat g;
};

struct SampleCache {
  std::vector<LayerCache> layers;
  Mat x_final;
  NormCache nf;
  Mat xnf;
};

struct Target {
  std::size_t position;
  int token;
};

std::vector<Target> loss_targets(const RecallSample& s, LossPositions positions) {
  std::vector<Target> t;
  const std::size_t n = s.tokens.size();
  if (positions == LossPositions::key_positions) {
    for (std::size_t p = 0; p + 2 < n; p += 2) t.push_back({p, s.tokens[p + 1]});
  }
  t.push_back({n - 1, s.label});
  return t;
}

class Network {
 public:
  Network(const ToyTransformer& model, std::span<const double> params) : m_(model), p_(params) {
    const auto& c = m_.config;
    if (params.size() != m_.layout.total) throw std::invalid_argument("transformer: parameter vector has wrong size");
    specs_.reserve(c.n_layers * c.n_heads);
    if (c.attention_kind != FeatureMapKind::softmax_reference) {
      for (std::size_t l = 0; l < c.n_layers; ++l) {
        for (std::size_t h = 0; h < c.n_heads; ++h) specs_.push_back(head_spec(m_, p_, l, h));
      }
    }
  }

  // Runs the residual stream; fills cache. Returns the final normed states.
  void forward(std::span<const int> tokens, SampleCache& cache) const {
    const auto& c = m_.config;
    const auto& lay = m_.layout;
    const std::size_t n = tokens.size();
    const std::size_t D = c.width();
    const std::size_t F = c.hidden();
    if (n == 0) throw std::invalid_argument("transformer: empty sequence");
    if (n > c.max_len) throw std::invalid_argument("transformer: sequence longer than max_len");
    Mat x(n, D);
    const auto embed = cmap(p_, lay.embed, c.vocab_size, D);
    for (std::size_t t = 0; t < n; ++t) {
      if (tokens[t] < 0 || static_cast<std::size_t>(tokens[t]) >= c.vocab_size) {
        throw std::invalid_argument("transformer: token outside vocabulary");
      }
      x.row(static_cast<Eigen::Index>(t)) = embed.row(tokens[t]);
    }
    cache.layers.resize(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      const auto& o = lay.layers[l];
      auto& lc = cache.layers[l];
      lc.x_in = x;
      lc.xn1 = rmsnorm(x, cvec(p_, o.norm1, D), lc.n1);
      const Mat q = lc.xn1 * cmap(p_, o.wq, D, D);
      const Mat k = lc.xn1 * cmap(p_, o.wk, D, D);
      const Mat v = lc.xn1 * cmap(p_, o.wv, D, D);
      lc.heads.resize(c.n_heads);
      lc.ycat.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(D));
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto cols = static_cast<Eigen::Index>(h * c.head_dim);
        const auto dh = static_cast<Eigen::Index>(c.head_dim);
        auto& hc = lc.heads[h];
        hc.q = to_matrix(q.middleCols(cols, dh));
        hc.k = to_matrix(k.middleCols(cols, dh));
        hc.v = to_matrix(v.middleCols(cols, dh));
        if (c.rotary) {
          apply_rotary_inplace(hc.q, c.rotary_base);
          apply_rotary_inplace(hc.k, c.rotary_base);
        }
        if (!is_softmax()) {
          hc.q.map() *= input_scale();
          hc.k.map() *= input_scale();
        }
        attend(l, h, hc);
        lc.ycat.middleCols(cols, dh) = hc.a.map() * hc.v.map();
      }
      x += lc.ycat * cmap(p_, o.wo, D, D);
      lc.x_mid = x;
      lc.xn2 = rmsnorm(x, cvec(p_, o.norm2, D), lc.n2);
      lc.h1 = lc.xn2 * cmap(p_, o.w1, D, F);
      lc.h1.rowwise() += cvec(p_, o.b1, F);
      lc.g = lc.h1.unaryExpr([](double z) { return gelu(z); });
      x += lc.g * cmap(p_, o.w2, F, D);
      x.rowwise() += cvec(p_, o.b2, D);
    }
    cache.x_final = x;
    cache.xnf = rmsnorm(x, cvec(p_, lay.final_norm, D), cache.nf);
  }

  Eigen::RowVectorXd logits_at(const SampleCache& cache, std::size_t position) const {
    const std::size_t D = m_.config.width();
    const std::size_t V = m_.config.vocab_size;
    return cache.xnf.row(static_cast<Eigen::Index>(position)) * cmap(p_, m_.layout.head_weight, D, V) +
           cvec(p_, m_.layout.head_bias, V);
  }

  // dxnf holds d(loss)/d(final normed states); accumulates into grads.
  void backward(const SampleCache& cache, std::span<const int> tokens, const Mat& dxnf,
                GradBuffer& g) const {
    const auto& c = m_.config;
    const auto& lay = m_.layout;
    const std::size_t D = c.width();
    const std::size_t F = c.hidden();
    const std::size_t n = tokens.size();
    Mat dx = rmsnorm_backward(cache.nf, cvec(p_, lay.final_norm, D), dxnf, mvec(g, lay.final_norm, D));
    for (std::size_t li = c.n_layers; li-- > 0;) {
      const auto& o = lay.layers[li];
      const auto& lc = cache.layers[li];
      // Feedforward block.
      mmap(g, o.w2, F, D).noalias() += lc.g.transpose() * dx;
      mvec(g, o.b2, D) += dx.colwise().sum();
      Mat dh1 = dx * cmap(p_, o.w2, F, D).transpose();
      for (Eigen::Index r = 0; r < dh1.rows(); ++r) {
        for (Eigen::Index cc = 0; cc < dh1.cols(); ++cc) dh1(r, cc) *= gelu_grad(lc.h1(r, cc));
      }
      mmap(g, o.w1, D, F).noalias() += lc.xn2.transpose() * dh1;
      mvec(g, o.b1, F) += dh1.colwise().sum();
      const Mat dxn2 = dh1 * cmap(p_, o.w1, D, F).transpose();
      dx += rmsnorm_backward(lc.n2, cvec(p_, o.norm2, D), dxn2, mvec(g, o.norm2, D));
      // Attention block.
      mmap(g, o.wo, D, D).noalias() += lc.ycat.transpose() * dx;
      const Mat dycat = dx * cmap(p_, o.wo, D, D).transpose();
      Mat dq(n, D);
      Mat dk(n, D);
      Mat dv(n, D);
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto cols = static_cast<Eigen::Index>(h * c.head_dim);
        const auto dh = static_cast<Eigen::Index>(c.head_dim);
        const Matrix dy = to_matrix(dycat.middleCols(cols, dh));
        Matrix dqh;
        Matrix dkh;
        Matrix dvh;
        attend_backward(li, h, lc.heads[h], dy, dqh, dkh, dvh, g);
        if (!is_softmax()) {
          dqh.map() *= input_scale();
          dkh.map() *= input_scale();
        }
        if (c.rotary) {
          apply_rotary_inplace(dqh, c.rotary_base, true);
          apply_rotary_inplace(dkh, c.rotary_base, true);
        }
        dq.middleCols(cols, dh) = dqh.map();
        dk.middleCols(cols, dh) = dkh.map();
        dv.middleCols(cols, dh) = dvh.map();
      }
      mmap(g, o.wq, D, D).noalias() += lc.xn1.transpose() * dq;
      mmap(g, o.wk, D, D).noalias() += lc.xn1.transpose() * dk;
      mmap(g, o.wv, D, D).noalias() += lc.xn1.transpose() * dv;
      Mat dxn1 = dq * cmap(p_, o.wq, D, D).transpose();
      dxn1.noalias() += dk * cmap(p_, o.wk, D, D).transpose();
      dxn1.noalias() += dv * cmap(p_, o.wv, D, D).transpose();
      dx += rmsnorm_backward(lc.n1, cvec(p_, o.norm1, D), dxn1, mvec(g, o.norm1, D));
    }
    auto dembed = mmap(g, lay.embed, c.vocab_size, D);
    for (std::size_t t = 0; t < n; ++t) dembed.row(tokens[t]) += dx.row(static_cast<Eigen::Index>(t));
  }

 private:
  bool is_softmax() const { return m_.config.attention_kind == FeatureMapKind::softmax_reference; }
  // Linear kinds see q and k scaled by d^-1/4, so q.k matches the softmax logit scale.
  double input_scale() const { return std::pow(static_cast<double>(m_.config.head_dim), -0.25); }

  void attend(std::size_t layer, std::size_t head, HeadCache& hc) const {
    const std::size_t n = hc.q.rows();
    if (is_softmax()) {
      Matrix s = matmul_nt(hc.q, hc.k);
      s.map() *= 1.0 / std::sqrt(static_cast<double>(m_.config.head_dim));
      hc.a = softmax_rows(s, true);
      return;
    }
    const auto& spec = specs_[layer * m_.config.n_heads + head];
    hc.fq = apply_feature_map(spec, hc.q);
    hc.fk = apply_feature_map(spec, hc.k);
    hc.a = matmul_nt(hc.fq, hc.fk);
    hc.den.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      auto row = hc.a.row(i);
      double den = 0.0;
      for (std::size_t j = 0; j <= i; ++j) den += row[j];
      den += kDenominatorEps;
      hc.den[i] = den;
      for (std::size_t j = 0; j <= i; ++j) row[j] /= den;
      for (std::size_t j = i + 1; j < n; ++j) row[j] = 0.0;
    }
  }

  void attend_backward(std::size_t layer, std::size_t head, const HeadCache& hc, const Matrix& dy, Matrix& dq,
                       Matrix& dk, Matrix& dv, GradBuffer& g) const {
    const std::size_t n = hc.q.rows();
    dv = Matrix(n, hc.v.cols());
    dv.map().noalias() = hc.a.map().transpose() * dy.map();
    Matrix da = matmul_nt(dy, hc.v);  // dL/dA
    // Chain through the row normalization; result overwrites da.
    for (std::size_t i = 0; i < n; ++i) {
      auto drow = da.row(i);
      const auto arow = hc.a.row(i);
      double inner = 0.0;
      for (std::size_t j = 0; j <= i; ++j) inner += drow[j] * arow[j];
      if (is_softmax()) {
        for (std::size_t j = 0; j <= i; ++j) drow[j] = arow[j] * (drow[j] - inner);
      } else {
        const double inv = 1.0 / hc.den[i];
        for (std::size_t j = 0; j <= i; ++j) drow[j] = (drow[j] - inner) * inv;
      }
      for (std::size_t j = i + 1; j < n; ++j) drow[j] = 0.0;
    }
    if (is_softmax()) {
      const double s = 1.0 / std::sqrt(static_cast<double>(m_.config.head_dim));
      dq = matmul(da, hc.k);
      dq.map() *= s;
      dk = Matrix(n, hc.q.cols());
      dk.map().noalias() = da.map().transpose() * hc.q.map();
      dk.map() *= s;
      return;
    }
    const auto& c = m_.config;
    const auto& spec = specs_[layer * c.n_heads + head];
    const Matrix dfq = matmul(da, hc.fk);
    Matrix dfk(n, hc.fq.cols());
    dfk.map().noalias() = da.map().transpose() * hc.fq.map();
    if (spec.trainable()) {
      HedgehogGrads hg = HedgehogGrads::zeros(c.head_dim);
      dq = feature_map_backward(spec, hc.q, dfq, &hg);
      dk = feature_map_backward(spec, hc.k, dfk, &hg);
      const std::size_t off = m_.layout.hedgehog_offset(layer, head, c.n_heads, c.head_dim);
      const std::size_t dd = c.head_dim * c.head_dim;
      for (std::size_t i = 0; i < dd; ++i) g[off + i] += hg.weight.data()[i];
      for (std::size_t i = 0; i < c.head_dim; ++i) g[off + dd + i] += hg.bias[i];
    } else {
      dq = feature_map_backward(spec, hc.q, dfq, nullptr);
      dk = feature_map_backward(spec, hc.k, dfk, nullptr);
    }
  }

  const ToyTransformer& m_;
  std::span<const double> p_;
  std::vector<FeatureMapSpec> specs_;
};


struct SampleOutcome {
  double loss = 0.0;
  double final_loss = 0.0;
  bool correct = false;
};

// Cross-entropy over the sample's targets. With grads non-null, adds the
// head gradients and backpropagates through the network.
SampleOutcome run_sample(const Network& net, const ToyTransformer& m, std::span<const double> params,
                         const RecallSample& s, LossPositions positions, SampleCache& cache,
                         GradBuffer* grads) {
  net.forward(s.tokens, cache);
  const auto targets = loss_targets(s, positions);
  const std::size_t D = m.config.width();
  const std::size_t V = m.config.vocab_size;
  const double w = 1.0 / static_cast<double>(targets.size());
  Mat dxnf;
  if (grads) dxnf.setZero(static_cast<Eigen::Index>(s.tokens.size()), static_cast<Eigen::Index>(D));
  SampleOutcome out;
  for (const auto& t : targets) {
    const Eigen::RowVectorXd logits = net.logits_at(cache, t.position);
    const double top = logits.maxCoeff();
    const Eigen::RowVectorXd e = (logits.array() - top).exp().matrix();
    const double z = e.sum();
    const double ce = std::log(z) + top - logits(t.token);
    out.loss += w * ce;
    if (t.position + 1 == s.tokens.size()) {
      out.final_loss = ce;
      Eigen::Index arg = 0;
      logits.maxCoeff(&arg);
      out.correct = arg == t.token;
    }
    if (grads) {
      Eigen::RowVectorXd dlogits = e / z;
      dlogits(t.token) -= 1.0;
      dlogits *= w;
      const auto pos = static_cast<Eigen::Index>(t.position);
      mmap(*grads, m.layout.head_weight, D, V).noalias() += cache.xnf.row(pos).transpose() * dlogits;
      mvec(*grads, m.layout.head_bias, V) += dlogits;
      dxnf.row(pos).noalias() += dlogits * cmap(params, m.layout.head_weight, D, V).transpose();
    }
  }
  if (!std::isfinite(out.loss)) throw std::runtime_error("non-finite loss");
  if (grads) net.backward(cache, s.tokens, dxnf, *grads);
  return out;
}

double row_entropy(std::span<const double> row, std::size_t valid) {
  double total = 0.0;
  for (std::size_t j = 0; j < valid; ++j) total += row[j];
  // A degenerate (all-zero) row carries no preference: count it as uniform.
  if (!(total > 0.0)) return std::log(static_cast<double>(valid));
  double h = 0.0;
  for (std::size_t j = 0; j < valid; ++j) {
    const double p = row[j] / total;
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

}  // namespace

BatchResult forward_backward(const ToyTransformer& model, std::span<const RecallSample> batch,
                             std::vector<double>* grads, LossPositions positions) {
  const Network net(model, model.params);
  BatchResult result;
  SampleCache cache;
  GradBuffer scratch;
  GradBuffer total;
  if (grads) total.assign(model.params.size(), 0.0);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (grads) scratch.assign(model.params.size(), 0.0);
    SampleOutcome o;
    try {
      o = run_sample(net, model, model.params, batch[b], positions, cache, grads ? &scratch : nullptr);
    } catch (const std::runtime_error& e) {
      std::ostringstream msg;
      msg << e.what() << " in batch sample " << b;
      throw std::runtime_error(msg.str());
    }
    if (grads) {
      for (std::size_t i = 0; i < scratch.size(); ++i) total[i] += scratch[i];
    }
    result.loss_sum += o.loss;
    result.final_loss_sum += o.final_loss;
    result.correct += o.correct ? 1 : 0;
    ++result.samples;
  }
  if (grads) grads->assign(total.begin(), total.end());
  return result;
}

double sample_loss(const ToyTransformer& model, std::span<const double> params, const RecallSample& sample,
                   LossPositions positions) {
  const Network net(model, params);
  SampleCache cache;
  return run_sample(net, model, params, sample, positions, cache, nullptr).loss;
}

ForwardTrace forward_trace(const ToyTransformer& model, std::span<const int> tokens) {
  const Network net(model, model.params);
  SampleCache cache;
  net.forward(tokens, cache);
  ForwardTrace trace;
  for (const auto& lc : cache.layers) {
    LayerTrace lt;
    lt.input = to_matrix(lc.x_in);
    lt.normed = to_matrix(lc.xn1);
    for (const auto& hc : lc.heads) lt.heads.push_back({hc.q, hc.k, hc.v, hc.a});
    lt.attention_out = to_matrix(lc.ycat);
    trace.layers.push_back(std::move(lt));
  }
  for (std::size_t l = 0; l + 1 < trace.layers.size(); ++l) trace.layers[l].output = trace.layers[l + 1].input;
  if (!trace.layers.empty()) trace.layers.back().output = to_matrix(cache.x_final);
  const std::size_t V = model.config.vocab_size;
  trace.logits = Matrix(tokens.size(), V);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    const Eigen::RowVectorXd l = net.logits_at(cache, t);
    std::copy(l.data(), l.data() + V, trace.logits.row(t).begin());
  }
  return trace;
}

std::vector<std::vector<std::pair<Matrix, Matrix>>> attention_inputs(const ToyTransformer& model,
                                                                     std::span<const int> tokens) {
  const auto trace = forward_trace(model, tokens);
  std::vector<std::vector<std::pair<Matrix, Matrix>>> out;
  for (const auto& layer : trace.layers) {
    auto& heads = out.emplace_back();
    for (const auto& h : layer.heads) heads.emplace_back(h.q, h.k);
  }
  return out;
}

EvalResult evaluate_recall(const ToyTransformer& model, std::span<const RecallSample> samples) {
  EvalResult r;
  if (samples.empty()) return r;
  const auto b = forward_backward(model, samples, nullptr, LossPositions::final_only);
  r.loss = b.final_loss_sum / static_cast<double>(b.samples);
  r.accuracy = static_cast<double>(b.correct) / static_cast<double>(b.samples);
  return r;
}

std::vector<double> attention_entropy_by_layer(const ToyTransformer& model, std::span<const RecallSample> samples) {
  const auto& c = model.config;
  std::vector<double> total(c.n_layers, 0.0);
  if (samples.empty() || c.n_layers == 0) return total;
  const Network net(model, model.params);
  SampleCache cache;
  std::size_t rows = 0;
  for (const auto& s : samples) {
    net.forward(s.tokens, cache);
    rows += s.tokens.size() * c.n_heads;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (const auto& hc : cache.layers[l].heads) {
        for (std::size_t i = 0; i < hc.a.rows(); ++i) total[l] += row_entropy(hc.a.row(i), i + 1);
      }
    }
  }
  for (double& t : total) t /= static_cast<double>(rows);
  return total;
}

TrainRunResult train_recall(ToyTransformer& model, const RecallDataset& data, const RecallTrainConfig& config,
                            const std::function<void(const EpochRecord&)>& on_epoch) {
  if (data.config.vocab_size != model.config.vocab_size) {
    throw std::invalid_argument("train_recall: dataset and model vocabularies differ");
  }
  if (config.batch_size == 0) throw std::invalid_argument("train_recall: batch_size must be positive");
  if (data.train.empty() && config.max_epochs > 0) throw std::invalid_argument("train_recall: empty training set");
  TrainRunResult result;
  const auto initial = evaluate_recall(model, data.test);
  result.initial_accuracy = initial.accuracy;
  result.initial_loss = initial.loss;
  result.best_test_accuracy = initial.accuracy;
  double best_loss = initial.loss;
  double patience_loss = initial.loss;
  std::size_t stale = 0;
  std::size_t diverged = 0;
  std::vector<double> best_params = model.params;
  AdamWState opt = AdamWState::zeros(model.params.size());
  const RngStream shuffle_root = RngStream(config.seed).split(0x5f);
  std::vector<std::size_t> order(data.train.size());
  std::vector<double> grads;
  std::vector<RecallSample> batch;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    RngStream r = shuffle_root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[r.below(i)]);
    double train_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      batch.clear();
      for (std::size_t i = start; i < end; ++i) batch.push_back(data.train[order[i]]);
      const auto br = forward_backward(model, batch, &grads, config.loss_positions);
      const double inv = 1.0 / static_cast<double>(batch.size());
      for (double& g : grads) g *= inv;
      adamw_step(model.params, grads, opt, config.optimizer);
      train_loss += br.loss_sum;
    }
    train_loss /= static_cast<double>(order.size());
    const auto ev = evaluate_recall(model, data.test);
    EpochRecord rec{epoch, train_loss, ev.loss, ev.accuracy};
    result.curve.push_back(rec);
    result.epochs_run = epoch;
    if (on_epoch) on_epoch(rec);
    if (ev.accuracy > result.best_test_accuracy || (ev.accuracy == result.best_test_accuracy && ev.loss < best_loss)) {
      result.best_test_accuracy = ev.accuracy;
      result.best_epoch = epoch;
      best_loss = ev.loss;
      best_params = model.params;
    }
    if (ev.loss < patience_loss) {
      patience_loss = ev.loss;
      stale = 0;
    } else if (++stale >= config.patience) {
      result.early_stopped = true;
      break;
    }
    diverged = (!std::isfinite(ev.loss) || ev.loss > config.divergence_factor * initial.loss) ? diverged + 1 : 0;
    if (diverged >= config.divergence_epochs) {
      std::ostringstream msg;
      msg << "training diverged: held-out loss " << ev.loss << " exceeded " << config.divergence_factor
          << "x the initial " << initial.loss << " for " << diverged << " epochs (last epoch " << epoch << ")";
      throw DivergenceError(msg.str());
    }
    if (ev.accuracy >= config.stop_accuracy) break;
  }
  model.params = best_params;
  const std::size_t n_ent = std::min(config.entropy_samples, data.test.size());
  result.entropy_per_layer = attention_entropy_by_layer(model, std::span(data.test).first(n_ent));
  if (!result.entropy_per_layer.empty()) {
    result.mean_entropy = std::accumulate(result.entropy_per_layer.begin(), result.entropy_per_layer.end(), 0.0) /
                          static_cast<double>(result.entropy_per_layer.size());
  }
  return result;
}

std::string ledger_header() { return "map_kind,seed,lr,wd,batch,best_acc,mean_entropy,epochs\n"; }

std::string ledger_line(const LedgerRow& row) {
  std::ostringstream out;
  out << row.map_kind << ',' << row.seed << ',' << format_sig(row.lr, 6) << ',' << format_sig(row.wd, 6) << ','
      << row.batch << ',' << format_sig(row.best_acc, 6) << ',' << format_sig(row.mean_entropy, 6) << ','
      << row.epochs << '\n';
  return out.str();
}

// ------------------------------------------------------------ checkpoints

namespace {

std::string head_file(std::size_t layer, std::size_t head) {
  return "layer" + std::to_string(layer) + "_head" + std::to_string(head) + ".spec";
}

}  // namespace

void save_toy_transformer(const ToyTransformer& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& c = model.config;
  std::ostringstream manifest;
  manifest << "vocab_size=" << c.vocab_size << '\n'
           << "n_layers=" << c.n_layers << '\n'
           << "n_heads=" << c.n_heads << '\n'
           << "head_dim=" << c.head_dim << '\n'
           << "mlp_expansion=" << c.mlp_expansion << '\n'
           << "attention_kind=" << to_string(c.attention_kind) << '\n'
           << "temperature=" << format_double(c.feature_options.temperature) << '\n'
           << "taylor_scaled=" << (c.feature_options.taylor_scaled ? 1 : 0) << '\n'
           << "hedgehog_activation="
           << (c.feature_options.variant.activation == HedgehogActivation::raw_exp ? "raw_exp" : "stabilized_softmax")
           << '\n'
           << "hedgehog_negation=" << (c.feature_options.variant.negation ? 1 : 0) << '\n'
           << "performer_features=" << c.feature_options.performer_features << '\n'
           << "rotary=" << (c.rotary ? 1 : 0) << '\n'
           << "rotary_base=" << format_double(c.rotary_base) << '\n'
           << "max_len=" << c.max_len << '\n'
           << "parameter_count=" << model.params.size() << '\n'
           << "parameter_hash=" << content_hash(model.params) << '\n';
  std::string blob;
  for (double v : model.params) {
    blob += format_double(v);
    blob.push_back('\n');
  }
  write_text_file(dir / "params.txt", blob);
  if (c.attention_kind == FeatureMapKind::hedgehog || c.attention_kind == FeatureMapKind::performer) {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) save_feature_map(model.head_feature_map(l, h), dir / head_file(l, h));
    }
  }
  write_text_file(dir / "manifest.txt", manifest.str());
}

ToyTransformer load_toy_transformer(const std::filesystem::path& dir) {
  ToyTransformerConfig c;
  std::size_t count = 0;
  std::uint64_t hash = 0;
  for (const auto& kv : parse_key_values(read_text_file(dir / "manifest.txt"))) {
    try {
      const auto as_size = [&] { return static_cast<std::size_t>(parse_integer(kv.value)); };
      if (kv.key == "vocab_size") c.vocab_size = as_size();
      else if (kv.key == "n_layers") c.n_layers = as_size();
      else if (kv.key == "n_heads") c.n_heads = as_size();
      else if (kv.key == "head_dim") c.head_dim = as_size();
      else if (kv.key == "mlp_expansion") c.mlp_expansion = as_size();
      else if (kv.key == "attention_kind") c.attention_kind = parse_feature_map_kind(kv.value);
      else if (kv.key == "temperature") c.feature_options.temperature = parse_double(kv.value);
      else if (kv.key == "taylor_scaled") c.feature_options.taylor_scaled = parse_bool(kv.value);
      else if (kv.key == "hedgehog_activation")
        c.feature_options.variant.activation =
            kv.value == "raw_exp" ? HedgehogActivation::raw_exp : HedgehogActivation::stabilized_softmax;
      else if (kv.key == "hedgehog_negation") c.feature_options.variant.negation = parse_bool(kv.value);
      else if (kv.key == "performer_features") c.feature_options.performer_features = as_size();
      else if (kv.key == "rotary") c.rotary = parse_bool(kv.value);
      else if (kv.key == "rotary_base") c.rotary_base = parse_double(kv.value);
      else if (kv.key == "max_len") c.max_len = as_size();
      else if (kv.key == "parameter_count") count = as_size();
      else if (kv.key == "parameter_hash") hash = std::stoull(kv.value);
      else throw ParseError("unknown manifest key '" + kv.key + "'", kv.line);
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), kv.line);
    }
  }
  c.validate();
  ToyTransformer m;
  m.config = c;
  m.layout = make_layout(c);
  const std::string blob = read_text_file(dir / "params.txt");
  std::istringstream in(blob);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    try {
      m.params.push_back(parse_double(line));
    } catch (const std::invalid_argument& e) {
      throw ParseError(e.what(), line_no);
    }
  }
  if (m.params.size() != m.layout.total || m.params.size() != count) {
    throw ParseError("parameter blob length does not match the manifest", line_no);
  }
  if (content_hash(m.params) != hash) throw ParseError("parameter blob hash mismatch", line_no);
  if (c.attention_kind == FeatureMapKind::performer) {
    for (std::size_t l = 0; l < c.n_layers; ++l) {
      for (std::size_t h = 0; h < c.n_heads; ++h) {
        m.performer_projections.push_back(load_feature_map(dir / head_file(l, h)).performer_projection);
      }
    }
  }
  return m;
}

}  // namespace hedgehog
