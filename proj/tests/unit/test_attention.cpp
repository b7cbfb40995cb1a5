#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "hedgehog/attention.hpp"
#include "hedgehog/feature_maps.hpp"

using namespace hedgehog;

namespace {

Matrix features(const FeatureMapSpec& spec, const Matrix& x) { return apply_feature_map(spec, x); }

double row_sum(std::span<const double> r) {
  double s = 0.0;
  for (double v : r) s += v;
  return s;
}

}  // namespace

TEST(Softmax, SingleToken) {
  const Matrix q{{0.3, -0.2}};
  const Matrix v{{1.5, 2.5}};
  const auto r = softmax_attention(q, q, v, true);
  EXPECT_EQ((*r.weights)(0, 0), 1.0);
  EXPECT_EQ(r.outputs, v);
}

TEST(Softmax, ZeroQueriesGiveUniformCausalRows) {
  RngStream rng(1);
  const Matrix q(3, 2, 0.0);
  const Matrix k = seeded_gaussian(rng, 3, 2);
  const Matrix v = seeded_gaussian(rng, 3, 2);
  const auto r = softmax_attention(q, k, v, true);
  for (std::size_t i = 0; i < 3; ++i) {
    for (std::size_t j = 0; j <= i; ++j) EXPECT_NEAR((*r.weights)(i, j), 1.0 / (i + 1), 1e-15);
  }
}

TEST(Softmax, MatchesDenseRecompute) {
  RngStream rng(2);
  const Matrix q = seeded_gaussian(rng, 4, 2);
  const Matrix k = seeded_gaussian(rng, 4, 2);
  const Matrix v = seeded_gaussian(rng, 4, 2);
  for (const bool causal : {false, true}) {
    const auto r = softmax_attention(q, k, v, causal);
    for (std::size_t i = 0; i < 4; ++i) {
      const std::size_t end = causal ? i + 1 : 4;
      double z = 0.0;
      std::vector<double> w(end);
      for (std::size_t j = 0; j < end; ++j) {
        w[j] = std::exp((q(i, 0) * k(j, 0) + q(i, 1) * k(j, 1)) / std::sqrt(2.0));
        z += w[j];
      }
      for (std::size_t c = 0; c < 2; ++c) {
        double y = 0.0;
        for (std::size_t j = 0; j < end; ++j) y += w[j] / z * v(j, c);
        EXPECT_NEAR(r.outputs(i, c), y, 1e-14);
      }
    }
  }
}

TEST(Softmax, RowMonotoneInDotProducts) {
  RngStream rng(3);
  for (int t = 0; t < 20; ++t) {
    const Matrix q = seeded_gaussian(rng, 6, 4);
    const Matrix k = seeded_gaussian(rng, 6, 4);
    const auto r = softmax_attention(q, k, Matrix(6, 1, 1.0), false);
    const Matrix d = matmul_nt(q, k);
    for (std::size_t i = 0; i < 6; ++i) {
      for (std::size_t j = 0; j < 6; ++j) {
        for (std::size_t jj = 0; jj < 6; ++jj) {
          if (d(i, j) > d(i, jj)) EXPECT_GT((*r.weights)(i, j), (*r.weights)(i, jj));
        }
      }
    }
  }
}

TEST(Linear, SingleTokenReturnsValue) {
  RngStream rng(4);
  for (const auto kind : kAllFeatureMapKinds) {
    if (kind == FeatureMapKind::softmax_reference) continue;
    const auto spec = make_feature_map(kind, 2, {}, rng);
    const Matrix x{{0.4, 0.9}};
    const Matrix v{{3.0, -1.0}};
    const auto r = linear_attention_quadratic(features(spec, x), features(spec, x), v, true);
    EXPECT_NEAR(max_abs_diff(r.outputs, v), 0.0, 1e-10) << to_string(kind);
  }
}

TEST(Linear, ConstantKeysGiveRunningMean) {
  RngStream rng(5);
  const Matrix qf = Matrix(5, 3, 0.5);
  const Matrix kf = Matrix(5, 3, 2.0);
  const Matrix v = seeded_gaussian(rng, 5, 2);
  const auto quad = linear_attention_quadratic(qf, kf, v, true);
  const auto rec = linear_attention_recurrent(qf, kf, v);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t c = 0; c < 2; ++c) {
      double mean = 0.0;
      for (std::size_t j = 0; j <= i; ++j) mean += v(j, c);
      mean /= static_cast<double>(i + 1);
      EXPECT_NEAR(quad.outputs(i, c), mean, 1e-12);
      EXPECT_NEAR(rec(i, c), mean, 1e-12);
      EXPECT_NEAR((*quad.weights)(i, 0), 1.0 / (i + 1), 1e-12);
    }
  }
}

TEST(Linear, RowsSumToOne) {
  RngStream rng(6);
  const auto spec = make_feature_map(FeatureMapKind::hedgehog, 4, {}, rng);
  const Matrix x = seeded_gaussian(rng, 12, 4);
  for (const bool causal : {false, true}) {
    const auto r = linear_attention_quadratic(features(spec, x), features(spec, x), Matrix(12, 1, 0.0), causal);
    for (std::size_t i = 0; i < 12; ++i) EXPECT_NEAR(row_sum(r.weights->row(i)), 1.0, 1e-12);
  }
}

TEST(Linear, DegenerateRowStrictAndLenient) {
  const Matrix qf{{1.0, 0.0}, {0.0, 0.0}};
  const Matrix kf{{1.0, 1.0}, {1.0, 1.0}};
  const Matrix v{{1.0}, {2.0}};
  try {
    linear_attention_quadratic(qf, kf, v, true);
    FAIL() << "expected degenerate normalization";
  } catch (const std::domain_error& e) {
    EXPECT_NE(std::string(e.what()).find("degenerate normalization at row 1"), std::string::npos);
  }
  EXPECT_THROW(linear_attention_recurrent(qf, kf, v), std::domain_error);
  const auto r = linear_attention_quadratic(qf, kf, v, true, true, DegeneratePolicy::lenient);
  EXPECT_EQ(r.degenerate_rows, 1u);
  EXPECT_TRUE(r.outputs.all_finite());
  std::size_t count = 0;
  linear_attention_recurrent(qf, kf, v, true, DegeneratePolicy::lenient, &count);
  EXPECT_EQ(count, 1u);
}

TEST(Linear, RecurrentRequiresCausal) {
  const Matrix m(2, 2, 1.0);
  EXPECT_THROW(linear_attention_recurrent(m, m, m, false), std::invalid_argument);
}

TEST(Linear, RecurrentMatchesQuadraticEveryKind) {
  RngStream rng(7);
  for (const auto kind : kAllFeatureMapKinds) {
    if (kind == FeatureMapKind::softmax_reference) continue;
    FeatureMapOptions opt;
    opt.cosformer_max_len = 64;
    const auto spec = make_feature_map(kind, 16, opt, rng);
    Matrix q = seeded_gaussian(rng, 64, 16);
    Matrix k = seeded_gaussian(rng, 64, 16);
    q.map() *= 0.5;
    k.map() *= 0.5;
    const Matrix v = seeded_gaussian(rng, 64, 16);
    const Matrix qf = features(spec, q);
    // relu-type maps can zero a whole row; keep the first key alive.
    Matrix kf = features(spec, k);
    for (double& x : kf.row(0)) x += 1e-3;
    const auto quad = linear_attention_quadratic(qf, kf, v, true, false, DegeneratePolicy::lenient);
    const Matrix rec = linear_attention_recurrent(qf, kf, v, true, DegeneratePolicy::lenient);
    EXPECT_LT(max_abs_diff(quad.outputs, rec), 1e-10) << to_string(kind);
  }
}

TEST(Linear, CausalInformationFlow) {
  RngStream rng(8);
  const auto spec = make_feature_map(FeatureMapKind::hedgehog, 4, {}, rng);
  const Matrix q = seeded_gaussian(rng, 8, 4);
  Matrix k = seeded_gaussian(rng, 8, 4);
  Matrix v = seeded_gaussian(rng, 8, 4);
  const auto soft = softmax_attention(q, k, v, true).outputs;
  const auto quad = linear_attention_quadratic(features(spec, q), features(spec, k), v, true).outputs;
  const auto rec = linear_attention_recurrent(features(spec, q), features(spec, k), v);
  for (std::size_t c = 0; c < 4; ++c) {
    k(6, c) += 5.0;
    v(6, c) -= 3.0;
  }
  const auto soft2 = softmax_attention(q, k, v, true).outputs;
  const auto quad2 = linear_attention_quadratic(features(spec, q), features(spec, k), v, true).outputs;
  const auto rec2 = linear_attention_recurrent(features(spec, q), features(spec, k), v);
  for (std::size_t i = 0; i < 6; ++i) {
    for (std::size_t c = 0; c < 4; ++c) {
      EXPECT_EQ(soft(i, c), soft2(i, c));
      EXPECT_EQ(quad(i, c), quad2(i, c));
      EXPECT_EQ(rec(i, c), rec2(i, c));
    }
  }
  EXPECT_NE(soft(6, 0), soft2(6, 0));
}

TEST(Recurrent, StateIsSumOfContributionsAndSizeFixed) {
  RngStream rng(9);
  RecurrentState st(3, 2);
  const std::size_t live = st.live_values();
  EXPECT_EQ(live, 3u * 2u + 3u);
  Matrix s_expect(3, 2, 0.0);
  std::vector<double> z_expect(3, 0.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> pk{rng.uniform(), rng.uniform(), rng.uniform()};
    std::vector<double> v{rng.gaussian(), rng.gaussian()};
    st.push(pk, v);
    for (std::size_t a = 0; a < 3; ++a) {
      z_expect[a] += pk[a];
      for (std::size_t b = 0; b < 2; ++b) s_expect(a, b) += pk[a] * v[b];
    }
    EXPECT_EQ(st.live_values(), live);
  }
  EXPECT_EQ(st.position(), 50u);
  EXPECT_EQ(st.S(), s_expect);
  EXPECT_EQ(st.z(), z_expect);
}

TEST(Rotary, IdentityAtZeroAndNormPreserving) {
  RngStream rng(10);
  const Matrix x = seeded_gaussian(rng, 16, 8);
  const Matrix r = apply_rotary(x);
  for (std::size_t c = 0; c < 8; ++c) EXPECT_EQ(r(0, c), x(0, c));
  for (std::size_t i = 0; i < 16; ++i) EXPECT_NEAR(std::sqrt(dot(r.row(i), r.row(i))), std::sqrt(dot(x.row(i), x.row(i))), 1e-12);
  EXPECT_LT(max_abs_diff(apply_rotary(r, 10000.0, true), x), 1e-12);
  EXPECT_THROW(apply_rotary(Matrix(2, 3, 1.0)), std::invalid_argument);
}

TEST(Rotary, RelativePositionDependence) {
  RngStream rng(11);
  const Matrix q1 = seeded_gaussian(rng, 1, 6);
  const Matrix k1 = seeded_gaussian(rng, 1, 6);
  Matrix q(10, 6), k(10, 6);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t c = 0; c < 6; ++c) {
      q(i, c) = q1(0, c);
      k(i, c) = k1(0, c);
    }
  }
  const Matrix rq = apply_rotary(q);
  const Matrix rk = apply_rotary(k);
  for (std::size_t off = 0; off < 5; ++off) {
    const double ref = dot(rq.row(off), rk.row(0));
    for (std::size_t j = 1; j + off < 10; ++j) EXPECT_NEAR(dot(rq.row(j + off), rk.row(j)), ref, 1e-12);
  }
}

TEST(WeightsCsv, RoundTripsNineDigits) {
  RngStream rng(12);
  const Matrix a = softmax_rows(seeded_gaussian(rng, 5, 5), true);
  const auto dir = std::filesystem::temp_directory_path() / "hh_weights_csv_test";
  std::filesystem::create_directories(dir);
  write_weights_csv(a, dir / "a.csv");
  const Matrix b = read_weights_csv(dir / "a.csv");
  EXPECT_LT(max_abs_diff(a, b), 1e-9);
  std::filesystem::remove_all(dir);
}
