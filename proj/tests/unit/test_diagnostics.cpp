#include <cmath>

#include <gtest/gtest.h>

#include "hedgehog/attention.hpp"
#include "hedgehog/diagnostics.hpp"

using namespace hedgehog;

TEST(Entropy, Examples) {
  const auto u = attention_entropy(Matrix(1, 8, 1.0 / 8.0), false);
  EXPECT_NEAR(u.per_row[0], std::log(8.0), 1e-12);
  EXPECT_NEAR(u.normalized_mean, 1.0, 1e-12);
  EXPECT_EQ(attention_entropy(Matrix{{0.0, 1.0, 0.0}}, false).per_row[0], 0.0);
  EXPECT_NEAR(attention_entropy(Matrix{{0.5, 0.5, 0.0}}, false).per_row[0], std::log(2.0), 1e-15);
}

TEST(Entropy, CausalNormalizationAndErrors) {
  Matrix a(3, 3, 0.0);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = 1.0 / (i + 1);
  EXPECT_NEAR(attention_entropy(a, true).normalized_mean, 1.0, 1e-12);
  try {
    attention_entropy(Matrix{{0.5, 0.5}, {0.5, 0.4}}, false);
    FAIL();
  } catch (const std::invalid_argument& e) {
    EXPECT_NE(std::string(e.what()).find("row 1"), std::string::npos);
  }
  EXPECT_THROW(attention_entropy(Matrix{{1.5, -0.5}}, false), std::invalid_argument);
}

TEST(Entropy, BoundsAndPermutationInvariance) {
  RngStream rng(1);
  for (int t = 0; t < 30; ++t) {
    const Matrix a = softmax_rows(seeded_gaussian(rng, 6, 6), false);
    Matrix p = a;
    for (std::size_t i = 0; i < 6; ++i) std::reverse(p.row(i).begin(), p.row(i).end());
    const auto ra = attention_entropy(a, false);
    const auto rp = attention_entropy(p, false);
    for (std::size_t i = 0; i < 6; ++i) {
      EXPECT_GE(ra.per_row[i], 0.0);
      EXPECT_LE(ra.per_row[i], std::log(6.0) + 1e-12);
      EXPECT_NEAR(ra.per_row[i], rp.per_row[i], 1e-14);
    }
  }
}

TEST(Monotonicity, SoftmaxIsPerfect) {
  RngStream rng(2);
  const Matrix q = seeded_gaussian(rng, 10, 4);
  const Matrix k = seeded_gaussian(rng, 10, 4);
  const Matrix a = *softmax_attention(q, k, Matrix(10, 1, 0.0), true).weights;
  const auto r = monotonicity_concordance(scaled_dot_products(q, k), a, true);
  EXPECT_EQ(r.concordance, 1.0);
  EXPECT_EQ(r.violations, 0u);
  EXPECT_EQ(r.pairs_tested, 165u);  // sum over rows of C(i+1, 2) = C(11, 3)
}

TEST(Monotonicity, RepeatedKeysTieExactly) {
  RngStream rng(3);
  const Matrix q = seeded_gaussian(rng, 40, 16);
  Matrix k = seeded_gaussian(rng, 40, 16);
  for (std::size_t c = 0; c < 16; ++c) k(39, c) = k(5, c), k(22, c) = k(5, c);
  const Matrix d = scaled_dot_products(q, k);
  for (std::size_t i = 0; i < 40; ++i) {
    EXPECT_EQ(d(i, 5), d(i, 39));
    EXPECT_EQ(d(i, 5), d(i, 22));
  }
  EXPECT_EQ(monotonicity_concordance(d, softmax_rows(d, true), true).concordance, 1.0);
}

TEST(Monotonicity, ReversedOrderIsZero) {
  const Matrix d{{1.0, 2.0, 3.0}};
  const Matrix a{{0.5, 0.3, 0.2}};
  const auto r = monotonicity_concordance(d, a, false);
  EXPECT_EQ(r.concordance, 0.0);
  EXPECT_EQ(r.violations, 3u);
}

TEST(Monotonicity, TiesExcludedAndBruteForce) {
  RngStream rng(3);
  for (int t = 0; t < 20; ++t) {
    Matrix d = seeded_gaussian(rng, 8, 8);
    d(3, 1) = d(3, 2);
    Matrix a = softmax_rows(seeded_gaussian(rng, 8, 8), false);
    std::size_t pairs = 0, bad = 0;
    for (std::size_t i = 0; i < 8; ++i)
      for (std::size_t j = 0; j < 8; ++j)
        for (std::size_t jj = j + 1; jj < 8; ++jj) {
          const double dd = d(i, j) - d(i, jj);
          if (dd == 0.0) continue;
          ++pairs;
          const double da = a(i, j) - a(i, jj);
          if ((da > 0) - (da < 0) != (dd > 0) - (dd < 0)) ++bad;
        }
    const auto r = monotonicity_concordance(d, a, false);
    EXPECT_EQ(r.pairs_tested, pairs);
    EXPECT_EQ(r.violations, bad);
    EXPECT_DOUBLE_EQ(r.concordance, 1.0 - static_cast<double>(bad) / pairs);
    // Rank statistic: any strictly increasing row transform leaves it unchanged.
    Matrix a3 = a;
    for (double& v : a3.values()) v = v * v * v + 2.0 * v;
    EXPECT_EQ(monotonicity_concordance(d, a3, false).violations, bad);
  }
}

TEST(Kl, Examples) {
  RngStream rng(4);
  const Matrix a = softmax_rows(seeded_gaussian(rng, 5, 5), true);
  EXPECT_EQ(attention_kl(a, a, true), 0.0);
  EXPECT_NEAR(attention_kl(Matrix{{1.0, 0.0}}, Matrix{{0.5, 0.5}}, false), std::log(2.0), 1e-6);
  EXPECT_THROW(attention_kl(a, Matrix(5, 4, 0.2), true), std::invalid_argument);
}

TEST(Kl, NonNegativeAndMatchesNaiveSum) {
  RngStream rng(5);
  for (int t = 0; t < 30; ++t) {
    const Matrix p = softmax_rows(seeded_gaussian(rng, 6, 6), false);
    const Matrix q = softmax_rows(seeded_gaussian(rng, 6, 6), false);
    const double kl = attention_kl(p, q, false);
    EXPECT_GE(kl, 0.0);
    double naive = 0.0;
    for (std::size_t i = 0; i < 6; ++i)
      for (std::size_t j = 0; j < 6; ++j) naive += p(i, j) * std::log(p(i, j) / q(i, j));
    EXPECT_NEAR(kl, naive / 6.0, 1e-9);
  }
}

TEST(Panel, SoftmaxReferenceIsExact) {
  RngStream rng(6);
  const Matrix q = seeded_gaussian(rng, 12, 8);
  const Matrix k = seeded_gaussian(rng, 12, 8);
  FeatureMapSpec spec;
  spec.kind = FeatureMapKind::softmax_reference;
  spec.head_dim = 8;
  const auto r = property_panel(q, k, spec, true);
  EXPECT_EQ(r.kl, 0.0);
  EXPECT_EQ(r.monotonicity.concordance, 1.0);
}

TEST(Panel, HedgehogIdentityIsFinite) {
  RngStream rng(7);
  const Matrix q = seeded_gaussian(rng, 12, 8);
  const Matrix k = seeded_gaussian(rng, 12, 8);
  const auto spec = make_feature_map(FeatureMapKind::hedgehog, 8, {}, rng);
  const auto r = property_panel(q, k, spec, false);
  EXPECT_TRUE(std::isfinite(r.kl));
  EXPECT_TRUE(std::isfinite(r.entropy.mean));
  EXPECT_GT(r.monotonicity.pairs_tested, 0u);
}

TEST(Panel, ReluAllNegativeKeysSurfacesDegeneracy) {
  RngStream rng(8);
  const Matrix q = seeded_gaussian(rng, 4, 3);
  const Matrix k(4, 3, -1.0);
  const auto spec = make_feature_map(FeatureMapKind::relu, 3, {}, rng);
  EXPECT_THROW(property_panel(q, k, spec, true), std::domain_error);

  PanelOptions lenient;
  lenient.degenerate_policy = DegeneratePolicy::lenient;
  const auto r = property_panel(q, k, spec, true, lenient);
  EXPECT_EQ(r.degenerate_rows, 4u);
  // Zero rows count as uniform: entropy ln(i+1), KL against softmax finite.
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.entropy.per_row[i], std::log(i + 1.0), 1e-9);
  EXPECT_TRUE(std::isfinite(r.kl));
}

TEST(Panel, CsvRowsPerRecord) {
  RngStream rng(9);
  const Matrix q = seeded_gaussian(rng, 6, 4);
  const Matrix k = seeded_gaussian(rng, 6, 4);
  std::vector<PanelRecord> recs;
  for (const auto kind : {FeatureMapKind::hedgehog, FeatureMapKind::elu1}) {
    recs.push_back({0, 1, std::string(to_string(kind)), property_panel(q, k, make_feature_map(kind, 4, {}, rng), true)});
  }
  const std::string csv = panel_csv(recs);
  EXPECT_EQ(csv.rfind("layer,head,kind,metric,value\n", 0), 0u);
  EXPECT_NE(panel_json(recs).find("\"hedgehog\""), std::string::npos);
}

TEST(Spearman, AverageRanks) {
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {10, 20, 30, 40}), 1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 2, 3, 4}, {4, 3, 2, 1}), -1.0, 1e-12);
  EXPECT_NEAR(spearman({1, 1, 2}, {1, 1, 2}), 1.0, 1e-12);
  EXPECT_THROW(spearman({1}, {1}), std::invalid_argument);
}
