#include <gtest/gtest.h>

#include "hedgehog/perf_bench.hpp"

using namespace hedgehog;

TEST(MemoryModel, RecurrentStateConstantInN) {
  for (const auto kind : {BenchKind::hedgehog_recurrent, BenchKind::taylor2_recurrent}) {
    const auto a = accounted_memory(kind, 1024, 12, 64, BenchDtype::f32);
    const auto b = accounted_memory(kind, 32768, 12, 64, BenchDtype::f32);
    EXPECT_EQ(a.work, b.work);
    EXPECT_EQ(a.features, b.features);
    EXPECT_EQ(b.inputs, 32 * a.inputs);
  }
  EXPECT_EQ(feature_dim_for(BenchKind::taylor2_recurrent, 64), 1u + 64u + 64u * 64u);
  EXPECT_EQ(feature_dim_for(BenchKind::hedgehog_recurrent, 64), 128u);
  EXPECT_GT(accounted_memory(BenchKind::taylor2_recurrent, 4096, 12, 64, BenchDtype::f32).total(),
            accounted_memory(BenchKind::hedgehog_recurrent, 4096, 12, 64, BenchDtype::f32).total());
}

TEST(MemoryModel, SoftmaxIsQuadratic) {
  const auto a = accounted_memory(BenchKind::softmax, 1024, 12, 64, BenchDtype::f64);
  const auto b = accounted_memory(BenchKind::softmax, 2048, 12, 64, BenchDtype::f64);
  EXPECT_EQ(b.work, 4 * a.work);
}

TEST(Bench, SmallRunPassesGatesAndHonorsBudget) {
  BenchConfig cfg;
  cfg.n_heads = 2;
  cfg.head_dim = 8;
  cfg.seq_lens = {64, 128};
  cfg.gate_prefix = 32;
  cfg.gate_rows = 4;
  cfg.dtype = BenchDtype::f64;
  const std::vector<BenchKind> kinds{BenchKind::softmax, BenchKind::hedgehog_recurrent, BenchKind::taylor2_recurrent,
                                     BenchKind::hedgehog_quadratic};
  const auto rows = bench_attention(cfg, kinds);
  ASSERT_EQ(rows.size(), 8u);
  for (const auto& r : rows) {
    EXPECT_FALSE(r.skipped);
    EXPECT_TRUE(r.gate_passed) << to_string(r.kind) << " n=" << r.n << " err=" << r.gate_error;
    EXPECT_LE(r.p25_seconds, r.median_seconds);
    EXPECT_LE(r.median_seconds, r.p75_seconds);
  }
  cfg.memory_budget_bytes = accounted_memory(BenchKind::softmax, 64, 2, 8, BenchDtype::f64).total();
  const auto capped = bench_attention(cfg, {BenchKind::softmax});
  EXPECT_FALSE(capped[0].skipped);
  EXPECT_TRUE(capped[1].skipped);
  const std::string csv = bench_csv(rows);
  EXPECT_EQ(csv.rfind("kind,n,median_s,p25_s,p75_s,peak_bytes\n", 0), 0u);
}

TEST(Bench, ConfigValidation) {
  BenchConfig cfg;
  cfg.repeats = 2;
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
  cfg.repeats = 3;
  cfg.seq_lens = {1024, 512};
  EXPECT_THROW(cfg.validate(), std::invalid_argument);
}

TEST(Bench, ScalingChecksEvaluateRatios) {
  std::vector<BenchRow> rows;
  for (std::size_t n : {2048u, 4096u, 8192u}) {
    BenchRow r;
    r.kind = BenchKind::hedgehog_recurrent;
    r.n = n;
    r.median_seconds = static_cast<double>(n) * 1e-6;
    r.gate_passed = true;
    rows.push_back(r);
    r.kind = BenchKind::softmax;
    r.median_seconds = static_cast<double>(n) * static_cast<double>(n) * 1e-9;
    rows.push_back(r);
  }
  const auto checks = scaling_checks(rows);
  ASSERT_FALSE(checks.empty());
  for (const auto& c : checks) EXPECT_TRUE(c.passed) << to_string(c.kind) << ' ' << c.n_from;
}

TEST(ContextKl, RejectsTooShortLengths) {
  SyntheticTeacherConfig tc;
  tc.vocab_size = 32;
  tc.d_model = 16;
  tc.head_dim = 4;
  tc.n_heads = 1;
  auto s = make_distill_session(Teacher(make_synthetic_teacher(tc, RngStream(1))), {});
  const auto held = random_token_sequences(32, 16, 4, RngStream(2));
  EXPECT_THROW(context_length_kl(s, held, {8}), std::invalid_argument);
  const auto rows = context_length_kl(s, held, {16, 64});
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_NEAR(rows[0].mean_kl, heldout_kl(s, held), 1e-12);
}
