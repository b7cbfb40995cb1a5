#include <cmath>
#include <filesystem>

#include <gtest/gtest.h>

#include "hedgehog/optim.hpp"
#include "hedgehog/text_io.hpp"

using namespace hedgehog;

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  std::vector<double> p{1.0, -2.0, 3.5};
  const auto before = p;
  auto st = AdamWState::zeros(3);
  adamw_step(p, std::vector<double>(3, 0.0), st, {});
  EXPECT_EQ(p, before);
  EXPECT_EQ(st.step, 1u);
}

TEST(AdamW, FirstStepMagnitudeIsLr) {
  std::vector<double> p{0.0, 0.0, 0.0};
  auto st = AdamWState::zeros(3);
  AdamWConfig cfg;
  cfg.lr = 0.01;
  adamw_step(p, std::vector<double>{3.0, -0.5, 1e-3}, st, cfg);
  EXPECT_NEAR(p[0], -0.01, 1e-9);
  EXPECT_NEAR(p[1], 0.01, 1e-9);
  EXPECT_NEAR(p[2], -0.01, 1e-7);
}

TEST(AdamW, DecoupledWeightDecay) {
  std::vector<double> p{2.0};
  auto st = AdamWState::zeros(1);
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  adamw_step(p, std::vector<double>{0.0}, st, cfg);
  EXPECT_DOUBLE_EQ(p[0], 2.0 * (1.0 - 0.05));
}

TEST(AdamW, DescendsOnQuadratic) {
  std::vector<double> p{1.0, 1.0};
  auto st = AdamWState::zeros(2);
  AdamWConfig cfg;
  double prev = 2.0;
  for (int step = 0; step < 100; ++step) {
    adamw_step(p, std::vector<double>{2.0 * p[0], 2.0 * p[1]}, st, cfg);
    const double norm = p[0] * p[0] + p[1] * p[1];
    if (step >= 5) EXPECT_LT(norm, prev);
    prev = norm;
  }
}

TEST(AdamW, NonFiniteGradientLeavesStateUnchanged) {
  std::vector<double> p{1.0, 2.0};
  auto st = AdamWState::zeros(2);
  adamw_step(p, std::vector<double>{0.1, 0.2}, st, {});
  const auto p_before = p;
  const auto st_before = st;
  EXPECT_THROW(adamw_step(p, std::vector<double>{0.1, std::nan("")}, st, {}), std::domain_error);
  EXPECT_EQ(p, p_before);
  EXPECT_EQ(st, st_before);
}

TEST(AdamW, StateRoundTrip) {
  std::vector<double> p{1.0, 2.0};
  auto st = AdamWState::zeros(2);
  adamw_step(p, std::vector<double>{0.3, -1.0 / 3.0}, st, {});
  EXPECT_EQ(parse_adamw_state(serialize_adamw_state(st)), st);
  EXPECT_THROW(parse_adamw_state("step=1\nsize=2\nm=1 2\n"), ParseError);
  EXPECT_THROW(parse_adamw_state("step=1\nsize=2\nm=1 2\nv=1\n"), ParseError);
}

TEST(TextIo, DoublesRoundTripBitExactly) {
  for (double v : {0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0, -0.0}) {
    const double back = parse_double(format_double(v));
    EXPECT_EQ(std::signbit(back), std::signbit(v));
    EXPECT_EQ(back, v);
  }
  EXPECT_THROW(parse_double("1.5x"), std::invalid_argument);
  EXPECT_THROW(parse_integer("12.5"), std::invalid_argument);
  EXPECT_TRUE(parse_bool("true"));
  EXPECT_FALSE(parse_bool("0"));
  EXPECT_THROW(parse_bool("maybe"), std::invalid_argument);
}

TEST(TextIo, KeyValuesSkipCommentsAndTrackLines) {
  const auto kv = parse_key_values("# header\n\nseed = 7\n  lr=0.01  \n");
  ASSERT_EQ(kv.size(), 2u);
  EXPECT_EQ(kv[0].key, "seed");
  EXPECT_EQ(kv[0].value, "7");
  EXPECT_EQ(kv[0].line, 3u);
  EXPECT_EQ(kv[1].value, "0.01");
  EXPECT_THROW(parse_key_values("novalue\n"), ParseError);
}

TEST(TextIo, AtomicWriteAndRead) {
  const auto dir = std::filesystem::temp_directory_path() / "hh_text_io_test";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  write_text_file(dir / "x.txt", "hello\n");
  EXPECT_EQ(read_text_file(dir / "x.txt"), "hello\n");
  EXPECT_FALSE(std::filesystem::exists(dir / "x.txt.tmp"));
  EXPECT_THROW(read_text_file(dir / "missing.txt"), std::runtime_error);
  std::filesystem::remove_all(dir);
}
