#include <benchmark/benchmark.h>

#include "hedgehog/attention.hpp"
#include "hedgehog/distill.hpp"
#include "hedgehog/feature_maps.hpp"
#include "hedgehog/numerics.hpp"

using namespace hedgehog;

namespace {

constexpr std::size_t kDim = 64;

struct Inputs {
  Matrix q, k, v;
};

Inputs make_inputs(std::size_t n) {
  RngStream rng(1);
  return {seeded_gaussian(rng, n, kDim), seeded_gaussian(rng, n, kDim), seeded_gaussian(rng, n, kDim)};
}

FeatureMapSpec map_of(FeatureMapKind kind) {
  RngStream rng(2);
  return make_feature_map(kind, kDim, {}, rng);
}

void BM_SoftmaxCausal(benchmark::State& state) {
  const auto in = make_inputs(static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) benchmark::DoNotOptimize(softmax_attention(in.q, in.k, in.v, true));
  state.SetComplexityN(state.range(0));
}

void recurrent(benchmark::State& state, FeatureMapKind kind) {
  const auto in = make_inputs(static_cast<std::size_t>(state.range(0)));
  const auto spec = map_of(kind);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        linear_attention_recurrent(apply_feature_map(spec, in.q), apply_feature_map(spec, in.k), in.v));
  }
  state.SetComplexityN(state.range(0));
}

void BM_HedgehogRecurrent(benchmark::State& state) { recurrent(state, FeatureMapKind::hedgehog); }
void BM_Taylor2Recurrent(benchmark::State& state) { recurrent(state, FeatureMapKind::taylor2); }

void BM_HedgehogQuadratic(benchmark::State& state) {
  const auto in = make_inputs(static_cast<std::size_t>(state.range(0)));
  const auto spec = map_of(FeatureMapKind::hedgehog);
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        linear_attention_quadratic(apply_feature_map(spec, in.q), apply_feature_map(spec, in.k), in.v, true));
  }
  state.SetComplexityN(state.range(0));
}

void BM_FeatureMap(benchmark::State& state) {
  const auto kind = kAllFeatureMapKinds[static_cast<std::size_t>(state.range(0))];
  const auto in = make_inputs(1024);
  const auto spec = map_of(kind);
  for (auto _ : state) benchmark::DoNotOptimize(apply_feature_map(spec, in.q));
  state.SetLabel(std::string(to_string(kind)));
}

void BM_DistillationGrad(benchmark::State& state) {
  const auto in = make_inputs(static_cast<std::size_t>(state.range(0)));
  const auto params = HedgehogParams::identity(kDim);
  for (auto _ : state) benchmark::DoNotOptimize(distillation_grad(in.q, in.k, params, {}, true));
}

}  // namespace

BENCHMARK(BM_SoftmaxCausal)->RangeMultiplier(2)->Range(256, 4096)->Complexity();
BENCHMARK(BM_HedgehogRecurrent)->RangeMultiplier(2)->Range(256, 4096)->Complexity();
BENCHMARK(BM_Taylor2Recurrent)->RangeMultiplier(2)->Range(256, 2048)->Complexity();
BENCHMARK(BM_HedgehogQuadratic)->RangeMultiplier(2)->Range(256, 2048)->Complexity();
BENCHMARK(BM_FeatureMap)->DenseRange(1, 7);
BENCHMARK(BM_DistillationGrad)->Arg(64)->Arg(256);

BENCHMARK_MAIN();
