#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "trus/prototype.hpp"
#include "trus/selection.hpp"
#include "trus/steering.hpp"
#include "trus/toy_model.hpp"

namespace {

trus::FrameMatrix random_matrix(std::mt19937_64& rng, std::size_t frames, std::size_t channels) {
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  trus::FrameMatrix m(frames, channels);
  for (auto& v : m.data()) v = u(rng);
  return m;
}

void BM_ApplySteering(benchmark::State& state) {
  std::mt19937_64 rng(1);
  const auto d = static_cast<std::size_t>(state.range(0));
  const trus::FrameMatrix x = random_matrix(rng, 32, d);
  const trus::ChannelVector s = trus::l2_normalize(trus::pool_frames(random_matrix(rng, 1, d)));
  for (auto _ : state) benchmark::DoNotOptimize(trus::apply_steering(x, s, 1.2));
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_ApplySteering)->Arg(64)->Arg(512)->Arg(1024);

void BM_ProfileAndMask(benchmark::State& state) {
  const trus::ToyModel model(trus::ToyConfig{});
  std::vector<trus::ActivationTape> retain;
  for (int i = 0; i < 30; ++i) {
    retain.push_back(model.reference_tape(trus::ToySpeaker::from_id("r" + std::to_string(i), 64)).to_pooled());
  }
  const trus::IdPrototype proto = trus::build_prototype(retain);
  const auto opt = model.reference_tape(trus::ToySpeaker::from_id("opt", 64));
  for (auto _ : state) benchmark::DoNotOptimize(trus::select_mask(trus::compute_profile(opt, proto)));
}
BENCHMARK(BM_ProfileAndMask);

void BM_BuildPrototype(benchmark::State& state) {
  const trus::ToyModel model(trus::ToyConfig{});
  std::vector<trus::ActivationTape> tapes;
  for (int i = 0; i < state.range(0); ++i) {
    tapes.push_back(model.reference_tape(trus::ToySpeaker::from_id("r" + std::to_string(i), 64)));
  }
  for (auto _ : state) benchmark::DoNotOptimize(trus::build_prototype(tapes));
}
BENCHMARK(BM_BuildPrototype)->Arg(10)->Arg(30);

void BM_ToySynthesis(benchmark::State& state) {
  const trus::ToyModel model(trus::ToyConfig{});
  const auto spk = trus::ToySpeaker::from_id("bench", 64);
  std::uint64_t seed = 0;
  for (auto _ : state) benchmark::DoNotOptimize(model.synthesize(spk, ++seed));
}
BENCHMARK(BM_ToySynthesis)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
