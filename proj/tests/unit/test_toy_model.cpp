#include <catch_amalgamated.hpp>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "trus/prototype.hpp"
#include "trus/registry.hpp"
#include "trus/toy_model.hpp"

using namespace trus;
using Catch::Approx;
using fixture::thrown;

namespace {

ToyConfig tiny() {
  ToyConfig c;
  c.layers = 3;
  c.steps = 5;
  c.channels = 12;
  c.frames = 3;
  return c;
}

}  // namespace

TEST_CASE("synthesis is deterministic") {
  const ToyModel model(tiny());
  const auto spk = ToySpeaker::from_id("alice", 12);
  CHECK(model.synthesize(spk, 3) == model.synthesize(spk, 3));
  CHECK(synthesize(tiny(), spk, 3) == model.synthesize(spk, 3));
  CHECK_FALSE(model.synthesize(spk, 3).output_frames == model.synthesize(spk, 4).output_frames);
  CHECK(ToySpeaker::from_id("alice", 12).identity == spk.identity);
  CHECK(l2_norm(spk.identity.span()) == Approx(1.0).margin(1e-6));
}

TEST_CASE("synthesis matches the direct double-precision oracle") {
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    ToyConfig cfg = tiny();
    cfg.weight_seed = seed;
    const ToyModel model(cfg);
    const auto spk = ToySpeaker::from_seed("s", seed * 31, cfg.channels);
    const auto out = model.synthesize(spk, seed + 100);
    const auto ref = oracle::toy_synthesize(cfg, spk, seed + 100);
    for (std::size_t f = 0; f < cfg.frames; ++f) {
      for (std::size_t i = 0; i < cfg.channels; ++i) CHECK(out.output_frames.at(f, i) == Approx(ref.frames[f][i]).margin(1e-4));
    }
    for (std::size_t i = 0; i < cfg.channels; ++i) CHECK(out.output_embedding[i] == Approx(ref.embedding[i]).margin(1e-4));
    for (std::size_t l = 0; l < cfg.layers; ++l) {
      for (std::size_t s = 0; s < cfg.steps; ++s) {
        for (std::size_t f = 0; f < cfg.frames; ++f) {
          CHECK(out.tape.at(l, s).at(f, 5) == Approx(ref.cells[l][s][f][5]).margin(1e-4));
        }
      }
    }
  }
}

TEST_CASE("hook sees every cell in flow order and its edits persist") {
  const ToyModel model(tiny());
  const auto spk = ToySpeaker::from_id("bob", 12);
  std::vector<Cell> seen;
  const auto out = model.synthesize(spk, 1, [&](Cell c, const FrameMatrix& x) -> std::optional<FrameMatrix> {
    seen.push_back(c);
    if (c.layer == 1 && c.step == 2) return FrameMatrix(x.frames(), x.channels());
    return std::nullopt;
  });
  REQUIRE(seen.size() == 15);
  CHECK(seen.front() == Cell{0, 0});
  CHECK(seen[1] == Cell{1, 0});
  CHECK(seen.back() == Cell{2, 4});
  CHECK(out.steered_cells_applied == std::set<Cell>{{1, 2}});
  CHECK(out.tape.at(1, 2) == FrameMatrix(3, 12));

  const auto plain = model.synthesize(spk, 1);
  CHECK(plain.steered_cells_applied.empty());
  CHECK(plain.tape.at(1, 1) == out.tape.at(1, 1));
  CHECK_FALSE(plain.output_frames == out.output_frames);
  CHECK(model.synthesize(spk, 1, [](Cell, const FrameMatrix&) { return std::optional<FrameMatrix>{}; }) == plain);
}

TEST_CASE("hook returning the wrong shape is rejected") {
  const ToyModel model(tiny());
  const auto spk = ToySpeaker::from_id("bob", 12);
  CHECK(thrown([&] {
          model.synthesize(spk, 1, [](Cell, const FrameMatrix&) { return std::optional<FrameMatrix>(FrameMatrix(1, 12)); });
        }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("tape header describes the run") {
  const ToyModel model(tiny());
  const auto tape = model.synthesize(ToySpeaker::from_id("carol", 12), 9).tape;
  CHECK(tape.header().num_layers == 3);
  CHECK(tape.header().num_steps == 5);
  CHECK(tape.header().channels == 12);
  CHECK(tape.header().frames == 3);
  CHECK(tape.header().speaker_id == "carol");
  CHECK(model.reference_tape(ToySpeaker::from_id("carol", 12)) ==
        model.synthesize(ToySpeaker::from_id("carol", 12), kCalibrationTextSeed).tape);
}

TEST_CASE("outputs carry the speaker identity") {
  const ToyModel model(ToyConfig{});
  double own = 0, other = 0;
  for (int i = 0; i < 5; ++i) {
    const auto a = ToySpeaker::from_id("a" + std::to_string(i), 64);
    const auto b = ToySpeaker::from_id("b" + std::to_string(i), 64);
    const auto out = model.synthesize(a, 11);
    own += identity_similarity(out, a);
    other += identity_similarity(out, b);
  }
  CHECK(own / 5 > 0.5);
  CHECK(std::abs(other / 5) < 0.2);
}

TEST_CASE("content_error ignores the identity direction") {
  const ToyModel model(tiny());
  const auto spk = ToySpeaker::from_id("dan", 12);
  const auto a = model.synthesize(spk, 2);
  CHECK(content_error(a, a, spk) == 0.0);
  SynthesisOutput b = a;
  for (std::size_t f = 0; f < 3; ++f) {
    for (std::size_t i = 0; i < 12; ++i) b.output_frames.at(f, i) += static_cast<float>(0.7 * spk.identity[i]);
  }
  CHECK(content_error(a, b, spk) == Approx(0.0).margin(1e-6));
  const auto other = model.synthesize(spk, 3);
  CHECK(content_error(a, other, spk) > 0.1);
}

TEST_CASE("full-strength steering on every cell lowers identity similarity") {
  const ToyModel model(ToyConfig{});
  std::vector<ActivationTape> retain;
  for (int i = 0; i < 10; ++i) retain.push_back(model.reference_tape(ToySpeaker::from_id("r" + std::to_string(i), 64)));
  const IdPrototype proto = build_prototype(retain);
  const auto spk = ToySpeaker::from_id("victim", 64);
  OptOutRecord rec = make_optout_record(spk.id, model.reference_tape(spk), proto, 1.0, 1.0);
  rec.mask = band_mask(compute_profile(model.reference_tape(spk), proto), Band::All);
  const auto base = model.synthesize(spk, 5);
  const auto steered = model.synthesize(spk, 5, make_steering_hook(rec));
  CHECK(identity_similarity(steered, spk) < 0.75 * identity_similarity(base, spk));
  CHECK(steered.steered_cells_applied == rec.mask.cells);
}

TEST_CASE("invalid configurations") {
  ToyConfig c = tiny();
  c.layers = 0;
  CHECK(thrown([&] { ToyModel m(c); }) == ErrorCode::ConfigError);
  c = tiny();
  c.identity_gain = {0.5, 0.5};
  CHECK(thrown([&] { ToyModel m(c); }) == ErrorCode::ConfigError);
  c = tiny();
  c.mixing_scale = -1.0;
  CHECK(thrown([&] { ToyModel m(c); }) == ErrorCode::ConfigError);
}
