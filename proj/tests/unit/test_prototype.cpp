#include <catch_amalgamated.hpp>

#include <algorithm>
#include <fstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "trus/error.hpp"
#include "trus/prototype.hpp"

using namespace trus;
using Catch::Approx;

namespace {

double max_abs_diff(const IdPrototype& a, const IdPrototype& b) {
  double worst = 0.0;
  for (std::size_t l = 0; l < a.layers(); ++l) {
    for (std::size_t s = 0; s < a.steps(); ++s) {
      for (std::size_t c = 0; c < a.channels(); ++c) {
        worst = std::max(worst, std::abs(static_cast<double>(a.cell(l, s)[c]) - b.cell(l, s)[c]));
      }
    }
  }
  return worst;
}

}  // namespace

TEST_CASE("prototype equals the mean of pooled cells") {
  fixture::Rng rng(30);
  const auto tapes = fixture::random_pool(rng, 30, 4, 8, 16, 3);
  const IdPrototype proto = build_prototype(tapes);
  const auto expected = oracle::prototype(tapes);
  CHECK(proto.pool_size() == 30);
  CHECK(proto.layers() == 4);
  CHECK(proto.steps() == 8);
  CHECK(proto.channels() == 16);
  for (std::size_t l = 0; l < 4; ++l) {
    for (std::size_t s = 0; s < 8; ++s) {
      for (std::size_t c = 0; c < 16; ++c) CHECK(proto.cell(l, s)[c] == Approx(expected[l][s][c]).margin(1e-6));
    }
  }
  CHECK(proto.source_ids().front() == "retain-0");
}

TEST_CASE("single tape prototype is its pooled copy") {
  fixture::Rng rng(1);
  const auto tape = fixture::random_tape(rng, 2, 3, 8, 4, "solo");
  const IdPrototype proto = build_prototype(std::vector{tape});
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t s = 0; s < 3; ++s) CHECK(proto.cell(l, s) == tape.pooled_cell(l, s));
  }
}

TEST_CASE("pooled and full tapes give the same prototype") {
  fixture::Rng rng(2);
  auto tapes = fixture::random_pool(rng, 5, 2, 2, 8, 6);
  std::vector<ActivationTape> pooled;
  for (const auto& t : tapes) pooled.push_back(t.to_pooled());
  CHECK(max_abs_diff(build_prototype(tapes), build_prototype(pooled)) < 1e-6);
}

TEST_CASE("permutation invariance and incremental update") {
  fixture::Rng rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    auto tapes = fixture::random_pool(rng, rng.index(2, 20), 3, 4, 8, 2);
    const IdPrototype base = build_prototype(tapes);

    auto shuffled = tapes;
    std::shuffle(shuffled.begin(), shuffled.end(), rng.engine());
    CHECK(max_abs_diff(base, build_prototype(shuffled)) < 1e-6);

    const std::size_t n = tapes.size();
    auto extra = fixture::random_tape(rng, 3, 4, 8, 2, "extra");
    tapes.push_back(extra);
    const IdPrototype grown = build_prototype(tapes);
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t s = 0; s < 4; ++s) {
        const auto x = extra.pooled_cell(l, s);
        for (std::size_t c = 0; c < 8; ++c) {
          const double expected = (n * static_cast<double>(base.cell(l, s)[c]) + x[c]) / (n + 1);
          CHECK(grown.cell(l, s)[c] == Approx(expected).margin(1e-6));
        }
      }
    }
  }
}

TEST_CASE("build_prototype errors") {
  fixture::Rng rng(3);
  CHECK(fixture::thrown([] { build_prototype(std::vector<ActivationTape>{}); }) == ErrorCode::EmptyPool);

  auto tapes = fixture::random_pool(rng, 3, 2, 2, 4, 1);
  tapes[2].set_speaker_id("retain-0");
  CHECK(fixture::thrown([&] { build_prototype(tapes); }) == ErrorCode::DuplicateSpeaker);

  auto mixed = fixture::random_pool(rng, 2, 2, 2, 4, 1);
  mixed.push_back(fixture::random_tape(rng, 2, 3, 4, 1, "odd"));
  CHECK(fixture::thrown([&] { build_prototype(mixed); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("check_compatible") {
  fixture::Rng rng(4);
  const IdPrototype proto = build_prototype(fixture::random_pool(rng, 2, 2, 3, 4, 1));
  proto.check_compatible(fixture::random_tape(rng, 2, 3, 4, 7, "ok"));
  CHECK(fixture::thrown([&] { proto.check_compatible(fixture::random_tape(rng, 2, 3, 5, 1, "x")); }) ==
        ErrorCode::ShapeMismatch);
}

TEST_CASE("save and load round trip") {
  fixture::Rng rng(5);
  fixture::TempDir dir;
  const IdPrototype proto = build_prototype(fixture::random_pool(rng, 4, 2, 3, 8, 2));
  const auto path = dir / "proto.tape";
  save_prototype(proto, path);
  CHECK(std::filesystem::exists(prototype_sidecar_path(path)));
  CHECK(load_prototype(path) == proto);
  CHECK(proto.to_tape().pooled());
}

TEST_CASE("load rejects missing or inconsistent metadata") {
  fixture::Rng rng(6);
  fixture::TempDir dir;
  const IdPrototype proto = build_prototype(fixture::random_pool(rng, 3, 2, 2, 4, 1));
  const auto path = dir / "proto.tape";
  save_prototype(proto, path);
  const auto sidecar = prototype_sidecar_path(path);

  std::filesystem::remove(sidecar);
  CHECK(fixture::thrown([&] { load_prototype(path); }) == ErrorCode::MissingMetadata);

  std::ofstream(sidecar) << R"({"n": 4, "source_ids": ["a", "b", "c"]})";
  CHECK(fixture::thrown([&] { load_prototype(path); }) == ErrorCode::ValidationError);

  std::ofstream(sidecar, std::ios::trunc) << R"({"n": 3, "source_ids": ["a", "a", "c"]})";
  CHECK(fixture::thrown([&] { load_prototype(path); }) == ErrorCode::ValidationError);

  std::ofstream(sidecar, std::ios::trunc) << R"({"n": 3, "source_ids": ["a", "b", "c"]})";
  CHECK(load_prototype(path).source_ids() == std::vector<std::string>{"a", "b", "c"});
}
