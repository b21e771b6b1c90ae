#include <catch_amalgamated.hpp>

#include <cmath>
#include <limits>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "trus/error.hpp"
#include "trus/tensor.hpp"
#include "trus/text.hpp"

using namespace trus;
using Catch::Approx;

TEST_CASE("cosine_sim worked examples") {
  CHECK(cosine_sim(ChannelVector{1, 0}, ChannelVector{0, 1}) == 0.0);
  CHECK(cosine_sim(ChannelVector{1, 2, 3}, ChannelVector{1, 2, 3}) == 1.0);
  CHECK(cosine_sim(ChannelVector{1, 2, 3}, ChannelVector{-1, -2, -3}) == -1.0);
  // 32 / sqrt(14 * 77)
  CHECK(cosine_sim(ChannelVector{1, 2, 3}, ChannelVector{4, 5, 6}) == Approx(0.9746318461970762).margin(1e-12));
  CHECK(cosine_sim(ChannelVector{3, 4}, ChannelVector{4, 3}) == Approx(0.96).margin(1e-12));
}

TEST_CASE("cosine_sim rejects degenerate and mismatched inputs") {
  CHECK(fixture::thrown([] { cosine_sim(ChannelVector{0, 0, 0}, ChannelVector{1, 2, 3}); }) == ErrorCode::DegenerateVector);
  CHECK(fixture::thrown([] { cosine_sim(ChannelVector{1e-7f, 0}, ChannelVector{1, 0}); }) == ErrorCode::DegenerateVector);
  CHECK(fixture::thrown([] { cosine_sim(ChannelVector{1, 2}, ChannelVector{1, 2, 3}); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("cosine_sim properties on random vectors") {
  fixture::Rng rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t d = rng.index(1, 128);
    const auto a = fixture::random_vector(rng, d);
    const auto b = fixture::random_vector(rng, d);
    const double c = cosine_sim(a, b);
    CHECK(c >= -1.0);
    CHECK(c <= 1.0);
    CHECK(c == cosine_sim(b, a));
    CHECK(c == Approx(oracle::cosine(oracle::to_vec(a), oracle::to_vec(b))).margin(1e-6));

    ChannelVector scaled = a;
    const double lambda = rng.uniform(0.1, 10.0);
    for (auto& v : scaled) v = static_cast<float>(v * lambda);
    CHECK(cosine_sim(scaled, b) == Approx(c).margin(1e-5));
    CHECK(cosine_sim(a, a) == 1.0);
  }
}

TEST_CASE("pool_frames matches a brute-force mean") {
  fixture::Rng rng(5);
  const FrameMatrix m = fixture::random_matrix(rng, 4, 8);
  const ChannelVector p = pool_frames(m);
  const auto expected = oracle::pool(m);
  REQUIRE(p.size() == 8);
  for (std::size_t c = 0; c < 8; ++c) CHECK(p[c] == Approx(expected[c]).margin(1e-7));

  const FrameMatrix single = fixture::random_matrix(rng, 1, 16);
  CHECK(pool_frames(single).values() == std::vector<float>(single.data().begin(), single.data().end()));
  CHECK(fixture::thrown([] { pool_frames(FrameMatrix(0, 4)); }) == ErrorCode::EmptyMatrix);
}

TEST_CASE("pool_frames of constant rows is that row") {
  const FrameMatrix m{{1, 2, 3}, {1, 2, 3}, {1, 2, 3}};
  CHECK(pool_frames(m) == ChannelVector{1, 2, 3});
}

TEST_CASE("l2_normalize yields unit norm") {
  fixture::Rng rng(64);
  for (int trial = 0; trial < 50; ++trial) {
    const auto v = fixture::random_vector(rng, 64, 5.0);
    CHECK(l2_norm(l2_normalize(v).span()) == Approx(1.0).margin(1e-6));
  }
  CHECK(l2_normalize(ChannelVector{3, 4}) == ChannelVector{0.6f, 0.8f});
  CHECK(fixture::thrown([] { l2_normalize(ChannelVector{0, 0}); }) == ErrorCode::DegenerateVector);
}

TEST_CASE("subtract_scaled_projection") {
  std::vector<float> x{3, 4};
  const std::vector<float> s{1, 0};
  subtract_scaled_projection(x, s, 1.0);
  CHECK(x == std::vector<float>{0, 4});

  std::vector<float> y{0.1f, -0.7f, 2.5f};
  const auto before = y;
  subtract_scaled_projection(y, std::vector<float>{0.6f, 0.8f, 0.0f}, 0.0);
  CHECK(y == before);
}

TEST_CASE("all_finite") {
  CHECK(all_finite(std::vector<float>{1, 2, 3}));
  CHECK_FALSE(all_finite(std::vector<float>{1, std::numeric_limits<float>::quiet_NaN()}));
  CHECK_FALSE(all_finite(std::vector<float>{std::numeric_limits<float>::infinity()}));
}

TEST_CASE("FrameMatrix row layout") {
  const FrameMatrix m{{1, 2}, {3, 4}, {5, 6}};
  CHECK(m.frames() == 3);
  CHECK(m.channels() == 2);
  CHECK(m.at(2, 1) == 6);
  CHECK(m.row(1)[0] == 3);
  CHECK(FrameMatrix::from_vector(ChannelVector{7, 8}) == FrameMatrix{{7, 8}});
}

TEST_CASE("format_number round-trips") {
  fixture::Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const double v = rng.uniform(-1e6, 1e6) * std::pow(10.0, rng.uniform(-12, 12));
    CHECK(std::stod(format_number(v)) == v);
  }
  CHECK(format_number(0.5) == "0.5");
  CHECK(format_number(1.0) == "1");
}
