#include <catch_amalgamated.hpp>

#include <cstring>
#include <fstream>
#include <limits>
#include <sstream>

#include "fixtures.hpp"
#include "oracles.hpp"
#include "trus/error.hpp"
#include "trus/tape.hpp"

using namespace trus;

namespace {

ErrorCode decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_tape(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("decode succeeded");
  return ErrorCode::IoError;
}

ActivationTape small_tape() {
  fixture::Rng rng(1);
  return fixture::random_tape(rng, 2, 3, 4, 5, "ab");
}

}  // namespace

TEST_CASE("flow step numbering") {
  CHECK(flow_step(0, 16) == 16);
  CHECK(flow_step(15, 16) == 1);
  CHECK(Cell{0, 1} < Cell{1, 0});
}

TEST_CASE("header plus payload size") {
  const ActivationTape tape = small_tape();
  // 4 magic + 2 version + 2 L + 2 T + 4 d + 4 F + 2 id length + 2 id + 1 flag
  CHECK(tape.header().encoded_size() == 23);
  CHECK(tape.header().payload_size() == 2 * 3 * 5 * 4 * 4);
  std::ostringstream out;
  CHECK(write_tape(tape, out) == 23 + 480);
  CHECK(out.str().size() == 503);
}

TEST_CASE("encoding matches the hand-written layout") {
  const ActivationTape tape = small_tape();
  const auto bytes = encode_tape(tape);
  CHECK(bytes == oracle::encode(tape));
  CHECK(std::memcmp(bytes.data(), "TRUS", 4) == 0);
  CHECK(bytes[4] == 1);
  CHECK(bytes[5] == 0);

  // Cell (1, 2), frame 3, channel 1 lives at a fixed offset.
  const std::size_t offset = 23 + 4 * (((1 * 3 + 2) * 5 + 3) * 4 + 1);
  float v;
  std::memcpy(&v, bytes.data() + offset, 4);
  CHECK(v == tape.at(1, 2).at(3, 1));
}

TEST_CASE("round trip is bit-exact") {
  fixture::Rng rng(99);
  for (int i = 0; i < 50; ++i) {
    const bool pooled = rng.coin();
    const std::string id(rng.index(0, 40), static_cast<char>('a' + rng.index(0, 25)));
    const ActivationTape tape = fixture::random_tape(rng, static_cast<std::uint16_t>(rng.index(1, 6)),
                                                     static_cast<std::uint16_t>(rng.index(1, 9)),
                                                     static_cast<std::uint32_t>(rng.index(1, 33)),
                                                     static_cast<std::uint32_t>(rng.index(1, 7)), id, pooled);
    const auto bytes = encode_tape(tape);
    const ActivationTape back = decode_tape(bytes);
    CHECK(back == tape);
    CHECK(encode_tape(back) == bytes);
  }
}

TEST_CASE("negative zero and denormals survive") {
  TapeHeader h;
  h.num_layers = 1;
  h.num_steps = 1;
  h.channels = 3;
  h.frames = 1;
  ActivationTape tape(h);
  tape.at(0, 0) = FrameMatrix{{-0.0f, std::numeric_limits<float>::denorm_min(), std::numeric_limits<float>::max()}};
  const ActivationTape back = decode_tape(encode_tape(tape));
  CHECK(std::signbit(back.at(0, 0).at(0, 0)));
  CHECK(back.at(0, 0).at(0, 1) == std::numeric_limits<float>::denorm_min());
  CHECK(encode_tape(back) == encode_tape(tape));
}

TEST_CASE("file round trip") {
  fixture::TempDir dir;
  const ActivationTape tape = small_tape();
  const auto path = dir / "x.tape";
  CHECK(write_tape_file(tape, path) == 503);
  CHECK(read_tape_file(path) == tape);
  std::ifstream in(path, std::ios::binary);
  CHECK(read_tape_header(in) == tape.header());
}

TEST_CASE("reader rejects corrupt input") {
  const auto good = encode_tape(small_tape());

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(decode_error(bad_magic) == ErrorCode::BadMagic);

  auto bad_version = good;
  bad_version[4] = 2;
  CHECK(decode_error(bad_version) == ErrorCode::VersionUnsupported);

  CHECK(decode_error(std::vector<std::uint8_t>(good.begin(), good.end() - 1)) == ErrorCode::TruncatedPayload);
  CHECK(decode_error(std::vector<std::uint8_t>(good.begin(), good.begin() + 10)) == ErrorCode::TruncatedPayload);

  auto nan = good;
  const float q = std::numeric_limits<float>::quiet_NaN();
  std::memcpy(nan.data() + 23 + 4 * 7, &q, 4);
  CHECK(decode_error(nan) == ErrorCode::NonFiniteValue);
}

TEST_CASE("writer refuses non-finite payloads") {
  ActivationTape tape = small_tape();
  tape.at(0, 0).at(0, 0) = std::numeric_limits<float>::infinity();
  std::ostringstream out;
  CHECK_THROWS_AS(write_tape(tape, out), Error);
}

TEST_CASE("pooled copy") {
  const ActivationTape tape = small_tape();
  const ActivationTape pooled = tape.to_pooled();
  CHECK(pooled.pooled());
  CHECK(pooled.frames() == 1);
  CHECK(pooled.same_grid(tape));
  for (std::size_t l = 0; l < 2; ++l) {
    for (std::size_t s = 0; s < 3; ++s) {
      CHECK(pooled.at(l, s).row(0)[2] == tape.pooled_cell(l, s)[2]);
      CHECK(pooled.pooled_cell(l, s) == tape.pooled_cell(l, s));
    }
  }
}

TEST_CASE("tape digest tracks content") {
  ActivationTape tape = small_tape();
  const auto d0 = tape_digest(tape);
  CHECK(tape_digest(decode_tape(encode_tape(tape))) == d0);
  tape.at(1, 1).at(0, 0) += 1.0f;
  CHECK(tape_digest(tape) != d0);
}
