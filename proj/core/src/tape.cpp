#include "trus/tape.hpp"

#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>

#include "trus/error.hpp"

// Tape layout (all integers and floats little-endian):
//
//   magic        4 bytes  "TRUS"
//   version      u16
//   num_layers   u16      L
//   num_steps    u16      T
//   channels     u32      d
//   frames       u32      F
//   id_length    u16      byte length of the UTF-8 speaker id
//   speaker_id   id_length bytes
//   pooled_flag  u8       1 = cells are pooled vectors (F = 1)
//   payload      L*T*F*d f32, layer-major, then step (flow order T..1),
//                then frame, then channel

namespace trus {
namespace {

constexpr std::size_t kFixedHeaderBytes = 4 + 2 + 2 + 2 + 4 + 4 + 2 + 1;
constexpr std::uint64_t kMaxCellElements = std::uint64_t{1} << 31;

template <typename T>
void put_le(std::ostream& out, T value) {
  static_assert(std::is_unsigned_v<T>);
  std::array<char, sizeof(T)> bytes{};
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFFu);
  }
  out.write(bytes.data(), bytes.size());
}

template <typename T>
T get_le(std::istream& in, const char* what) {
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) {
    fail(ErrorCode::TruncatedPayload, std::string("stream ended inside header field ") + what);
  }
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) value |= static_cast<T>(bytes[i]) << (8 * i);
  return value;
}

void write_floats(std::ostream& out, std::span<const float> values) {
  if constexpr (std::endian::native == std::endian::little) {
    out.write(reinterpret_cast<const char*>(values.data()),
              static_cast<std::streamsize>(values.size_bytes()));
  } else {
    for (float v : values) put_le(out, std::bit_cast<std::uint32_t>(v));
  }
}

void read_floats(std::istream& in, std::span<float> values) {
  const auto want = static_cast<std::streamsize>(values.size_bytes());
  in.read(reinterpret_cast<char*>(values.data()), want);
  if (in.gcount() != want) fail(ErrorCode::TruncatedPayload, "payload shorter than header promises");
  if constexpr (std::endian::native != std::endian::little) {
    for (float& v : values) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      v = std::bit_cast<float>((u >> 24) | ((u >> 8) & 0xFF00u) | ((u << 8) & 0xFF0000u) | (u << 24));
    }
  }
}

void check_header(const TapeHeader& h) {
  if (h.num_layers < 1 || h.num_steps < 1 || h.channels < 1 || h.frames < 1) {
    fail(ErrorCode::ValidationError, "tape dimensions must be >= 1 (L=" + std::to_string(h.num_layers) +
                                         " T=" + std::to_string(h.num_steps) + " d=" +
                                         std::to_string(h.channels) + " F=" + std::to_string(h.frames) + ")");
  }
  if (h.pooled && h.frames != 1) fail(ErrorCode::ValidationError, "pooled tape must have F = 1");
  if (static_cast<std::uint64_t>(h.frames) * h.channels > kMaxCellElements) {
    fail(ErrorCode::ValidationError, "cell size exceeds supported maximum");
  }
  if (h.speaker_id.size() > std::numeric_limits<std::uint16_t>::max()) {
    fail(ErrorCode::ValidationError, "speaker id longer than 65535 bytes");
  }
}

}  // namespace

std::size_t TapeHeader::encoded_size() const noexcept { return kFixedHeaderBytes + speaker_id.size(); }

std::uint64_t TapeHeader::payload_size() const noexcept {
  return std::uint64_t{num_layers} * num_steps * frames * channels * sizeof(float);
}

ActivationTape::ActivationTape(TapeHeader header)
    : header_(std::move(header)),
      cells_(header_.num_layers, header_.num_steps, FrameMatrix(header_.frames, header_.channels)) {}

ChannelVector ActivationTape::pooled_cell(std::size_t layer, std::size_t step) const {
  return pool_frames(at(layer, step));
}

ActivationTape ActivationTape::to_pooled() const {
  TapeHeader h = header_;
  h.frames = 1;
  h.pooled = true;
  ActivationTape out(h);
  for (std::size_t l = 0; l < layers(); ++l) {
    for (std::size_t s = 0; s < steps(); ++s) {
      out.at(l, s) = header_.pooled ? at(l, s) : FrameMatrix::from_vector(pooled_cell(l, s));
    }
  }
  return out;
}

bool ActivationTape::same_grid(const ActivationTape& other) const noexcept {
  return layers() == other.layers() && steps() == other.steps() && channels() == other.channels();
}

void ActivationTape::validate() const {
  check_header(header_);
  if (cells_.layers() != layers() || cells_.steps() != steps()) {
    fail(ErrorCode::ShapeMismatch, "cell grid does not match header L x T");
  }
  for (const auto& m : cells_) {
    if (m.frames() != frames() || m.channels() != channels()) {
      fail(ErrorCode::ShapeMismatch, "cell is " + std::to_string(m.frames()) + "x" +
                                         std::to_string(m.channels()) + ", header says " +
                                         std::to_string(frames()) + "x" + std::to_string(channels()));
    }
    if (!all_finite(m.data())) fail(ErrorCode::NonFiniteValue, "tape contains NaN or Inf");
  }
}

std::size_t write_tape(const ActivationTape& tape, std::ostream& out) {
  tape.validate();
  const TapeHeader& h = tape.header();
  out.write(kTapeMagic, sizeof kTapeMagic);
  put_le<std::uint16_t>(out, h.version);
  put_le<std::uint16_t>(out, h.num_layers);
  put_le<std::uint16_t>(out, h.num_steps);
  put_le<std::uint32_t>(out, h.channels);
  put_le<std::uint32_t>(out, h.frames);
  put_le<std::uint16_t>(out, static_cast<std::uint16_t>(h.speaker_id.size()));
  out.write(h.speaker_id.data(), static_cast<std::streamsize>(h.speaker_id.size()));
  put_le<std::uint8_t>(out, h.pooled ? 1 : 0);
  for (std::size_t l = 0; l < tape.layers(); ++l) {
    for (std::size_t s = 0; s < tape.steps(); ++s) write_floats(out, tape.at(l, s).data());
  }
  if (!out) fail(ErrorCode::SinkFailure, "write to tape sink failed");
  return h.encoded_size() + static_cast<std::size_t>(h.payload_size());
}

TapeHeader read_tape_header(std::istream& in) {
  char magic[4] = {};
  in.read(magic, sizeof magic);
  if (in.gcount() != 4 || std::memcmp(magic, kTapeMagic, 4) != 0) {
    fail(ErrorCode::BadMagic, "stream does not start with \"TRUS\"");
  }
  TapeHeader h;
  h.version = get_le<std::uint16_t>(in, "version");
  if (h.version != kTapeVersion) {
    fail(ErrorCode::VersionUnsupported, "tape version " + std::to_string(h.version));
  }
  h.num_layers = get_le<std::uint16_t>(in, "num_layers");
  h.num_steps = get_le<std::uint16_t>(in, "num_steps");
  h.channels = get_le<std::uint32_t>(in, "channels");
  h.frames = get_le<std::uint32_t>(in, "frames");
  const auto id_len = get_le<std::uint16_t>(in, "id_length");
  h.speaker_id.resize(id_len);
  in.read(h.speaker_id.data(), id_len);
  if (in.gcount() != id_len) fail(ErrorCode::TruncatedPayload, "stream ended inside speaker id");
  const auto flag = get_le<std::uint8_t>(in, "pooled_flag");
  if (flag > 1) fail(ErrorCode::ValidationError, "pooled flag must be 0 or 1");
  h.pooled = flag == 1;
  check_header(h);
  return h;
}

ActivationTape read_tape(std::istream& in) {
  TapeHeader header = read_tape_header(in);
  // Size is known from the header; refuse to allocate for a short stream.
  if (const auto here = in.tellg(); here != std::streampos(-1)) {
    in.seekg(0, std::ios::end);
    const auto end = in.tellg();
    in.seekg(here);
    if (end != std::streampos(-1) &&
        static_cast<std::uint64_t>(end - here) < header.payload_size()) {
      fail(ErrorCode::TruncatedPayload, "payload shorter than header promises");
    }
  }
  ActivationTape tape(std::move(header));
  for (std::size_t l = 0; l < tape.layers(); ++l) {
    for (std::size_t s = 0; s < tape.steps(); ++s) {
      auto cell = tape.at(l, s).data();
      read_floats(in, cell);
      if (!all_finite(cell)) {
        fail(ErrorCode::NonFiniteValue, "non-finite value in cell (layer " + std::to_string(l + 1) +
                                            ", step " + std::to_string(flow_step(s, tape.steps())) + ")");
      }
    }
  }
  return tape;
}

std::vector<std::uint8_t> encode_tape(const ActivationTape& tape) {
  std::ostringstream out(std::ios::binary);
  write_tape(tape, out);
  const std::string s = std::move(out).str();
  return {s.begin(), s.end()};
}

ActivationTape decode_tape(std::span<const std::uint8_t> bytes) {
  std::istringstream in(std::string(bytes.begin(), bytes.end()), std::ios::binary);
  return read_tape(in);
}

std::size_t write_tape_file(const ActivationTape& tape, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::SinkFailure, "cannot open " + path.string() + " for writing");
  const std::size_t n = write_tape(tape, out);
  out.flush();
  if (!out) fail(ErrorCode::SinkFailure, "write to " + path.string() + " failed");
  return n;
}

ActivationTape read_tape_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  return read_tape(in);
}

std::uint64_t tape_digest(const ActivationTape& tape) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::uint8_t b : encode_tape(tape)) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace trus
