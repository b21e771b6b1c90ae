#pragma once

#include <compare>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "trus/tensor.hpp"

namespace trus {

/// Address of one (layer, flow step) cell.
///
/// `layer` is 0-based (block 1 is layer 0). `step` is the 0-based position in
/// flow order, so step 0 is flow step T and step T-1 is flow step 1; this is
/// also the order cells are stored on a tape.
struct Cell {
  std::uint16_t layer = 0;
  std::uint16_t step = 0;

  friend auto operator<=>(const Cell&, const Cell&) = default;
};

/// Flow step number t in {T..1} for a tape-order position.
constexpr int flow_step(std::size_t step, std::size_t num_steps) {
  return static_cast<int>(num_steps - step);
}

/// Dense L x T grid in tape order (layer-major, then step).
template <typename T>
class LayerStepGrid {
 public:
  LayerStepGrid() = default;
  LayerStepGrid(std::size_t layers, std::size_t steps, const T& fill = T{})
      : layers_(layers), steps_(steps), cells_(layers * steps, fill) {}

  std::size_t layers() const noexcept { return layers_; }
  std::size_t steps() const noexcept { return steps_; }
  std::size_t size() const noexcept { return cells_.size(); }

  T& at(std::size_t layer, std::size_t step) { return cells_[layer * steps_ + step]; }
  const T& at(std::size_t layer, std::size_t step) const { return cells_[layer * steps_ + step]; }
  T& at(Cell c) { return at(c.layer, c.step); }
  const T& at(Cell c) const { return at(c.layer, c.step); }

  auto begin() noexcept { return cells_.begin(); }
  auto end() noexcept { return cells_.end(); }
  auto begin() const noexcept { return cells_.begin(); }
  auto end() const noexcept { return cells_.end(); }

  friend bool operator==(const LayerStepGrid&, const LayerStepGrid&) = default;

 private:
  std::size_t layers_ = 0;
  std::size_t steps_ = 0;
  std::vector<T> cells_;
};

inline constexpr char kTapeMagic[4] = {'T', 'R', 'U', 'S'};
inline constexpr std::uint16_t kTapeVersion = 1;

struct TapeHeader {
  std::uint16_t version = kTapeVersion;
  std::uint16_t num_layers = 0;
  std::uint16_t num_steps = 0;
  std::uint32_t channels = 0;
  std::uint32_t frames = 0;
  std::string speaker_id;
  bool pooled = false;

  /// Encoded header size in bytes (depends on the speaker id length).
  std::size_t encoded_size() const noexcept;
  /// Payload size in bytes: L * T * F * d * 4.
  std::uint64_t payload_size() const noexcept;

  friend bool operator==(const TapeHeader&, const TapeHeader&) = default;
};

/// Per-layer, per-step FFN activations of one utterance.
class ActivationTape {
 public:
  ActivationTape() = default;
  /// Zero-filled tape shaped by `header`.
  explicit ActivationTape(TapeHeader header);

  const TapeHeader& header() const noexcept { return header_; }
  std::size_t layers() const noexcept { return header_.num_layers; }
  std::size_t steps() const noexcept { return header_.num_steps; }
  std::size_t channels() const noexcept { return header_.channels; }
  std::size_t frames() const noexcept { return header_.frames; }
  const std::string& speaker_id() const noexcept { return header_.speaker_id; }
  bool pooled() const noexcept { return header_.pooled; }

  void set_speaker_id(std::string id) { header_.speaker_id = std::move(id); }

  FrameMatrix& at(std::size_t layer, std::size_t step) { return cells_.at(layer, step); }
  const FrameMatrix& at(std::size_t layer, std::size_t step) const { return cells_.at(layer, step); }
  FrameMatrix& at(Cell c) { return cells_.at(c); }
  const FrameMatrix& at(Cell c) const { return cells_.at(c); }

  /// Frame-mean of one cell (the cell itself when the tape is pooled).
  ChannelVector pooled_cell(std::size_t layer, std::size_t step) const;
  /// Pooled copy: every cell replaced by its frame mean, F = 1, flag set.
  ActivationTape to_pooled() const;

  /// Same L, T and d.
  bool same_grid(const ActivationTape& other) const noexcept;

  /// Throws ValidationError / ShapeMismatch / NonFiniteValue when an
  /// invariant is broken.
  void validate() const;

  friend bool operator==(const ActivationTape&, const ActivationTape&) = default;

 private:
  TapeHeader header_;
  LayerStepGrid<FrameMatrix> cells_;
};

/// Writes header then little-endian f32 payload; returns bytes written.
std::size_t write_tape(const ActivationTape& tape, std::ostream& out);
ActivationTape read_tape(std::istream& in);
TapeHeader read_tape_header(std::istream& in);

std::vector<std::uint8_t> encode_tape(const ActivationTape& tape);
ActivationTape decode_tape(std::span<const std::uint8_t> bytes);

std::size_t write_tape_file(const ActivationTape& tape, const std::filesystem::path& path);
ActivationTape read_tape_file(const std::filesystem::path& path);

/// 64-bit FNV-1a over the encoded tape bytes.
std::uint64_t tape_digest(const ActivationTape& tape);

}  // namespace trus
