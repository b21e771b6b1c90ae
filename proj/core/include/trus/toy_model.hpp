#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "trus/steering.hpp"
#include "trus/tape.hpp"
#include "trus/tensor.hpp"

namespace trus {

/// Text seed used for every prototype and registration recording.
inline constexpr std::uint64_t kCalibrationTextSeed = 0xC0FFEE;

/// Shape and seeds of the stand-in flow-matching synthesizer.
struct ToyConfig {
  std::uint16_t layers = 8;
  std::uint16_t steps = 16;
  std::uint32_t channels = 64;
  std::uint32_t frames = 32;
  /// Per-layer identity gain in [0, 1]. Empty means "draw from weight_seed".
  std::vector<double> identity_gain;
  std::uint64_t content_seed = 0x5EED;
  std::uint64_t weight_seed = 7;
  /// Row norm of the mixing maps; below 1/1.32 keeps the recurrence contracting.
  double mixing_scale = 0.5;
  /// Off-identity perturbation of the mixing maps before row normalization.
  double mixing_noise = 0.2;

  /// Throws ConfigError when a field is out of range.
  void validate() const;
};

/// A synthetic speaker: a unit identity direction derived from a seed.
struct ToySpeaker {
  std::string id;
  ChannelVector identity;
  std::uint64_t seed = 0;

  static ToySpeaker from_seed(std::string id, std::uint64_t seed, std::size_t channels);
  /// Seed is the FNV-1a hash of the id, so the same name is the same voice.
  static ToySpeaker from_id(std::string id, std::size_t channels);
};

std::uint64_t fnv1a64(std::string_view text) noexcept;

struct SynthesisOutput {
  ChannelVector output_embedding;  ///< frame-pooled final flow state
  FrameMatrix output_frames;       ///< final flow state, F x d
  ActivationTape tape;             ///< every block output after hooks
  std::set<Cell> steered_cells_applied;

  friend bool operator==(const SynthesisOutput&, const SynthesisOutput&) = default;
};

/// Deterministic desk-scale stand-in for a DiT flow-matching TTS backbone.
///
/// At flow step t (T down to 1) with sigma = t/T the conditioning is
/// drive = (1 - sigma) * content + sigma * noise. The block stack starts from
/// the flow state x and each block computes
///
///   h <- tanh(W_l h + drive) / 0.76 + gamma_l * identity
///
/// (the hook sees h here). The velocity is the mean of the L block outputs and
/// x <- x + (v - x) / T. Frames evolve independently through shared W_l.
class ToyModel {
 public:
  explicit ToyModel(ToyConfig config);

  const ToyConfig& config() const noexcept { return config_; }
  const std::vector<double>& identity_gain() const noexcept { return gain_; }

  SynthesisOutput synthesize(const ToySpeaker& speaker, std::uint64_t text_seed,
                             const ActivationHook& hook = {}) const;

  /// Unhooked recording of `speaker` reading the calibration text.
  ActivationTape reference_tape(const ToySpeaker& speaker) const;

 private:
  ToyConfig config_;
  std::vector<double> gain_;
  std::vector<std::vector<float>> mixing_;  // L matrices, d x d, stored transposed
};

SynthesisOutput synthesize(const ToyConfig& config, const ToySpeaker& speaker, std::uint64_t text_seed,
                           const ActivationHook& hook = {});

/// Cosine between the output embedding and the speaker's identity.
double identity_similarity(const SynthesisOutput& out, const ToySpeaker& speaker);

/// ||A_perp - B_perp||_F / ||A_perp||_F over the output frames, where _perp
/// drops each frame's component along the speaker identity.
double content_error(const SynthesisOutput& a, const SynthesisOutput& b, const ToySpeaker& speaker);

}  // namespace trus
