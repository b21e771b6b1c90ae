#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "trus/prototype.hpp"
#include "trus/tape.hpp"
#include "trus/tensor.hpp"

namespace trus {

/// Called with every block output during synthesis, before it is recorded
/// and propagated; a returned matrix replaces it.
using ActivationHook = std::function<std::optional<FrameMatrix>(Cell cell, const FrameMatrix& activations)>;

/// Steering strength used when none is given.
inline constexpr double kDefaultAlpha = 1.2;
/// apply_steering rejects directions whose norm is further than this from 1.
inline constexpr double kUnitTolerance = 1e-4;

/// Unit identity direction from the prototype toward the opt-out activation.
/// Throws DegenerateDirection when the two (nearly) coincide.
ChannelVector compute_steering_vector(const ChannelVector& opt, const ChannelVector& prototype);

/// Removes alpha times the component of every frame along `direction`:
/// x_f <- x_f - alpha (x_f . s) s. alpha = 0 returns `x` bit-for-bit.
FrameMatrix apply_steering(const FrameMatrix& x, const ChannelVector& direction, double alpha);
void apply_steering_in_place(FrameMatrix& x, const ChannelVector& direction, double alpha);

struct SteeringDiagnostics {
  std::size_t present = 0;
  std::size_t degenerate = 0;
};

/// Precomputed per-cell identity directions for one opt-out speaker.
class SteeringGrid {
 public:
  using Direction = std::optional<ChannelVector>;

  SteeringGrid(LayerStepGrid<Direction> directions, std::size_t channels, double alpha);

  std::size_t layers() const noexcept { return directions_.layers(); }
  std::size_t steps() const noexcept { return directions_.steps(); }
  std::size_t channels() const noexcept { return channels_; }
  double alpha() const noexcept { return alpha_; }

  bool has(Cell c) const { return directions_.at(c).has_value(); }
  const Direction& direction(Cell c) const { return directions_.at(c); }
  std::vector<Cell> present_cells() const;
  /// Cells without a direction are the ones where the opt-out activation
  /// coincided with the prototype.
  SteeringDiagnostics diagnostics() const;

  /// Steers `x` at cell `c` with `alpha` (the grid's own strength unless
  /// overridden); a cell without a direction leaves `x` untouched.
  FrameMatrix apply(Cell c, const FrameMatrix& x, std::optional<double> alpha = std::nullopt) const;

  /// Directions as a pooled tape; absent cells hold zeros.
  ActivationTape to_tape(const std::string& speaker_id) const;
  /// One string per layer, one '0'/'1' character per step in tape order.
  std::vector<std::string> presence_bitmap() const;
  static SteeringGrid from_tape(const ActivationTape& tape, const std::vector<std::string>& presence,
                                double alpha);

  friend bool operator==(const SteeringGrid&, const SteeringGrid&) = default;

 private:
  LayerStepGrid<Direction> directions_;
  std::size_t channels_ = 0;
  double alpha_ = kDefaultAlpha;
};

/// Steering direction at every cell where one exists; opt-out tape cells are
/// frame-pooled first.
SteeringGrid compute_steering_grid(const ActivationTape& opt_tape, const IdPrototype& proto, double alpha);

/// Pooled direction tape at `path`, presence bitmap and alpha in `<path>.json`.
void save_steering(const SteeringGrid& grid, const std::filesystem::path& path,
                   const std::string& speaker_id = "steering");
SteeringGrid load_steering(const std::filesystem::path& path);

}  // namespace trus
