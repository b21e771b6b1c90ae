#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "trus/tape.hpp"
#include "trus/tensor.hpp"

namespace trus {

inline constexpr std::size_t kDefaultPoolSize = 30;

/// Per-(layer, step) centroid of N retain speakers' pooled activations.
///
/// Immutable once built. Each source speaker contributes exactly one
/// utterance, so `source_ids` must be pairwise distinct.
class IdPrototype {
 public:
  IdPrototype(LayerStepGrid<ChannelVector> cells, std::vector<std::string> source_ids);

  std::size_t layers() const noexcept { return cells_.layers(); }
  std::size_t steps() const noexcept { return cells_.steps(); }
  std::size_t channels() const noexcept { return channels_; }
  std::size_t pool_size() const noexcept { return source_ids_.size(); }
  const std::vector<std::string>& source_ids() const noexcept { return source_ids_; }

  const ChannelVector& cell(std::size_t layer, std::size_t step) const { return cells_.at(layer, step); }
  const ChannelVector& cell(Cell c) const { return cells_.at(c); }
  const LayerStepGrid<ChannelVector>& cells() const noexcept { return cells_; }

  /// Throws ShapeMismatch unless `tape` has this prototype's L, T and d.
  void check_compatible(const ActivationTape& tape) const;

  /// The grid as a pooled tape (speaker id "prototype").
  ActivationTape to_tape() const;

  friend bool operator==(const IdPrototype&, const IdPrototype&) = default;

 private:
  LayerStepGrid<ChannelVector> cells_;
  std::size_t channels_ = 0;
  std::vector<std::string> source_ids_;
};

/// Mean over tapes of each tape's frame-pooled cell. Full tapes are pooled
/// first, so utterances of different lengths can be mixed.
IdPrototype build_prototype(std::span<const ActivationTape> tapes);

/// JSON sidecar written next to a prototype tape: `<path>.json`.
std::filesystem::path prototype_sidecar_path(const std::filesystem::path& path);

void save_prototype(const IdPrototype& proto, const std::filesystem::path& path);
IdPrototype load_prototype(const std::filesystem::path& path);

}  // namespace trus
