#pragma once

#include <array>
#include <iosfwd>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "trus/prototype.hpp"
#include "trus/tape.hpp"

namespace trus {

/// Tolerance multiplier for the "mu + sigma" criterion.
inline constexpr double kDefaultK = 1.0;

/// Cosine similarities between one opt-out speaker's pooled activations and
/// the prototype, plus the layer statistics that drive intervention.
///
/// A cell whose opt-out or prototype vector has zero norm has no similarity;
/// it is left out of its layer mean and is never selected. A layer with no
/// similarities at all has no mean and is left out of mu and sigma.
struct SimilarityProfile {
  LayerStepGrid<std::optional<double>> similarity;
  std::vector<std::optional<double>> layer_means;
  double mu = 0.0;
  double sigma = 0.0;  ///< population standard deviation of the layer means
  double k = kDefaultK;
  double tau = 0.0;
  std::size_t degenerate_cells = 0;

  std::size_t layers() const noexcept { return similarity.layers(); }
  std::size_t steps() const noexcept { return similarity.steps(); }
  double threshold(double band_k) const noexcept { return mu + band_k * sigma; }

  /// Layer means, mu, sigma and tau from a similarity grid.
  static SimilarityProfile from_similarities(LayerStepGrid<std::optional<double>> similarity, double k);
};

/// Sparse set of (layer, step) cells to steer.
struct InterventionMask {
  std::set<Cell> cells;
  std::set<std::uint16_t> selected_layers;

  bool contains(Cell c) const { return cells.count(c) != 0; }
  std::size_t size() const noexcept { return cells.size(); }
  bool empty() const noexcept { return cells.empty(); }
  bool is_subset_of(const InterventionMask& other) const;

  friend bool operator==(const InterventionMask&, const InterventionMask&) = default;
};

SimilarityProfile compute_profile(const ActivationTape& opt_tape, const IdPrototype& proto, double k = kDefaultK);

/// Layers with mean similarity strictly below tau, then, inside each of them,
/// steps with similarity strictly below that layer's mean.
InterventionMask select_mask(const SimilarityProfile& profile);
/// Same two-stage rule with an explicit threshold; nullopt selects every
/// layer (the step filter still applies).
InterventionMask select_mask_with_threshold(const SimilarityProfile& profile, std::optional<double> tau);

enum class Band { MuMinusSigma, Mu, MuPlusSigma, All };
inline constexpr std::array<Band, 4> kAblationBands = {Band::MuMinusSigma, Band::Mu, Band::MuPlusSigma,
                                                       Band::All};
std::string_view band_label(Band band) noexcept;
/// k for the band; nullopt for All.
std::optional<double> band_k(Band band) noexcept;
InterventionMask band_mask(const SimilarityProfile& profile, Band band);

/// Masks for k in {-1, 0, +1} and the all-layers mask, keyed by band label
/// ("mu-sigma", "mu", "mu+sigma", "all").
std::map<std::string, InterventionMask> ablation_masks(const SimilarityProfile& profile);

/// CSV columns: layer, step, c, layer_mean, mu, sigma, tau. One row per cell
/// in tape order; layer is 1-based, step is the flow step t.
void write_profile_csv(const SimilarityProfile& profile, std::ostream& out);

}  // namespace trus
