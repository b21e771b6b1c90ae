#include "trus/selection.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include "trus/error.hpp"
#include "trus/text.hpp"

namespace trus {

SimilarityProfile SimilarityProfile::from_similarities(LayerStepGrid<std::optional<double>> similarity,
                                                       double k) {
  SimilarityProfile p;
  p.similarity = std::move(similarity);
  p.k = k;
  p.layer_means.assign(p.layers(), std::nullopt);

  std::vector<double> means;
  for (std::size_t l = 0; l < p.layers(); ++l) {
    long double sum = 0.0L;
    std::size_t count = 0;
    for (std::size_t s = 0; s < p.steps(); ++s) {
      if (const auto& c = p.similarity.at(l, s)) {
        sum += *c;
        ++count;
      } else {
        ++p.degenerate_cells;
      }
    }
    if (count > 0) {
      p.layer_means[l] = static_cast<double>(sum / static_cast<long double>(count));
      means.push_back(*p.layer_means[l]);
    }
  }
  if (means.empty()) fail(ErrorCode::DegenerateVector, "every cell of the profile is degenerate");

  // Extended accumulation keeps exact decimal ties (means 0.2, 0.4, 0.6 give
  // mu == 0.4) from tipping the strict comparisons.
  const auto n = static_cast<long double>(means.size());
  long double sum = 0.0L;
  for (double m : means) sum += m;
  const long double mu = sum / n;
  long double var = 0.0L;
  for (double m : means) var += (m - mu) * (m - mu);
  p.mu = static_cast<double>(mu);
  p.sigma = static_cast<double>(std::sqrt(var / n));
  p.tau = p.threshold(k);
  return p;
}

bool InterventionMask::is_subset_of(const InterventionMask& other) const {
  return std::includes(other.cells.begin(), other.cells.end(), cells.begin(), cells.end());
}

SimilarityProfile compute_profile(const ActivationTape& opt_tape, const IdPrototype& proto, double k) {
  proto.check_compatible(opt_tape);
  LayerStepGrid<std::optional<double>> sim(proto.layers(), proto.steps());
  for (std::size_t l = 0; l < proto.layers(); ++l) {
    for (std::size_t s = 0; s < proto.steps(); ++s) {
      try {
        sim.at(l, s) = cosine_sim(opt_tape.pooled_cell(l, s), proto.cell(l, s));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateVector) throw;
      }
    }
  }
  return SimilarityProfile::from_similarities(std::move(sim), k);
}

InterventionMask select_mask_with_threshold(const SimilarityProfile& profile, std::optional<double> tau) {
  InterventionMask mask;
  for (std::size_t l = 0; l < profile.layers(); ++l) {
    const auto& mean = profile.layer_means[l];
    if (!mean) continue;
    if (tau && !(*mean < *tau)) continue;
    bool any = false;
    for (std::size_t s = 0; s < profile.steps(); ++s) {
      const auto& c = profile.similarity.at(l, s);
      if (c && *c < *mean) {
        mask.cells.insert({static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(s)});
        any = true;
      }
    }
    // Under a threshold a layer is selected even if no step passes the filter;
    // the all-layers band only reports layers that contribute cells.
    if (tau || any) mask.selected_layers.insert(static_cast<std::uint16_t>(l));
  }
  return mask;
}

InterventionMask select_mask(const SimilarityProfile& profile) {
  return select_mask_with_threshold(profile, profile.tau);
}

std::string_view band_label(Band band) noexcept {
  switch (band) {
    case Band::MuMinusSigma: return "mu-sigma";
    case Band::Mu: return "mu";
    case Band::MuPlusSigma: return "mu+sigma";
    case Band::All: return "all";
  }
  return "?";
}

std::optional<double> band_k(Band band) noexcept {
  switch (band) {
    case Band::MuMinusSigma: return -1.0;
    case Band::Mu: return 0.0;
    case Band::MuPlusSigma: return 1.0;
    case Band::All: return std::nullopt;
  }
  return std::nullopt;
}

InterventionMask band_mask(const SimilarityProfile& profile, Band band) {
  const auto k = band_k(band);
  return select_mask_with_threshold(profile, k ? std::optional<double>(profile.threshold(*k)) : std::nullopt);
}

std::map<std::string, InterventionMask> ablation_masks(const SimilarityProfile& profile) {
  std::map<std::string, InterventionMask> out;
  for (Band b : kAblationBands) out.emplace(std::string(band_label(b)), band_mask(profile, b));
  return out;
}

void write_profile_csv(const SimilarityProfile& profile, std::ostream& out) {
  out << "layer,step,c,layer_mean,mu,sigma,tau\n";
  const std::string mu = format_number(profile.mu);
  const std::string sigma = format_number(profile.sigma);
  const std::string tau = format_number(profile.tau);
  for (std::size_t l = 0; l < profile.layers(); ++l) {
    const auto& mean = profile.layer_means[l];
    const std::string mean_text = mean ? format_number(*mean) : std::string();
    for (std::size_t s = 0; s < profile.steps(); ++s) {
      const auto& c = profile.similarity.at(l, s);
      out << (l + 1) << ',' << flow_step(s, profile.steps()) << ',' << (c ? format_number(*c) : std::string())
          << ',' << mean_text << ',' << mu << ',' << sigma << ',' << tau << '\n';
    }
  }
}

}  // namespace trus
