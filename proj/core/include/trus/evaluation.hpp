#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "trus/selection.hpp"
#include "trus/steering.hpp"
#include "trus/toy_model.hpp"

namespace trus {

inline constexpr std::string_view kRetain = "retain";
inline constexpr std::string_view kSeenOptOut = "seen-optout";
inline constexpr std::string_view kUnseenOptOut = "unseen-optout";

/// Everything a suite run depends on. The seed manifest stored with a report
/// is this struct plus the suite name, so a report can be regenerated from it.
struct EvalConfig {
  ToyConfig model;
  std::uint64_t seed = 1;
  /// Speaker populations are named by prefix; the same prefix twice means
  /// the same speakers, which is rejected as an overlap.
  std::string training_prefix = "train";
  std::string unseen_prefix = "fresh";
  std::size_t n_retain = kDefaultPoolSize;
  std::size_t n_optout_seen = 10;
  std::size_t n_optout_unseen = 10;
  std::size_t text_seeds_per_speaker = 2;
  double k = kDefaultK;
  double alpha = kDefaultAlpha;
  std::vector<std::size_t> pool_sizes = {10, 30, 50};
  std::size_t resamples = 20;
  std::size_t resample_population = 200;
  /// Worker threads for independent syntheses; 0 means hardware concurrency.
  unsigned threads = 0;

  /// Throws ConfigError.
  void validate() const;
};

/// One CSV row: condition, speaker_id, metric, value, k, N, alpha, seed.
/// `band` is the k column ("all" for the all-layers band); `seed` is the
/// text seed of a run, the speaker seed for per-speaker rows, or the
/// resampling seed for prototype variance rows.
struct EvalRow {
  std::string condition;
  std::string speaker_id;
  std::string metric;
  double value = 0.0;
  std::string band;
  std::size_t n = 0;
  double alpha = 0.0;
  std::uint64_t seed = 0;

  friend bool operator==(const EvalRow&, const EvalRow&) = default;
};

/// Per-condition aggregate for one (band, N) block.
struct ConditionSummary {
  std::string condition;
  std::string band;
  std::size_t n = 0;
  double alpha = 0.0;
  std::size_t speakers = 0;
  std::size_t runs = 0;
  double mean_similarity_baseline = 0.0;
  double mean_similarity_steered = 0.0;
  double mean_content_error = 0.0;
  double mean_cells_steered = 0.0;
  double mean_layers_selected = 0.0;
  std::size_t speakers_with_mask = 0;
  /// Every run's output matched its unsteered twin bit for bit.
  bool bit_identical = false;

  /// (baseline - steered) / baseline.
  double relative_similarity_drop() const noexcept;

  friend bool operator==(const ConditionSummary&, const ConditionSummary&) = default;
};

struct EvalReport {
  std::string suite;
  std::vector<EvalRow> rows;
  std::vector<ConditionSummary> summaries;
  /// Mean per-value prototype variance across resamples, keyed by N.
  std::map<std::size_t, double> prototype_variance;
  std::string manifest_json;

  /// Summary for `condition` in the block (band, n); throws ValidationError
  /// when absent.
  const ConditionSummary& summary(std::string_view condition, std::string_view band, std::size_t n) const;
  /// Distinct (band, n) blocks in report order.
  std::vector<std::pair<std::string, std::size_t>> blocks() const;

  friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Text of the k column for a numeric k.
std::string band_name(double k);

/// Baseline vs steered paired runs for retain, seen opt-out and unseen
/// opt-out speakers. The prototype uses the first n_retain training
/// speakers; seen opt-outs are later training speakers and unseen opt-outs
/// come from a separate seed stream.
EvalReport run_suppression_suite(const EvalConfig& config);
EvalReport run_suppression_suite(const ToyConfig& model, std::size_t n_retain, std::size_t n_optout_seen,
                                 std::size_t n_optout_unseen, double k, double alpha);

/// One suppression block per band (mu-sigma, mu, mu+sigma, all) on shared
/// speakers, prototype and text seeds.
EvalReport run_threshold_ablation(const EvalConfig& config);

/// One suppression block per pool size with the same opt-out speakers, plus
/// prototype variance under retain-speaker resampling for each N.
EvalReport run_pool_ablation(const EvalConfig& config);

/// Mean over cells and channels of the across-resample variance of the
/// prototype, for `resamples` random N-subsets of a fixed retain population.
double prototype_resampling_variance(const EvalConfig& config, std::size_t n);

/// Suite name plus config as JSON.
std::string make_manifest(std::string_view suite, const EvalConfig& config);
/// Re-runs the suite described by a manifest.
EvalReport replay_manifest(std::string_view manifest_json);

void write_report_csv(const EvalReport& report, std::ostream& out);
void write_summary_csv(const EvalReport& report, std::ostream& out);

}  // namespace trus
