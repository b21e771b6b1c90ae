#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "trus/prototype.hpp"
#include "trus/selection.hpp"
#include "trus/steering.hpp"
#include "trus/tape.hpp"

namespace trus {

inline constexpr double kDefaultMatchThreshold = 0.85;

struct ProfileSummary {
  double mu = 0.0;
  double sigma = 0.0;
  double tau = 0.0;
  double k = kDefaultK;

  friend bool operator==(const ProfileSummary&, const ProfileSummary&) = default;
};

/// Everything needed to steer one opt-out speaker at serving time; the
/// reference tape is not needed again once the record exists.
struct OptOutRecord {
  std::string speaker_id;
  ChannelVector fingerprint;
  SteeringGrid steering;
  InterventionMask mask;
  ProfileSummary profile;
  std::int64_t created_at_ms = 0;
  std::uint64_t reference_digest = 0;

  friend bool operator==(const OptOutRecord&, const OptOutRecord&) = default;
};

/// Unit-normalized pooled activation at the last layer and last flow step.
ChannelVector reference_fingerprint(const ActivationTape& tape);

/// Profile, mask, steering grid and fingerprint for one opt-out reference.
/// The mask only keeps cells that have a steering direction.
OptOutRecord make_optout_record(const std::string& speaker_id, const ActivationTape& reference,
                                const IdPrototype& proto, double k = kDefaultK, double alpha = kDefaultAlpha);

/// Hook that steers exactly the record's masked cells. `alpha` overrides the
/// record's strength (0 makes the hook a no-op).
ActivationHook make_steering_hook(const OptOutRecord& record, std::optional<double> alpha = std::nullopt);

struct MatchResult {
  std::string speaker_id;
  double similarity = 0.0;
};

/// In-memory opt-out pool with set semantics and a version counter that
/// increases on every mutation.
class OptOutPool {
 public:
  explicit OptOutPool(double match_threshold = kDefaultMatchThreshold);

  /// Registers `speaker_id`. Re-registering the same id with an identical
  /// reference tape returns the stored record unchanged; a different tape
  /// throws DuplicateSpeaker.
  OptOutRecord register_optout(const std::string& speaker_id, const ActivationTape& reference,
                               const IdPrototype& proto, double k = kDefaultK, double alpha = kDefaultAlpha);
  /// Inserts a prebuilt record (DuplicateSpeaker if the id exists).
  void insert(OptOutRecord record);
  bool remove_optout(const std::string& speaker_id);

  const OptOutRecord* find(const std::string& speaker_id) const;
  /// Best fingerprint match at or above the threshold.
  const OptOutRecord* match_reference(const ActivationTape& reference) const;
  /// Best fingerprint match regardless of the threshold.
  std::optional<MatchResult> best_match(const ActivationTape& reference) const;

  std::size_t size() const noexcept { return records_.size(); }
  std::uint64_t version() const noexcept { return version_; }
  double match_threshold() const noexcept { return threshold_; }
  std::vector<std::string> speaker_ids() const;
  const std::map<std::string, OptOutRecord>& records() const noexcept { return records_; }

 private:
  friend class Registry;

  std::map<std::string, OptOutRecord> records_;
  std::uint64_t version_ = 0;
  double threshold_;
};

/// Directory-backed opt-out registry.
///
/// Layout: `index.json` ({"format", "version", "records": {id: stem}}) plus
/// `records/<stem>.trec` (steering tape followed by a 1x1 fingerprint tape)
/// and `records/<stem>.json` (strength, presence bitmap, mask, profile). A
/// mutation writes new record files first and then atomically replaces the
/// index, which is the commit point. Record files the index does not name are
/// orphans from an interrupted mutation; they are ignored and reported.
///
/// Mutations are serialized with an exclusive lock on `<dir>/.lock` and
/// re-read the index under that lock; lookups use the last loaded version.
class Registry {
 public:
  explicit Registry(std::filesystem::path dir, double match_threshold = kDefaultMatchThreshold);

  Registry(const Registry&) = delete;
  Registry& operator=(const Registry&) = delete;

  OptOutRecord register_optout(const std::string& speaker_id, const ActivationTape& reference,
                               const IdPrototype& proto, double k = kDefaultK, double alpha = kDefaultAlpha);
  bool remove_optout(const std::string& speaker_id);

  std::optional<OptOutRecord> lookup(const std::string& speaker_id) const;
  std::optional<OptOutRecord> match_reference(const ActivationTape& reference) const;
  std::optional<MatchResult> best_match(const ActivationTape& reference) const;

  /// Re-reads the committed index and records from disk.
  void reload();

  std::uint64_t version() const;
  std::size_t size() const;
  std::vector<std::string> speaker_ids() const;
  std::vector<std::filesystem::path> orphans() const;
  const std::filesystem::path& directory() const noexcept { return dir_; }

 private:
  void load_unlocked();
  void commit_unlocked(const std::map<std::string, std::string>& stems, std::uint64_t version);

  std::filesystem::path dir_;
  mutable std::shared_mutex mutex_;
  OptOutPool pool_;
  std::map<std::string, std::string> stems_;
  std::vector<std::filesystem::path> orphans_;
};

/// Record file pair under `stem` (no extension).
void write_record_files(const OptOutRecord& record, const std::filesystem::path& stem);
OptOutRecord read_record_files(const std::filesystem::path& stem);

}  // namespace trus
