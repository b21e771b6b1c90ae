#include "trus/registry.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <json.hpp>

#include "trus/error.hpp"

namespace trus {
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kRecordFormat = 1;
constexpr const char* kIndexName = "index.json";
constexpr const char* kRecordsDir = "records";

std::int64_t now_ms() {
  using namespace std::chrono;
  return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex64(const std::string& s) {
  if (s.size() != 16) fail(ErrorCode::ValidationError, "bad digest \"" + s + "\"");
  return std::stoull(s, nullptr, 16);
}

fs::path with_suffix(fs::path p, const char* suffix) {
  p += suffix;
  return p;
}

std::string record_stem(const std::string& id, std::uint64_t version) {
  std::string safe;
  for (char c : id.substr(0, 48)) {
    const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '-' ||
                    c == '_';
    safe += ok ? c : '_';
  }
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : id) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return safe + "-" + hex64(h).substr(0, 8) + "-v" + std::to_string(version);
}

// Exclusive advisory lock held for the duration of one mutation.
class DirectoryLock {
 public:
  explicit DirectoryLock(const fs::path& dir) {
    const auto path = dir / ".lock";
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT, 0644);
    if (fd_ < 0) fail(ErrorCode::IoError, "cannot open lock file " + path.string());
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      fail(ErrorCode::IoError, "cannot lock " + path.string());
    }
  }
  ~DirectoryLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  DirectoryLock(const DirectoryLock&) = delete;
  DirectoryLock& operator=(const DirectoryLock&) = delete;

 private:
  int fd_ = -1;
};

json cells_to_json(const std::set<Cell>& cells, std::size_t steps) {
  json out = json::array();
  for (const Cell& c : cells) out.push_back({c.layer + 1, flow_step(c.step, steps)});
  return out;
}

std::set<Cell> cells_from_json(const json& j, std::size_t layers, std::size_t steps) {
  std::set<Cell> out;
  for (const auto& pair : j) {
    const int layer = pair.at(0).get<int>();
    const int t = pair.at(1).get<int>();
    if (layer < 1 || layer > static_cast<int>(layers) || t < 1 || t > static_cast<int>(steps)) {
      fail(ErrorCode::ValidationError, "mask cell out of range");
    }
    out.insert({static_cast<std::uint16_t>(layer - 1), static_cast<std::uint16_t>(steps - t)});
  }
  return out;
}

void write_text_file(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc);
  out << text;
  out.flush();
  if (!out) fail(ErrorCode::SinkFailure, "cannot write " + path.string());
}

}  // namespace

ChannelVector reference_fingerprint(const ActivationTape& tape) {
  return l2_normalize(tape.pooled_cell(tape.layers() - 1, tape.steps() - 1));
}

OptOutRecord make_optout_record(const std::string& speaker_id, const ActivationTape& reference,
                                const IdPrototype& proto, double k, double alpha) {
  reference.validate();
  SteeringGrid steering = compute_steering_grid(reference, proto, alpha);
  const SimilarityProfile profile = compute_profile(reference, proto, k);
  InterventionMask mask = select_mask(profile);
  std::erase_if(mask.cells, [&](const Cell& c) { return !steering.has(c); });
  return OptOutRecord{
      .speaker_id = speaker_id,
      .fingerprint = reference_fingerprint(reference),
      .steering = std::move(steering),
      .mask = std::move(mask),
      .profile = {profile.mu, profile.sigma, profile.tau, profile.k},
      .created_at_ms = now_ms(),
      .reference_digest = tape_digest(reference),
  };
}

ActivationHook make_steering_hook(const OptOutRecord& record, std::optional<double> alpha) {
  const double strength = alpha.value_or(record.steering.alpha());
  return [&record, strength](Cell cell, const FrameMatrix& x) -> std::optional<FrameMatrix> {
    if (strength == 0.0 || !record.mask.contains(cell) || !record.steering.has(cell)) return std::nullopt;
    return apply_steering(x, *record.steering.direction(cell), strength);
  };
}

// ---------------------------------------------------------------------------
// OptOutPool

OptOutPool::OptOutPool(double match_threshold) : threshold_(match_threshold) {}

OptOutRecord OptOutPool::register_optout(const std::string& speaker_id, const ActivationTape& reference,
                                         const IdPrototype& proto, double k, double alpha) {
  if (const auto* existing = find(speaker_id)) {
    if (existing->reference_digest == tape_digest(reference)) return *existing;
    fail(ErrorCode::DuplicateSpeaker, "\"" + speaker_id + "\" is already registered with a different reference");
  }
  proto.check_compatible(reference);
  OptOutRecord record = make_optout_record(speaker_id, reference, proto, k, alpha);
  insert(record);
  return record;
}

void OptOutPool::insert(OptOutRecord record) {
  const std::string id = record.speaker_id;
  if (!records_.emplace(id, std::move(record)).second) {
    fail(ErrorCode::DuplicateSpeaker, "\"" + id + "\" is already registered");
  }
  ++version_;
}

bool OptOutPool::remove_optout(const std::string& speaker_id) {
  if (records_.erase(speaker_id) == 0) return false;
  ++version_;
  return true;
}

const OptOutRecord* OptOutPool::find(const std::string& speaker_id) const {
  const auto it = records_.find(speaker_id);
  return it == records_.end() ? nullptr : &it->second;
}

std::optional<MatchResult> OptOutPool::best_match(const ActivationTape& reference) const {
  const ChannelVector probe = reference_fingerprint(reference);
  std::optional<MatchResult> best;
  for (const auto& [id, record] : records_) {
    if (record.fingerprint.size() != probe.size()) continue;
    const double sim = cosine_sim(probe, record.fingerprint);
    if (!best || sim > best->similarity) best = MatchResult{id, sim};
  }
  return best;
}

const OptOutRecord* OptOutPool::match_reference(const ActivationTape& reference) const {
  const auto best = best_match(reference);
  if (!best || best->similarity < threshold_) return nullptr;
  return find(best->speaker_id);
}

std::vector<std::string> OptOutPool::speaker_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : records_) ids.push_back(id);
  return ids;
}

// ---------------------------------------------------------------------------
// Record files

void write_record_files(const OptOutRecord& record, const fs::path& stem) {
  const auto& grid = record.steering;
  {
    std::ofstream out(with_suffix(stem, ".trec"), std::ios::binary | std::ios::trunc);
    if (!out) fail(ErrorCode::SinkFailure, "cannot create " + with_suffix(stem, ".trec").string());
    write_tape(grid.to_tape(record.speaker_id), out);

    TapeHeader fp;
    fp.num_layers = 1;
    fp.num_steps = 1;
    fp.channels = static_cast<std::uint32_t>(record.fingerprint.size());
    fp.frames = 1;
    fp.pooled = true;
    fp.speaker_id = record.speaker_id;
    ActivationTape fp_tape(fp);
    fp_tape.at(0, 0) = FrameMatrix::from_vector(record.fingerprint);
    write_tape(fp_tape, out);
    out.flush();
    if (!out) fail(ErrorCode::SinkFailure, "write to " + with_suffix(stem, ".trec").string() + " failed");
  }

  json meta;
  meta["format"] = kRecordFormat;
  meta["speaker_id"] = record.speaker_id;
  meta["alpha"] = grid.alpha();
  meta["presence"] = grid.presence_bitmap();
  meta["mask_cells"] = cells_to_json(record.mask.cells, grid.steps());
  std::vector<int> layers;
  for (auto l : record.mask.selected_layers) layers.push_back(l + 1);
  meta["selected_layers"] = layers;
  meta["profile"] = {{"mu", record.profile.mu},
                     {"sigma", record.profile.sigma},
                     {"tau", record.profile.tau},
                     {"k", record.profile.k}};
  meta["created_at_ms"] = record.created_at_ms;
  meta["reference_digest"] = hex64(record.reference_digest);
  write_text_file(with_suffix(stem, ".json"), meta.dump(2) + "\n");
}

OptOutRecord read_record_files(const fs::path& stem) {
  const auto bin = with_suffix(stem, ".trec");
  const auto side = with_suffix(stem, ".json");
  if (!fs::exists(side)) fail(ErrorCode::MissingMetadata, "record metadata " + side.string() + " not found");

  std::ifstream in(bin, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot open " + bin.string());
  const ActivationTape steer_tape = read_tape(in);
  const ActivationTape fp_tape = read_tape(in);
  if (fp_tape.layers() != 1 || fp_tape.steps() != 1 || !fp_tape.pooled()) {
    fail(ErrorCode::ValidationError, "record fingerprint block must be a 1x1 pooled tape");
  }

  try {
    std::ifstream sin(side);
    const json meta = json::parse(sin);
    if (meta.at("format").get<int>() != kRecordFormat) {
      fail(ErrorCode::VersionUnsupported, "record format " + meta.at("format").dump());
    }
    const auto row = fp_tape.at(0, 0).row(0);
    InterventionMask mask;
    mask.cells = cells_from_json(meta.at("mask_cells"), steer_tape.layers(), steer_tape.steps());
    for (int l : meta.at("selected_layers").get<std::vector<int>>()) {
      if (l < 1 || l > static_cast<int>(steer_tape.layers())) fail(ErrorCode::ValidationError, "bad layer");
      mask.selected_layers.insert(static_cast<std::uint16_t>(l - 1));
    }
    const auto& prof = meta.at("profile");
    OptOutRecord record{
        .speaker_id = meta.at("speaker_id").get<std::string>(),
        .fingerprint = ChannelVector(std::vector<float>(row.begin(), row.end())),
        .steering = SteeringGrid::from_tape(steer_tape, meta.at("presence").get<std::vector<std::string>>(),
                                            meta.at("alpha").get<double>()),
        .mask = std::move(mask),
        .profile = {prof.at("mu").get<double>(), prof.at("sigma").get<double>(), prof.at("tau").get<double>(),
                    prof.at("k").get<double>()},
        .created_at_ms = meta.at("created_at_ms").get<std::int64_t>(),
        .reference_digest = parse_hex64(meta.at("reference_digest").get<std::string>()),
    };
    for (const Cell& c : record.mask.cells) {
      if (!record.steering.has(c)) fail(ErrorCode::ValidationError, "mask cell without steering direction");
    }
    return record;
  } catch (const json::exception& e) {
    fail(ErrorCode::ValidationError, "malformed record metadata " + side.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Registry

Registry::Registry(fs::path dir, double match_threshold) : dir_(std::move(dir)), pool_(match_threshold) {
  fs::create_directories(dir_ / kRecordsDir);
  std::unique_lock lock(mutex_);
  load_unlocked();
}

void Registry::load_unlocked() {
  OptOutPool fresh(pool_.match_threshold());
  std::map<std::string, std::string> stems;
  const auto index_path = dir_ / kIndexName;
  if (fs::exists(index_path)) {
    json index;
    try {
      std::ifstream in(index_path);
      index = json::parse(in);
      fresh.version_ = index.at("version").get<std::uint64_t>();
      stems = index.at("records").get<std::map<std::string, std::string>>();
    } catch (const json::exception& e) {
      fail(ErrorCode::ValidationError, "malformed registry index: " + std::string(e.what()));
    }
    for (const auto& [id, stem] : stems) {
      OptOutRecord record = read_record_files(dir_ / kRecordsDir / stem);
      if (record.speaker_id != id) fail(ErrorCode::ValidationError, "index names " + id + " but record says " + record.speaker_id);
      fresh.records_.emplace(id, std::move(record));
    }
  }

  std::set<std::string> live;
  for (const auto& [_, stem] : stems) live.insert(stem);
  std::vector<fs::path> orphans;
  for (const auto& entry : fs::directory_iterator(dir_ / kRecordsDir)) {
    if (!live.count(entry.path().stem().string())) orphans.push_back(entry.path());
  }
  std::sort(orphans.begin(), orphans.end());

  pool_ = std::move(fresh);
  stems_ = std::move(stems);
  orphans_ = std::move(orphans);
}

void Registry::commit_unlocked(const std::map<std::string, std::string>& stems, std::uint64_t version) {
  json index;
  index["format"] = kRecordFormat;
  index["version"] = version;
  index["records"] = stems;
  const auto tmp = dir_ / "index.json.tmp";
  write_text_file(tmp, index.dump(2) + "\n");
  fs::rename(tmp, dir_ / kIndexName);
}

OptOutRecord Registry::register_optout(const std::string& speaker_id, const ActivationTape& reference,
                                       const IdPrototype& proto, double k, double alpha) {
  std::unique_lock lock(mutex_);
  DirectoryLock dir_lock(dir_);
  load_unlocked();

  if (const auto* existing = pool_.find(speaker_id)) {
    if (existing->reference_digest == tape_digest(reference)) return *existing;
    fail(ErrorCode::DuplicateSpeaker, "\"" + speaker_id + "\" is already registered with a different reference");
  }
  proto.check_compatible(reference);
  OptOutRecord record = make_optout_record(speaker_id, reference, proto, k, alpha);

  const std::uint64_t next = pool_.version() + 1;
  const std::string stem = record_stem(speaker_id, next);
  write_record_files(record, dir_ / kRecordsDir / stem);
  auto stems = stems_;
  stems[speaker_id] = stem;
  commit_unlocked(stems, next);

  pool_.records_.emplace(speaker_id, record);
  pool_.version_ = next;
  stems_ = std::move(stems);
  return record;
}

bool Registry::remove_optout(const std::string& speaker_id) {
  std::unique_lock lock(mutex_);
  DirectoryLock dir_lock(dir_);
  load_unlocked();

  const auto it = stems_.find(speaker_id);
  if (it == stems_.end()) return false;
  const std::string old_stem = it->second;
  auto stems = stems_;
  stems.erase(speaker_id);
  const std::uint64_t next = pool_.version() + 1;
  commit_unlocked(stems, next);

  pool_.records_.erase(speaker_id);
  pool_.version_ = next;
  stems_ = std::move(stems);
  std::error_code ec;
  fs::remove(dir_ / kRecordsDir / (old_stem + ".trec"), ec);
  fs::remove(dir_ / kRecordsDir / (old_stem + ".json"), ec);
  return true;
}

std::optional<OptOutRecord> Registry::lookup(const std::string& speaker_id) const {
  std::shared_lock lock(mutex_);
  if (const auto* r = pool_.find(speaker_id)) return *r;
  return std::nullopt;
}

std::optional<OptOutRecord> Registry::match_reference(const ActivationTape& reference) const {
  std::shared_lock lock(mutex_);
  if (const auto* r = pool_.match_reference(reference)) return *r;
  return std::nullopt;
}

std::optional<MatchResult> Registry::best_match(const ActivationTape& reference) const {
  std::shared_lock lock(mutex_);
  return pool_.best_match(reference);
}

void Registry::reload() {
  std::unique_lock lock(mutex_);
  load_unlocked();
}

std::uint64_t Registry::version() const {
  std::shared_lock lock(mutex_);
  return pool_.version();
}

std::size_t Registry::size() const {
  std::shared_lock lock(mutex_);
  return pool_.size();
}

std::vector<std::string> Registry::speaker_ids() const {
  std::shared_lock lock(mutex_);
  return pool_.speaker_ids();
}

std::vector<fs::path> Registry::orphans() const {
  std::shared_lock lock(mutex_);
  return orphans_;
}

}  // namespace trus
