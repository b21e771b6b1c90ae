#include "trus/prototype.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

#include "trus/error.hpp"

namespace trus {
namespace {

void require_distinct(const std::vector<std::string>& ids, ErrorCode code) {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (!seen.insert(id).second) fail(code, "speaker \"" + id + "\" appears more than once");
  }
}

}  // namespace

IdPrototype::IdPrototype(LayerStepGrid<ChannelVector> cells, std::vector<std::string> source_ids)
    : cells_(std::move(cells)), source_ids_(std::move(source_ids)) {
  if (source_ids_.empty()) fail(ErrorCode::EmptyPool, "prototype needs at least one source speaker");
  if (cells_.size() == 0) fail(ErrorCode::ValidationError, "prototype grid is empty");
  require_distinct(source_ids_, ErrorCode::DuplicateSpeaker);
  channels_ = cells_.at(0, 0).size();
  for (const auto& c : cells_) {
    if (c.size() != channels_ || channels_ == 0) fail(ErrorCode::ShapeMismatch, "ragged prototype cells");
  }
}

void IdPrototype::check_compatible(const ActivationTape& tape) const {
  if (tape.layers() != layers() || tape.steps() != steps() || tape.channels() != channels()) {
    fail(ErrorCode::ShapeMismatch,
         "tape \"" + tape.speaker_id() + "\" is L=" + std::to_string(tape.layers()) + " T=" +
             std::to_string(tape.steps()) + " d=" + std::to_string(tape.channels()) +
             ", prototype is L=" + std::to_string(layers()) + " T=" + std::to_string(steps()) +
             " d=" + std::to_string(channels()));
  }
}

ActivationTape IdPrototype::to_tape() const {
  TapeHeader h;
  h.num_layers = static_cast<std::uint16_t>(layers());
  h.num_steps = static_cast<std::uint16_t>(steps());
  h.channels = static_cast<std::uint32_t>(channels());
  h.frames = 1;
  h.pooled = true;
  h.speaker_id = "prototype";
  ActivationTape tape(h);
  for (std::size_t l = 0; l < layers(); ++l) {
    for (std::size_t s = 0; s < steps(); ++s) tape.at(l, s) = FrameMatrix::from_vector(cell(l, s));
  }
  return tape;
}

IdPrototype build_prototype(std::span<const ActivationTape> tapes) {
  if (tapes.empty()) fail(ErrorCode::EmptyPool, "no retain tapes given");
  const ActivationTape& first = tapes.front();
  std::vector<std::string> ids;
  ids.reserve(tapes.size());
  for (const auto& t : tapes) {
    if (!t.same_grid(first)) {
      fail(ErrorCode::ShapeMismatch, "tape \"" + t.speaker_id() + "\" does not match the L, T, d of \"" +
                                         first.speaker_id() + "\"");
    }
    ids.push_back(t.speaker_id());
  }
  require_distinct(ids, ErrorCode::DuplicateSpeaker);

  const std::size_t d = first.channels();
  const double n = static_cast<double>(tapes.size());
  LayerStepGrid<ChannelVector> cells(first.layers(), first.steps());
  std::vector<double> acc(d);
  for (std::size_t l = 0; l < first.layers(); ++l) {
    for (std::size_t s = 0; s < first.steps(); ++s) {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (const auto& t : tapes) {
        const ChannelVector pooled = t.pooled_cell(l, s);
        for (std::size_t c = 0; c < d; ++c) acc[c] += pooled[c];
      }
      ChannelVector mean(d);
      for (std::size_t c = 0; c < d; ++c) mean[c] = static_cast<float>(acc[c] / n);
      cells.at(l, s) = std::move(mean);
    }
  }
  return IdPrototype(std::move(cells), std::move(ids));
}

std::filesystem::path prototype_sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

void save_prototype(const IdPrototype& proto, const std::filesystem::path& path) {
  write_tape_file(proto.to_tape(), path);
  nlohmann::json meta;
  meta["n"] = proto.pool_size();
  meta["source_ids"] = proto.source_ids();
  std::ofstream out(prototype_sidecar_path(path), std::ios::trunc);
  out << meta.dump(2) << '\n';
  if (!out) fail(ErrorCode::SinkFailure, "cannot write " + prototype_sidecar_path(path).string());
}

IdPrototype load_prototype(const std::filesystem::path& path) {
  const auto sidecar = prototype_sidecar_path(path);
  if (!std::filesystem::exists(sidecar)) {
    fail(ErrorCode::MissingMetadata, "prototype sidecar " + sidecar.string() + " not found");
  }
  const ActivationTape tape = read_tape_file(path);
  if (!tape.pooled()) fail(ErrorCode::ValidationError, path.string() + " is not a pooled tape");

  nlohmann::json meta;
  try {
    std::ifstream in(sidecar);
    meta = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ValidationError, "malformed prototype sidecar: " + std::string(e.what()));
  }
  if (!meta.contains("n") || !meta.contains("source_ids") || !meta["n"].is_number_unsigned() ||
      !meta["source_ids"].is_array()) {
    fail(ErrorCode::ValidationError, "prototype sidecar needs \"n\" and \"source_ids\"");
  }
  auto ids = meta["source_ids"].get<std::vector<std::string>>();
  if (meta["n"].get<std::size_t>() != ids.size()) {
    fail(ErrorCode::ValidationError, "sidecar n = " + std::to_string(meta["n"].get<std::size_t>()) +
                                         " but " + std::to_string(ids.size()) + " source ids listed");
  }
  require_distinct(ids, ErrorCode::ValidationError);

  LayerStepGrid<ChannelVector> cells(tape.layers(), tape.steps());
  for (std::size_t l = 0; l < tape.layers(); ++l) {
    for (std::size_t s = 0; s < tape.steps(); ++s) {
      const auto row = tape.at(l, s).row(0);
      cells.at(l, s) = ChannelVector(std::vector<float>(row.begin(), row.end()));
    }
  }
  return IdPrototype(std::move(cells), std::move(ids));
}

}  // namespace trus
