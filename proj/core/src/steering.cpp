#include "trus/steering.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "trus/error.hpp"

namespace trus {
namespace {

void check_strength(double alpha) {
  if (!std::isfinite(alpha) || alpha <= 0.0) {
    fail(ErrorCode::InvalidStrength, "steering strength must be > 0, got " + std::to_string(alpha));
  }
}

void check_direction(const ChannelVector& s, std::size_t channels) {
  if (s.size() != channels) {
    fail(ErrorCode::ShapeMismatch, "direction has " + std::to_string(s.size()) + " channels, expected " +
                                       std::to_string(channels));
  }
  const double norm = l2_norm(s.span());
  if (std::abs(norm - 1.0) > kUnitTolerance) {
    fail(ErrorCode::NonUnitDirection, "steering direction has norm " + std::to_string(norm));
  }
}

}  // namespace

ChannelVector compute_steering_vector(const ChannelVector& opt, const ChannelVector& prototype) {
  if (opt.size() != prototype.size()) {
    fail(ErrorCode::ShapeMismatch, "opt-out and prototype cells differ in length");
  }
  std::vector<double> diff(opt.size());
  double sq = 0.0;
  for (std::size_t i = 0; i < opt.size(); ++i) {
    diff[i] = static_cast<double>(opt[i]) - prototype[i];
    sq += diff[i] * diff[i];
  }
  if (sq < kDegenerateEpsilon) {
    fail(ErrorCode::DegenerateDirection, "opt-out activation coincides with the prototype");
  }
  const double inv = 1.0 / std::sqrt(sq);
  ChannelVector out(opt.size());
  for (std::size_t i = 0; i < opt.size(); ++i) out[i] = static_cast<float>(diff[i] * inv);
  return out;
}

void apply_steering_in_place(FrameMatrix& x, const ChannelVector& direction, double alpha) {
  check_direction(direction, x.channels());
  if (alpha == 0.0) return;
  for (std::size_t f = 0; f < x.frames(); ++f) {
    subtract_scaled_projection(x.row(f), direction.span(), alpha);
  }
}

FrameMatrix apply_steering(const FrameMatrix& x, const ChannelVector& direction, double alpha) {
  FrameMatrix out = x;
  apply_steering_in_place(out, direction, alpha);
  return out;
}

SteeringGrid::SteeringGrid(LayerStepGrid<Direction> directions, std::size_t channels, double alpha)
    : directions_(std::move(directions)), channels_(channels), alpha_(alpha) {
  check_strength(alpha_);
  for (const auto& d : directions_) {
    if (d) check_direction(*d, channels_);
  }
}

std::vector<Cell> SteeringGrid::present_cells() const {
  std::vector<Cell> out;
  for (std::size_t l = 0; l < layers(); ++l) {
    for (std::size_t s = 0; s < steps(); ++s) {
      if (directions_.at(l, s)) out.push_back({static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(s)});
    }
  }
  return out;
}

SteeringDiagnostics SteeringGrid::diagnostics() const {
  SteeringDiagnostics d;
  for (const auto& dir : directions_) (dir ? d.present : d.degenerate) += 1;
  return d;
}

FrameMatrix SteeringGrid::apply(Cell c, const FrameMatrix& x, std::optional<double> alpha) const {
  const Direction& dir = directions_.at(c);
  if (!dir) return x;
  return apply_steering(x, *dir, alpha.value_or(alpha_));
}

ActivationTape SteeringGrid::to_tape(const std::string& speaker_id) const {
  TapeHeader h;
  h.num_layers = static_cast<std::uint16_t>(layers());
  h.num_steps = static_cast<std::uint16_t>(steps());
  h.channels = static_cast<std::uint32_t>(channels_);
  h.frames = 1;
  h.pooled = true;
  h.speaker_id = speaker_id;
  ActivationTape tape(h);
  for (std::size_t l = 0; l < layers(); ++l) {
    for (std::size_t s = 0; s < steps(); ++s) {
      if (const auto& d = directions_.at(l, s)) tape.at(l, s) = FrameMatrix::from_vector(*d);
    }
  }
  return tape;
}

std::vector<std::string> SteeringGrid::presence_bitmap() const {
  std::vector<std::string> rows(layers(), std::string(steps(), '0'));
  for (std::size_t l = 0; l < layers(); ++l) {
    for (std::size_t s = 0; s < steps(); ++s) {
      if (directions_.at(l, s)) rows[l][s] = '1';
    }
  }
  return rows;
}

SteeringGrid SteeringGrid::from_tape(const ActivationTape& tape, const std::vector<std::string>& presence,
                                     double alpha) {
  if (!tape.pooled()) fail(ErrorCode::ValidationError, "steering tape must be pooled");
  if (presence.size() != tape.layers()) {
    fail(ErrorCode::ValidationError, "presence bitmap has " + std::to_string(presence.size()) +
                                         " rows for " + std::to_string(tape.layers()) + " layers");
  }
  LayerStepGrid<Direction> dirs(tape.layers(), tape.steps());
  for (std::size_t l = 0; l < tape.layers(); ++l) {
    if (presence[l].size() != tape.steps()) fail(ErrorCode::ValidationError, "presence row length mismatch");
    for (std::size_t s = 0; s < tape.steps(); ++s) {
      const char bit = presence[l][s];
      if (bit != '0' && bit != '1') fail(ErrorCode::ValidationError, "presence bitmap must be '0'/'1'");
      if (bit == '1') {
        const auto row = tape.at(l, s).row(0);
        dirs.at(l, s) = ChannelVector(std::vector<float>(row.begin(), row.end()));
      }
    }
  }
  return SteeringGrid(std::move(dirs), tape.channels(), alpha);
}

SteeringGrid compute_steering_grid(const ActivationTape& opt_tape, const IdPrototype& proto, double alpha) {
  check_strength(alpha);
  proto.check_compatible(opt_tape);
  LayerStepGrid<SteeringGrid::Direction> dirs(proto.layers(), proto.steps());
  for (std::size_t l = 0; l < proto.layers(); ++l) {
    for (std::size_t s = 0; s < proto.steps(); ++s) {
      try {
        dirs.at(l, s) = compute_steering_vector(opt_tape.pooled_cell(l, s), proto.cell(l, s));
      } catch (const Error& e) {
        if (e.code() != ErrorCode::DegenerateDirection) throw;
      }
    }
  }
  return SteeringGrid(std::move(dirs), proto.channels(), alpha);
}

void save_steering(const SteeringGrid& grid, const std::filesystem::path& path, const std::string& speaker_id) {
  write_tape_file(grid.to_tape(speaker_id), path);
  nlohmann::json meta;
  meta["alpha"] = grid.alpha();
  meta["presence"] = grid.presence_bitmap();
  auto sidecar = path;
  sidecar += ".json";
  std::ofstream out(sidecar, std::ios::trunc);
  out << meta.dump(2) << '\n';
  if (!out) fail(ErrorCode::SinkFailure, "cannot write " + sidecar.string());
}

SteeringGrid load_steering(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar += ".json";
  if (!std::filesystem::exists(sidecar)) {
    fail(ErrorCode::MissingMetadata, "steering sidecar " + sidecar.string() + " not found");
  }
  const ActivationTape tape = read_tape_file(path);
  try {
    std::ifstream in(sidecar);
    const auto meta = nlohmann::json::parse(in);
    return SteeringGrid::from_tape(tape, meta.at("presence").get<std::vector<std::string>>(),
                                   meta.at("alpha").get<double>());
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::ValidationError, "malformed steering sidecar: " + std::string(e.what()));
  }
}

}  // namespace trus
