#include "trus/toy_model.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "trus/error.hpp"

namespace trus {
namespace {

constexpr double kTanhRescale = 0.76;
constexpr double kMinGain = 0.4;
constexpr std::uint64_t kIdentityStream = 0x1D3A7177ull;
constexpr std::uint64_t kWeightStream = 0x3E1647ull;

// mt19937_64's output sequence is fixed by the standard; distributions are
// not, so uniforms are built from raw bits to stay reproducible everywhere.
class UniformStream {
 public:
  explicit UniformStream(std::uint64_t seed) : engine_(seed) {}

  double unit() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double symmetric() { return 2.0 * unit() - 1.0; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace

void ToyConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::ConfigError, what); };
  if (layers < 1 || steps < 1 || channels < 1 || frames < 1) bad("toy model dimensions must be >= 1");
  if (!identity_gain.empty()) {
    if (identity_gain.size() != layers) bad("identity_gain needs one entry per layer");
    for (double g : identity_gain) {
      if (!(g >= 0.0 && g <= 1.0)) bad("identity gains must lie in [0, 1]");
    }
  }
  if (!(mixing_scale > 0.0) || !std::isfinite(mixing_scale)) bad("mixing_scale must be positive");
  if (!(mixing_noise >= 0.0) || !std::isfinite(mixing_noise)) bad("mixing_noise must be non-negative");
}

std::uint64_t fnv1a64(std::string_view text) noexcept {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

ToySpeaker ToySpeaker::from_seed(std::string id, std::uint64_t seed, std::size_t channels) {
  UniformStream rng(seed ^ kIdentityStream);
  ChannelVector raw(channels);
  for (auto& v : raw) v = static_cast<float>(rng.symmetric());
  return ToySpeaker{std::move(id), l2_normalize(raw), seed};
}

ToySpeaker ToySpeaker::from_id(std::string id, std::size_t channels) {
  const auto seed = fnv1a64(id);
  return from_seed(std::move(id), seed, channels);
}

ToyModel::ToyModel(ToyConfig config) : config_(std::move(config)) {
  config_.validate();
  const std::size_t d = config_.channels;
  UniformStream rng(config_.weight_seed ^ kWeightStream);

  mixing_.assign(config_.layers, std::vector<float>(d * d));
  std::vector<double> row(d);
  for (auto& w : mixing_) {
    for (std::size_t i = 0; i < d; ++i) {
      double sq = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        row[j] = (i == j ? 1.0 : 0.0) + config_.mixing_noise * rng.symmetric();
        sq += row[j] * row[j];
      }
      const double scale = config_.mixing_scale / std::sqrt(sq);
      for (std::size_t j = 0; j < d; ++j) w[j * d + i] = static_cast<float>(row[j] * scale);
    }
  }

  if (config_.identity_gain.empty()) {
    gain_.resize(config_.layers);
    for (auto& g : gain_) g = kMinGain + (1.0 - kMinGain) * rng.unit();
  } else {
    gain_ = config_.identity_gain;
  }
}

SynthesisOutput ToyModel::synthesize(const ToySpeaker& speaker, std::uint64_t text_seed,
                                     const ActivationHook& hook) const {
  const std::size_t L = config_.layers;
  const std::size_t T = config_.steps;
  const std::size_t d = config_.channels;
  const std::size_t F = config_.frames;
  if (speaker.identity.size() != d) {
    fail(ErrorCode::ShapeMismatch, "speaker identity has " + std::to_string(speaker.identity.size()) +
                                       " channels, model has " + std::to_string(d));
  }

  UniformStream rng(config_.content_seed ^ text_seed);
  FrameMatrix content(F, d);
  FrameMatrix noise(F, d);
  for (float& v : content.data()) v = static_cast<float>(rng.symmetric());
  for (float& v : noise.data()) v = static_cast<float>(rng.symmetric());

  TapeHeader header;
  header.num_layers = config_.layers;
  header.num_steps = config_.steps;
  header.channels = config_.channels;
  header.frames = config_.frames;
  header.speaker_id = speaker.id;

  SynthesisOutput out;
  out.tape = ActivationTape(header);

  FrameMatrix state = noise;
  FrameMatrix drive(F, d);
  FrameMatrix h(F, d);
  FrameMatrix next(F, d);
  std::vector<double> velocity(F * d);
  std::vector<double> pre(d);

  for (std::size_t s = 0; s < T; ++s) {
    const double sigma = static_cast<double>(flow_step(s, T)) / static_cast<double>(T);
    for (std::size_t i = 0; i < F * d; ++i) {
      drive.data()[i] = static_cast<float>((1.0 - sigma) * content.data()[i] + sigma * noise.data()[i]);
    }
    std::fill(velocity.begin(), velocity.end(), 0.0);
    h = state;

    for (std::size_t l = 0; l < L; ++l) {
      const float* w = mixing_[l].data();
      const double gain = gain_[l];
      for (std::size_t f = 0; f < F; ++f) {
        const auto in = h.row(f);
        const auto cond = drive.row(f);
        auto dst = next.row(f);
        for (std::size_t i = 0; i < d; ++i) pre[i] = cond[i];
        for (std::size_t j = 0; j < d; ++j) {
          const double xj = in[j];
          const float* wj = w + j * d;
          for (std::size_t i = 0; i < d; ++i) pre[i] += static_cast<double>(wj[i]) * xj;
        }
        for (std::size_t i = 0; i < d; ++i) {
          dst[i] = static_cast<float>(std::tanh(pre[i]) / kTanhRescale + gain * speaker.identity[i]);
        }
      }
      std::swap(h, next);

      const Cell cell{static_cast<std::uint16_t>(l), static_cast<std::uint16_t>(s)};
      if (hook) {
        if (auto replaced = hook(cell, h)) {
          if (replaced->frames() != F || replaced->channels() != d) {
            fail(ErrorCode::ShapeMismatch, "hook returned a " + std::to_string(replaced->frames()) + "x" +
                                               std::to_string(replaced->channels()) + " matrix");
          }
          h = std::move(*replaced);
          out.steered_cells_applied.insert(cell);
        }
      }
      out.tape.at(cell) = h;
      for (std::size_t i = 0; i < F * d; ++i) velocity[i] += h.data()[i];
    }

    const double inv_layers = 1.0 / static_cast<double>(L);
    const double dt = 1.0 / static_cast<double>(T);
    for (std::size_t i = 0; i < F * d; ++i) {
      const double x = state.data()[i];
      state.data()[i] = static_cast<float>(x + dt * (velocity[i] * inv_layers - x));
    }
  }

  out.output_frames = std::move(state);
  out.output_embedding = pool_frames(out.output_frames);
  return out;
}

ActivationTape ToyModel::reference_tape(const ToySpeaker& speaker) const {
  return synthesize(speaker, kCalibrationTextSeed).tape;
}

SynthesisOutput synthesize(const ToyConfig& config, const ToySpeaker& speaker, std::uint64_t text_seed,
                           const ActivationHook& hook) {
  return ToyModel(config).synthesize(speaker, text_seed, hook);
}

double identity_similarity(const SynthesisOutput& out, const ToySpeaker& speaker) {
  return cosine_sim(out.output_embedding, speaker.identity);
}

double content_error(const SynthesisOutput& a, const SynthesisOutput& b, const ToySpeaker& speaker) {
  const FrameMatrix& fa = a.output_frames;
  const FrameMatrix& fb = b.output_frames;
  if (fa.frames() != fb.frames() || fa.channels() != fb.channels() || fa.channels() != speaker.identity.size()) {
    fail(ErrorCode::ShapeMismatch, "content_error needs outputs of the same shape as the identity");
  }
  const auto id = speaker.identity.span();
  double diff_sq = 0.0;
  double ref_sq = 0.0;
  for (std::size_t f = 0; f < fa.frames(); ++f) {
    const auto ra = fa.row(f);
    const auto rb = fb.row(f);
    const double pa = dot(ra, id);
    const double pb = dot(rb, id);
    for (std::size_t i = 0; i < ra.size(); ++i) {
      const double oa = ra[i] - pa * id[i];
      const double ob = rb[i] - pb * id[i];
      diff_sq += (oa - ob) * (oa - ob);
      ref_sq += oa * oa;
    }
  }
  if (diff_sq == 0.0) return 0.0;
  if (ref_sq == 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(diff_sq / ref_sq);
}

}  // namespace trus
