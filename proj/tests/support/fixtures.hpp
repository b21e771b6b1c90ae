#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "trus/error.hpp"
#include "trus/tape.hpp"
#include "trus/tensor.hpp"

namespace fixture {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double uniform(double lo = -1.0, double hi = 1.0) { return std::uniform_real_distribution<double>(lo, hi)(engine_); }
  std::size_t index(std::size_t lo, std::size_t hi) {
    return std::uniform_int_distribution<std::size_t>(lo, hi)(engine_);
  }
  bool coin(double p = 0.5) { return std::bernoulli_distribution(p)(engine_); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

inline trus::ChannelVector random_vector(Rng& rng, std::size_t d, double scale = 1.0) {
  trus::ChannelVector v(d);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-scale, scale));
  return v;
}

inline trus::ChannelVector random_unit(Rng& rng, std::size_t d) {
  return trus::l2_normalize(random_vector(rng, d));
}

inline trus::FrameMatrix random_matrix(Rng& rng, std::size_t frames, std::size_t channels, double scale = 1.0) {
  trus::FrameMatrix m(frames, channels);
  for (auto& x : m.data()) x = static_cast<float>(rng.uniform(-scale, scale));
  return m;
}

inline trus::ActivationTape random_tape(Rng& rng, std::uint16_t layers, std::uint16_t steps, std::uint32_t channels,
                                        std::uint32_t frames, std::string id, bool pooled = false) {
  trus::TapeHeader h;
  h.num_layers = layers;
  h.num_steps = steps;
  h.channels = channels;
  h.frames = pooled ? 1 : frames;
  h.pooled = pooled;
  h.speaker_id = std::move(id);
  trus::ActivationTape tape(h);
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t s = 0; s < steps; ++s) tape.at(l, s) = random_matrix(rng, h.frames, channels);
  }
  return tape;
}

inline std::vector<trus::ActivationTape> random_pool(Rng& rng, std::size_t n, std::uint16_t layers,
                                                     std::uint16_t steps, std::uint32_t channels,
                                                     std::uint32_t frames) {
  std::vector<trus::ActivationTape> out;
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(random_tape(rng, layers, steps, channels, frames, "retain-" + std::to_string(i)));
  }
  return out;
}

/// Code of the trus::Error `fn` throws, or nullopt when it returns.
template <typename Fn>
std::optional<trus::ErrorCode> thrown(Fn&& fn) {
  try {
    fn();
  } catch (const trus::Error& e) {
    return e.code();
  }
  return std::nullopt;
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir() {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("trus-test-" + std::to_string(rd()) + "-" + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
