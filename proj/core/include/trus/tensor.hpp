#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <vector>

namespace trus {

/// Squared-norm threshold below which a vector has no usable direction.
inline constexpr double kDegenerateEpsilon = 1e-12;

/// One pooled activation: d channels of 32-bit floats.
class ChannelVector {
 public:
  ChannelVector() = default;
  explicit ChannelVector(std::size_t channels) : values_(channels, 0.0f) {}
  explicit ChannelVector(std::vector<float> values) : values_(std::move(values)) {}
  ChannelVector(std::initializer_list<float> values) : values_(values) {}

  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  float& operator[](std::size_t i) { return values_[i]; }
  float operator[](std::size_t i) const { return values_[i]; }

  std::span<float> span() noexcept { return values_; }
  std::span<const float> span() const noexcept { return values_; }
  const std::vector<float>& values() const noexcept { return values_; }

  auto begin() noexcept { return values_.begin(); }
  auto end() noexcept { return values_.end(); }
  auto begin() const noexcept { return values_.begin(); }
  auto end() const noexcept { return values_.end(); }

  friend bool operator==(const ChannelVector&, const ChannelVector&) = default;

 private:
  std::vector<float> values_;
};

/// Activations of one utterance at one (layer, step): F frames by d channels,
/// row-major.
class FrameMatrix {
 public:
  FrameMatrix() = default;
  FrameMatrix(std::size_t frames, std::size_t channels)
      : frames_(frames), channels_(channels), values_(frames * channels, 0.0f) {}
  FrameMatrix(std::size_t frames, std::size_t channels, std::vector<float> values);
  FrameMatrix(std::initializer_list<std::initializer_list<float>> rows);

  /// A single-frame matrix holding `v`.
  static FrameMatrix from_vector(const ChannelVector& v);

  std::size_t frames() const noexcept { return frames_; }
  std::size_t channels() const noexcept { return channels_; }

  std::span<float> row(std::size_t f) noexcept { return {values_.data() + f * channels_, channels_}; }
  std::span<const float> row(std::size_t f) const noexcept {
    return {values_.data() + f * channels_, channels_};
  }

  float& at(std::size_t f, std::size_t c) { return values_[f * channels_ + c]; }
  float at(std::size_t f, std::size_t c) const { return values_[f * channels_ + c]; }

  std::span<float> data() noexcept { return values_; }
  std::span<const float> data() const noexcept { return values_; }

  friend bool operator==(const FrameMatrix&, const FrameMatrix&) = default;

 private:
  std::size_t frames_ = 0;
  std::size_t channels_ = 0;
  std::vector<float> values_;
};

double dot(std::span<const float> a, std::span<const float> b);
double squared_norm(std::span<const float> v);
double l2_norm(std::span<const float> v);
bool all_finite(std::span<const float> v) noexcept;

/// a.b / (|a| |b|), clamped to [-1, 1]. Identical inputs give exactly 1.
double cosine_sim(std::span<const float> a, std::span<const float> b);
double cosine_sim(const ChannelVector& a, const ChannelVector& b);

/// Column-wise mean over frames.
ChannelVector pool_frames(const FrameMatrix& m);

ChannelVector l2_normalize(const ChannelVector& v);

/// row <- row - alpha * (row . direction) * direction
void subtract_scaled_projection(std::span<float> row, std::span<const float> direction, double alpha);

}  // namespace trus
