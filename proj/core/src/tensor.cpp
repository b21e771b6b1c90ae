#include "trus/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "trus/error.hpp"

namespace trus {

FrameMatrix::FrameMatrix(std::size_t frames, std::size_t channels, std::vector<float> values)
    : frames_(frames), channels_(channels), values_(std::move(values)) {
  if (values_.size() != frames * channels) {
    fail(ErrorCode::ShapeMismatch, "frame matrix expects " + std::to_string(frames * channels) +
                                       " values, got " + std::to_string(values_.size()));
  }
}

FrameMatrix::FrameMatrix(std::initializer_list<std::initializer_list<float>> rows)
    : frames_(rows.size()), channels_(rows.size() == 0 ? 0 : rows.begin()->size()) {
  values_.reserve(frames_ * channels_);
  for (const auto& r : rows) {
    if (r.size() != channels_) fail(ErrorCode::ShapeMismatch, "ragged frame rows");
    values_.insert(values_.end(), r.begin(), r.end());
  }
}

FrameMatrix FrameMatrix::from_vector(const ChannelVector& v) {
  return FrameMatrix(1, v.size(), v.values());
}

double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    fail(ErrorCode::ShapeMismatch,
         "dot of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

double squared_norm(std::span<const float> v) {
  double acc = 0.0;
  for (float x : v) acc += static_cast<double>(x) * x;
  return acc;
}

double l2_norm(std::span<const float> v) { return std::sqrt(squared_norm(v)); }

bool all_finite(std::span<const float> v) noexcept {
  return std::all_of(v.begin(), v.end(), [](float x) { return std::isfinite(x); });
}

double cosine_sim(std::span<const float> a, std::span<const float> b) {
  const double ab = dot(a, b);
  const double aa = squared_norm(a);
  const double bb = squared_norm(b);
  if (aa < kDegenerateEpsilon || bb < kDegenerateEpsilon) {
    fail(ErrorCode::DegenerateVector, "cosine similarity of a zero-norm vector");
  }
  // sqrt(aa * bb) == aa exactly when a == b, so self-similarity is exactly 1.
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

double cosine_sim(const ChannelVector& a, const ChannelVector& b) {
  return cosine_sim(a.span(), b.span());
}

ChannelVector pool_frames(const FrameMatrix& m) {
  if (m.frames() == 0) fail(ErrorCode::EmptyMatrix, "cannot pool a matrix with no frames");
  std::vector<double> acc(m.channels(), 0.0);
  for (std::size_t f = 0; f < m.frames(); ++f) {
    const auto r = m.row(f);
    for (std::size_t c = 0; c < r.size(); ++c) acc[c] += r[c];
  }
  ChannelVector out(m.channels());
  const double frames = static_cast<double>(m.frames());
  for (std::size_t c = 0; c < acc.size(); ++c) out[c] = static_cast<float>(acc[c] / frames);
  return out;
}

ChannelVector l2_normalize(const ChannelVector& v) {
  const double sq = squared_norm(v.span());
  if (sq < kDegenerateEpsilon) fail(ErrorCode::DegenerateVector, "cannot normalize a zero-norm vector");
  const double inv = 1.0 / std::sqrt(sq);
  ChannelVector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

void subtract_scaled_projection(std::span<float> row, std::span<const float> direction, double alpha) {
  if (alpha == 0.0) return;  // keeps -0.0 entries bit-identical
  const double coeff = alpha * dot(row, direction);
  for (std::size_t i = 0; i < row.size(); ++i) {
    row[i] = static_cast<float>(row[i] - coeff * direction[i]);
  }
}

}  // namespace trus
