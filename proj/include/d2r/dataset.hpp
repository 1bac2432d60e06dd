#pragma once

// Synthetic shapes-on-clutter dataset with ground-truth foreground masks, and
// aspect-ratio bucketed batching.

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>
#include <string>
#include <vector>

#include "d2r/random.hpp"
#include "d2r/tensor.hpp"

namespace d2r {

struct ToySample {
  std::string id;
  Tensor image;            // (s, s, 3) in [0, 1]
  std::size_t class_id = 0;
  Tensor foreground_mask;  // (s, s) in {0, 1}; evaluation only
};

enum class ToyShape { Disk, Square, Triangle, Cross, Ring };

namespace detail {

inline constexpr std::array<std::array<double, 3>, 5> kClassPalette = {{
    {0.90, 0.20, 0.15},
    {0.15, 0.70, 0.25},
    {0.20, 0.35, 0.95},
    {0.95, 0.85, 0.10},
    {0.80, 0.25, 0.85},
}};

// Area of the shape divided by r^2, where r is its half-extent.
inline double unit_area(ToyShape s) {
  switch (s) {
    case ToyShape::Disk: return std::numbers::pi;
    case ToyShape::Square: return 4.0;
    case ToyShape::Triangle: return 3.0 * std::sqrt(3.0) / 4.0;
    case ToyShape::Cross: return 2.56;
    case ToyShape::Ring: return std::numbers::pi * (1.0 - 0.55 * 0.55);
  }
  return 1.0;
}

// (u, v) are coordinates relative to the centre, rotated into the shape frame, in units of r.
inline bool inside(ToyShape s, double u, double v) {
  switch (s) {
    case ToyShape::Disk: return u * u + v * v <= 1.0;
    case ToyShape::Square: return std::abs(u) <= 1.0 && std::abs(v) <= 1.0;
    case ToyShape::Triangle: {
      // Equilateral, circumradius 1, apex at v = -1.
      const double s3 = std::sqrt(3.0);
      return v <= 0.5 && (s3 * u - v) <= 1.0 && (-s3 * u - v) <= 1.0;
    }
    case ToyShape::Cross: return (std::abs(u) <= 0.4 && std::abs(v) <= 1.0) || (std::abs(v) <= 0.4 && std::abs(u) <= 1.0);
    case ToyShape::Ring: {
      const double rr = u * u + v * v;
      return rr <= 1.0 && rr >= 0.55 * 0.55;
    }
  }
  return false;
}

}  // namespace detail

inline ToyShape toy_shape_for_class(std::size_t class_id) { return static_cast<ToyShape>(class_id % 5); }

// Share of clutter blobs drawn in a class colour, so colour alone does not locate the object.
inline constexpr double kPaletteClutter = 0.5;

/// Renders one sample. Deterministic in `seed`.
inline ToySample render_toy_sample(std::size_t class_id, std::size_t size, double clutter_level, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> U(0.0, 1.0);
  const double S = double(size);
  ToySample s;
  s.class_id = class_id;
  s.image = Tensor({size, size, 3});
  s.foreground_mask = Tensor({size, size});

  // Background: smooth random tint plus pixel noise.
  const std::array<double, 3> tint = {0.3 + 0.4 * U(rng), 0.3 + 0.4 * U(rng), 0.3 + 0.4 * U(rng)};
  std::normal_distribution<double> noise(0.0, 0.04 + 0.06 * clutter_level);
  for (std::size_t p = 0; p < size * size; ++p)
    for (std::size_t c = 0; c < 3; ++c) s.image[p * 3 + c] = tint[c] + noise(rng);

  // Clutter: random solid rectangles and disks in arbitrary colours.
  const auto blobs = static_cast<std::size_t>(std::lround(clutter_level * 10.0));
  for (std::size_t b = 0; b < blobs; ++b) {
    std::array<double, 3> col = {U(rng), U(rng), U(rng)};
    if (U(rng) < kPaletteClutter) col = detail::kClassPalette[std::size_t(U(rng) * 5) % 5];
    const double cx = U(rng) * S, cy = U(rng) * S;
    const double hw = (0.04 + 0.12 * U(rng)) * S, hh = (0.04 + 0.12 * U(rng)) * S;
    const bool round = U(rng) < 0.5;
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x) {
        const double dx = (double(x) + 0.5 - cx) / hw, dy = (double(y) + 0.5 - cy) / hh;
        const bool in = round ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
        if (in)
          for (std::size_t c = 0; c < 3; ++c) s.image[(y * size + x) * 3 + c] = col[c];
      }
  }

  // Foreground: textured class shape, fully inside the frame, 8%..35% target area.
  const ToyShape shape = toy_shape_for_class(class_id);
  const auto& base = detail::kClassPalette[(class_id + class_id / 5) % 5];
  const double area = 0.08 + 0.27 * U(rng);
  const double r = std::sqrt(area * S * S / detail::unit_area(shape));
  const double cx = r + U(rng) * (S - 2 * r), cy = r + U(rng) * (S - 2 * r);
  const double rot = U(rng) * 2 * std::numbers::pi;
  const double stripe_angle = double(class_id / 5) * 0.6 + 0.3 * U(rng);
  const double period = 0.12 * S;
  const double phase = U(rng) * 2 * std::numbers::pi;
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x) {
      const double dx = double(x) + 0.5 - cx, dy = double(y) + 0.5 - cy;
      const double u = (std::cos(rot) * dx + std::sin(rot) * dy) / r;
      const double v = (-std::sin(rot) * dx + std::cos(rot) * dy) / r;
      if (!detail::inside(shape, u, v)) continue;
      const double t = (std::cos(stripe_angle) * double(x) + std::sin(stripe_angle) * double(y)) / period;
      const double mod = 0.75 + 0.25 * std::sin(2 * std::numbers::pi * t + phase);
      for (std::size_t c = 0; c < 3; ++c) s.image[(y * size + x) * 3 + c] = base[c] * mod;
      s.foreground_mask(y, x) = 1.0;
    }
  for (auto& v : s.image.values()) v = std::clamp(v, 0.0, 1.0);
  return s;
}

/// `per_class` samples of each of `num_classes` classes, ordered by class.
inline std::vector<ToySample> gen_toy_dataset(std::size_t num_classes, std::size_t per_class, std::size_t image_size,
                                              double clutter_level, std::uint64_t seed) {
  if (num_classes < 2) throw ConfigError("gen_toy_dataset: need at least 2 classes");
  if (image_size < 8) throw ConfigError("gen_toy_dataset: image_size must be >= 8");
  std::vector<ToySample> out;
  for (std::size_t k = 0; k < num_classes; ++k)
    for (std::size_t i = 0; i < per_class; ++i) {
      auto s = render_toy_sample(k, image_size, clutter_level, derive_seed(seed, "toy-sample", k * per_class + i));
      s.id = "c" + std::to_string(k) + "_" + std::to_string(i);
      out.push_back(std::move(s));
    }
  return out;
}

// ---------------------------------------------------------------------------
// Aspect-ratio bucketed batching

enum class AspectBucket { Portrait, Square, Landscape };

inline AspectBucket aspect_bucket(std::size_t width, std::size_t height) {
  const double a = double(width) / double(height);
  if (a < 0.8) return AspectBucket::Portrait;
  if (a <= 1.25) return AspectBucket::Square;
  return AspectBucket::Landscape;
}

struct ImageBatch {
  AspectBucket bucket;
  std::vector<std::size_t> indices;
  std::size_t width = 0;  // canonical shape every member is resized to
  std::size_t height = 0;
};

/// Partitions sample indices into batches that never mix aspect buckets.
/// Every index appears exactly once; order is shuffled by `seed`.
inline std::vector<ImageBatch> group_size_batches(std::span<const std::pair<std::size_t, std::size_t>> sizes,
                                                  std::size_t batch_size, std::uint64_t seed) {
  if (batch_size == 0) throw ConfigError("group_size_batches: batch_size must be >= 1");
  Rng rng(seed);
  std::array<std::vector<std::size_t>, 3> buckets;
  for (std::size_t i = 0; i < sizes.size(); ++i)
    buckets[static_cast<std::size_t>(aspect_bucket(sizes[i].first, sizes[i].second))].push_back(i);
  std::vector<ImageBatch> out;
  for (std::size_t b = 0; b < 3; ++b) {
    auto& idx = buckets[b];
    if (idx.empty()) continue;
    double mw = 0, mh = 0;
    for (auto i : idx) mw += double(sizes[i].first), mh += double(sizes[i].second);
    const auto cw = static_cast<std::size_t>(std::lround(mw / double(idx.size())));
    const auto ch = static_cast<std::size_t>(std::lround(mh / double(idx.size())));
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t s = 0; s < idx.size(); s += batch_size) {
      ImageBatch batch{static_cast<AspectBucket>(b), {}, cw, ch};
      batch.indices.assign(idx.begin() + std::ptrdiff_t(s), idx.begin() + std::ptrdiff_t(std::min(idx.size(), s + batch_size)));
      out.push_back(std::move(batch));
    }
  }
  std::shuffle(out.begin(), out.end(), rng);
  return out;
}

}  // namespace d2r
