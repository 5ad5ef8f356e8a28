#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace maskpoint {

// Points are (row, col) throughout; row grows downward.
using Point = Eigen::Vector2d;
using PixelCoord = Eigen::Vector2i;

/// Axis-aligned rectangle in pixel units, (top, left) corner plus extents.
struct Rect {
  double top = 0.0;
  double left = 0.0;
  double height = 0.0;
  double width = 0.0;

  double bottom() const { return top + height; }
  double right() const { return left + width; }
  double area() const { return height > 0 && width > 0 ? height * width : 0.0; }
  Point center() const { return {top + 0.5 * height, left + 0.5 * width}; }
  double diagonal() const { return std::sqrt(height * height + width * width); }

  bool contains(const Point& p) const {
    return p.x() >= top && p.x() <= bottom() && p.y() >= left && p.y() <= right();
  }

  Rect clipped(double image_height, double image_width) const {
    const double t = std::max(top, 0.0);
    const double l = std::max(left, 0.0);
    const double b = std::min(bottom(), image_height);
    const double r = std::min(right(), image_width);
    return {t, l, std::max(b - t, 0.0), std::max(r - l, 0.0)};
  }
};

inline double intersection_area(const Rect& a, const Rect& b) {
  const double h = std::min(a.bottom(), b.bottom()) - std::max(a.top, b.top);
  const double w = std::min(a.right(), b.right()) - std::max(a.left, b.left);
  return h > 0 && w > 0 ? h * w : 0.0;
}

inline double box_iou(const Rect& a, const Rect& b) {
  const double inter = intersection_area(a, b);
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// Errors. One exception type per named failure mode.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct EmptyMask : Error { using Error::Error; };
struct OutOfBox : Error { using Error::Error; };
struct DegeneratePolygon : Error { using Error::Error; };
struct ShapeOutOfBounds : Error { using Error::Error; };
struct PlacementFailed : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct ShapeError : Error { using Error::Error; };
struct DegenerateBox : Error { using Error::Error; };
struct TargetError : Error { using Error::Error; };
struct LabelError : Error { using Error::Error; };
struct CountError : Error { using Error::Error; };
struct MissingLabels : Error { using Error::Error; };

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 keeps sequences identical across platforms
// and standard libraries, which the seeded-reproducibility contracts need.
// ---------------------------------------------------------------------------

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  /// Uniform double in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [lo, hi], inclusive.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::uint64_t state_;
};

inline std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (const char c : s) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed ^ (salt + 0x9e3779b97f4a7c15ULL + (seed << 6) + (seed >> 2));
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::string_view tag) {
  return mix_seed(seed, fnv1a(tag));
}

}  // namespace maskpoint
