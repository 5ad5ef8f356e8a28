#include "maskpoint/synth.hpp"

#include <cmath>
#include <numbers>

namespace maskpoint {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

std::vector<Point> shape_polygon(const ShapeSpec& spec) {
  // Vertices in local (row, col) coordinates before rotation.
  std::vector<Point> v;
  if (spec.kind == ShapeKind::triangle) {
    for (int i = 0; i < 3; ++i) {
      const double a = -std::numbers::pi / 2 + i * (kTwoPi / 3);
      v.emplace_back(spec.scale * std::sin(a), spec.scale * std::cos(a));
    }
  } else if (spec.kind == ShapeKind::star) {
    for (int i = 0; i < 10; ++i) {
      const double a = -std::numbers::pi / 2 + i * (kTwoPi / 10);
      const double r = (i % 2 == 0) ? spec.scale : 0.4 * spec.scale;
      v.emplace_back(r * std::sin(a), r * std::cos(a));
    }
  }
  return v;
}

}  // namespace

double bounding_radius(const ShapeSpec& spec) {
  switch (spec.kind) {
    case ShapeKind::rectangle:
      return std::hypot(0.5 * spec.scale, 0.75 * spec.scale);
    default:
      return spec.scale;
  }
}

BinaryMask rasterize_shape(const ShapeSpec& spec, int height, int width) {
  if (spec.scale <= 0.0) throw ShapeOutOfBounds("rasterize_shape: scale must be positive");
  const double radius = bounding_radius(spec);
  if (spec.center.x() - radius < 0.0 || spec.center.x() + radius > height - 1 ||
      spec.center.y() - radius < 0.0 || spec.center.y() + radius > width - 1)
    throw ShapeOutOfBounds("rasterize_shape: shape does not fit inside the image");

  // fmod keeps full turns exact so rotation is 2*pi periodic bit for bit.
  const double theta = std::fmod(spec.rotation, kTwoPi);
  const double cs = std::cos(theta), sn = std::sin(theta);
  const std::vector<Point> poly = shape_polygon(spec);

  BinaryMask mask(height, width);
  const int r0 = std::max(0, static_cast<int>(std::floor(spec.center.x() - radius)));
  const int r1 = std::min(height - 1, static_cast<int>(std::ceil(spec.center.x() + radius)));
  const int c0 = std::max(0, static_cast<int>(std::floor(spec.center.y() - radius)));
  const int c1 = std::min(width - 1, static_cast<int>(std::ceil(spec.center.y() + radius)));
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) {
      const double dr = r - spec.center.x(), dc = c - spec.center.y();
      // Rotate the pixel into the shape frame.
      const Point local{-sn * dc + cs * dr, cs * dc + sn * dr};
      bool inside = false;
      switch (spec.kind) {
        case ShapeKind::circle:
          inside = local.squaredNorm() <= spec.scale * spec.scale;
          break;
        case ShapeKind::rectangle:
          inside = std::abs(local.x()) <= 0.5 * spec.scale &&
                   std::abs(local.y()) <= 0.75 * spec.scale;
          break;
        case ShapeKind::triangle:
        case ShapeKind::star:
          inside = point_in_polygon(local, poly);
          break;
      }
      if (inside) mask.at(r, c) = 1;
    }
  return mask;
}

namespace {

// Flat fill colors; deliberately uncorrelated with class so shape, not color,
// carries the class signal.
constexpr double kPalette[8][3] = {
    {0.90, 0.25, 0.20}, {0.20, 0.65, 0.90}, {0.25, 0.80, 0.35}, {0.95, 0.80, 0.25},
    {0.75, 0.35, 0.85}, {0.95, 0.55, 0.20}, {0.35, 0.85, 0.80}, {0.85, 0.45, 0.55},
};

double quantize8(double v) {
  return std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
}

bool masks_intersect(const BinaryMask& a, const BinaryMask& b) {
  return ((a.grid != 0) && (b.grid != 0)).any();
}

}  // namespace

SceneRecord generate_scene(const SceneConfig& config, int scene_id, std::uint64_t seed) {
  Rng rng(mix_seed(mix_seed(seed, "scene"), static_cast<std::uint64_t>(scene_id)));
  const int size = config.size;

  SceneRecord record;
  record.scene_id = scene_id;
  record.seed = seed;
  record.image = Tensor({size, size, 3});
  const double bg = 0.12;
  record.image.array().setConstant(bg);

  const int count =
      static_cast<int>(rng.uniform_int(config.min_instances, config.max_instances));
  for (int i = 0; i < count; ++i) {
    bool placed = false;
    for (int attempt = 0; attempt < 1000 && !placed; ++attempt) {
      ShapeSpec spec;
      spec.class_id = static_cast<int>(rng.uniform_int(0, config.classes - 1));
      spec.kind = static_cast<ShapeKind>(spec.class_id % 4);
      spec.scale = rng.uniform(config.min_scale, config.max_scale) * (size / 128.0);
      spec.rotation = rng.uniform(0.0, kTwoPi);
      const double margin = bounding_radius(spec) + 1.0;
      if (2.0 * margin >= size - 2) continue;
      spec.center = {rng.uniform(margin, size - 1 - margin),
                     rng.uniform(margin, size - 1 - margin)};

      BinaryMask mask = rasterize_shape(spec, size, size);
      if (mask.foreground_count() == 0) continue;
      if (!config.allow_overlap) {
        bool overlaps = false;
        for (const auto& other : record.instances)
          if (masks_intersect(mask, other.mask)) {
            overlaps = true;
            break;
          }
        if (overlaps) continue;
      }

      const int color = static_cast<int>(rng.uniform_int(0, 7));
      for (int r = 0; r < size; ++r)
        for (int c = 0; c < size; ++c)
          if (mask.at(r, c))
            for (int ch = 0; ch < 3; ++ch) record.image(r, c, ch) = kPalette[color][ch];

      InstanceAnnotation ann;
      ann.class_id = spec.class_id;
      ann.box = tight_box(mask);
      ann.mask = std::move(mask);
      record.instances.push_back(std::move(ann));
      placed = true;
    }
    if (!placed)
      throw PlacementFailed("generate_scene: could not place instance " + std::to_string(i) +
                            " in scene " + std::to_string(scene_id));
  }

  for (Eigen::Index i = 0; i < record.image.size(); ++i) {
    const double noisy = record.image(i) + rng.uniform(-config.noise, config.noise);
    record.image(i) = quantize8(noisy);
  }
  return record;
}

std::vector<SceneRecord> generate_dataset(const SceneConfig& config, int scenes,
                                          std::uint64_t seed) {
  std::vector<SceneRecord> out;
  out.reserve(static_cast<std::size_t>(scenes));
  for (int i = 0; i < scenes; ++i) out.push_back(generate_scene(config, i, seed));
  return out;
}

}  // namespace maskpoint
