#pragma once

#include <vector>

#include "maskpoint/geometry.hpp"
#include "maskpoint/tensor.hpp"

namespace maskpoint {

enum class ShapeKind { circle, rectangle, triangle, star };

inline const char* to_string(ShapeKind k) {
  switch (k) {
    case ShapeKind::circle: return "circle";
    case ShapeKind::rectangle: return "rectangle";
    case ShapeKind::triangle: return "triangle";
    default: return "star";
  }
}

/// Analytic shape instance. `scale` is the circumradius for circle, triangle
/// and star; rectangles are scale x 1.5*scale before rotation.
struct ShapeSpec {
  ShapeKind kind = ShapeKind::circle;
  Point center{0.0, 0.0};  // (row, col)
  double scale = 1.0;
  double rotation = 0.0;  // radians
  int class_id = 0;
};

/// One labelled object in a scene.
struct InstanceAnnotation {
  int class_id = 0;
  Rect box;  // tight integer-valued bounding box of `mask`
  BinaryMask mask;
  std::optional<ContourPointSet> contour_points;
};

struct SceneRecord {
  Tensor image;  // [H, W, 3], values in [0, 1] quantized to 8-bit levels
  std::vector<InstanceAnnotation> instances;
  int scene_id = 0;
  std::uint64_t seed = 0;
};

struct SceneConfig {
  int size = 128;
  int min_instances = 1;
  int max_instances = 3;
  int classes = 4;
  bool allow_overlap = false;
  double noise = 0.05;
  double min_scale = 13.0;
  double max_scale = 26.0;
};

/// Circumradius of the smallest disc covering the shape; used for placement.
double bounding_radius(const ShapeSpec& spec);

/// Pixel-center containment raster of the analytic (closed) shape.
BinaryMask rasterize_shape(const ShapeSpec& spec, int height, int width);

/// Deterministic scene synthesis; identical (config, scene_id, seed) yields a
/// byte-identical record.
SceneRecord generate_scene(const SceneConfig& config, int scene_id, std::uint64_t seed);

std::vector<SceneRecord> generate_dataset(const SceneConfig& config, int scenes,
                                          std::uint64_t seed);

}  // namespace maskpoint
