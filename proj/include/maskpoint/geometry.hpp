#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "maskpoint/common.hpp"
#include "maskpoint/tensor.hpp"

namespace maskpoint {

/// Rectangular {0,1} grid; 1 marks foreground.
struct BinaryMask {
  using Grid = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  Grid grid;

  BinaryMask() = default;
  BinaryMask(int height, int width) : grid(Grid::Zero(height, width)) {}

  int height() const { return static_cast<int>(grid.rows()); }
  int width() const { return static_cast<int>(grid.cols()); }
  std::uint8_t& at(int r, int c) { return grid(r, c); }
  std::uint8_t at(int r, int c) const { return grid(r, c); }
  long foreground_count() const { return grid.cast<long>().sum(); }
  bool operator==(const BinaryMask& o) const {
    return grid.rows() == o.grid.rows() && grid.cols() == o.grid.cols() &&
           (grid == o.grid).all();
  }
};

/// Clockwise boundary pixels of one connected component; consecutive entries
/// are 8-adjacent and the first entry is the topmost-then-leftmost pixel.
struct ClosedContour {
  std::vector<PixelCoord> points;  // (row, col)
};

enum class SamplingKind { uniform, corner };

inline const char* to_string(SamplingKind s) {
  return s == SamplingKind::uniform ? "uniform" : "corner";
}

/// Fixed-size set of boundary points, optionally with the object centroid.
struct ContourPointSet {
  std::vector<Point> points;  // exactly k entries, contour order
  std::optional<Point> center;
  int k = 0;
  SamplingKind sampling = SamplingKind::uniform;
  int pad_count = 0;
  std::uint64_t seed = 0;
};

// Coordinate conventions: points (contour samples, centroids, keypoints) use
// pixel-index coordinates, where pixel (r, c) is the lattice point (r, c).
// Boxes are half-open pixel-edge rectangles: the tight box of pixels
// rows a..b is [a, b+1). A pixel index x therefore sits at edge coordinate
// x + 0.5, which is the shift applied when registering points to a box grid.

/// One-hot keypoint targets registered to a box; channel `i` holds point `i`,
/// with the center (when present) in the last channel.
struct HeatmapLabel {
  int resolution = 0;
  Rect box;
  std::vector<std::pair<int, int>> cells;  // (row, col) per channel
  bool has_center = false;

  int channels() const { return static_cast<int>(cells.size()); }
  Tensor grid() const;  // [M, M, channels] of {0,1}
};

/// Moore-neighbor boundary trace of the largest 8-connected component.
ClosedContour trace_contour(const BinaryMask& mask);

/// Number of trace_contour calls that saw more than one component.
std::size_t& multi_component_trace_count();

/// Arc-length-uniform samples along the closed contour polyline. When the
/// contour has fewer distinct pixels than k, missing slots are duplicates of
/// sampled points chosen by the seeded RNG.
ContourPointSet uniform_sample(const ClosedContour& contour, int k, std::uint64_t seed);

/// Ramer-Douglas-Peucker corner candidates at tolerance epsilon; keeps the k
/// candidates of largest deviation (contour order preserved), padding as in
/// uniform_sample when there are fewer.
ContourPointSet corner_sample(const ClosedContour& contour, int k, double epsilon,
                              std::uint64_t seed);

/// Mean foreground coordinate (row, col), not rounded.
Point centroid(const BinaryMask& mask);

HeatmapLabel encode_heatmaps(const ContourPointSet& points, const Rect& box, int resolution);

/// Argmax cell per channel mapped back to image coordinates (cell centers).
std::vector<Point> decode_heatmaps(const Tensor& grid, const Rect& box);

/// Even-odd rasterization of the closed polygon through `points` in order;
/// pixels on the polygon boundary are foreground.
BinaryMask points_to_mask(const std::vector<Point>& points, int height, int width);

// ---------------------------------------------------------------------------
// Shared raster helpers.
// ---------------------------------------------------------------------------

/// Scanline even-odd fill over possibly several rings. The sample location of
/// pixel (r, c) is (r + offset, c + offset).
BinaryMask polygon_fill(const std::vector<std::vector<Point>>& rings, int height, int width,
                        double offset, bool include_boundary);

/// Single-point even-odd containment test (boundary counts as inside).
bool point_in_polygon(const Point& p, const std::vector<Point>& ring, double eps = 1e-9);

/// Exact boundary rings of a mask on the pixel-corner lattice. Filling the
/// rings with polygon_fill(offset=0.5) reproduces the mask bit for bit.
std::vector<std::vector<Point>> mask_to_crack_polygons(const BinaryMask& mask);

/// Tight integer bounding box of the foreground.
Rect tight_box(const BinaryMask& mask);

}  // namespace maskpoint
