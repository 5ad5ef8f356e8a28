#include "maskpoint/geometry.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <deque>
#include <limits>
#include <set>
#include <unordered_map>

namespace maskpoint {

Tensor HeatmapLabel::grid() const {
  Tensor g({resolution, resolution, channels()});
  for (int c = 0; c < channels(); ++c) g(cells[c].first, cells[c].second, c) = 1.0;
  return g;
}

std::size_t& multi_component_trace_count() {
  static std::size_t count = 0;
  return count;
}

namespace {

// Clockwise 8-neighborhood starting west (row down, col right).
constexpr int kDr[8] = {0, -1, -1, -1, 0, 1, 1, 1};
constexpr int kDc[8] = {-1, -1, 0, 1, 1, 1, 0, -1};

int direction_index(int dr, int dc) {
  for (int i = 0; i < 8; ++i)
    if (kDr[i] == dr && kDc[i] == dc) return i;
  throw std::logic_error("direction_index: not a neighbor offset");
}

}  // namespace

ClosedContour trace_contour(const BinaryMask& mask) {
  const int h = mask.height(), w = mask.width();
  if (mask.foreground_count() == 0) throw EmptyMask("trace_contour: no foreground pixels");

  // Label 8-connected components; keep the largest (ties: earliest pixel in
  // row-major order).
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> label(h, w);
  label.setConstant(-1);
  std::vector<long> sizes;
  int components = 0;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!mask.at(r, c) || label(r, c) >= 0) continue;
      const int id = components++;
      sizes.push_back(0);
      std::deque<PixelCoord> queue{{r, c}};
      label(r, c) = id;
      while (!queue.empty()) {
        const PixelCoord p = queue.front();
        queue.pop_front();
        ++sizes[id];
        for (int d = 0; d < 8; ++d) {
          const int nr = p.x() + kDr[d], nc = p.y() + kDc[d];
          if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
          if (mask.at(nr, nc) && label(nr, nc) < 0) {
            label(nr, nc) = id;
            queue.push_back({nr, nc});
          }
        }
      }
    }
  if (components > 1) ++multi_component_trace_count();
  // Component ids are assigned in row-major discovery order, so the first id
  // of maximal size is the topmost-leftmost largest component.
  int best = 0;
  for (int id = 1; id < components; ++id)
    if (sizes[id] > sizes[best]) best = id;

  const auto in_comp = [&](int r, int c) {
    return r >= 0 && r < h && c >= 0 && c < w && label(r, c) == best;
  };

  PixelCoord start{-1, -1};
  for (int r = 0; r < h && start.x() < 0; ++r)
    for (int c = 0; c < w; ++c)
      if (label(r, c) == best) {
        start = {r, c};
        break;
      }

  ClosedContour contour;

  bool isolated = true;
  for (int d = 0; d < 8 && isolated; ++d)
    isolated = !in_comp(start.x() + kDr[d], start.y() + kDc[d]);
  if (isolated) {
    contour.points.push_back(start);
    return contour;
  }

  // Moore tracing: scan the neighborhood clockwise from the backtrack cell;
  // the first component pixel becomes current, the cell just before it the
  // new backtrack. The (pixel, backtrack) successor map is deterministic, so
  // the walk settles into a cycle; that cycle is the boundary. The seeded
  // initial state itself may sit on a short tail into the cycle, hence the
  // explicit state-recurrence detection.
  struct State {
    PixelCoord p;
    int back;
  };
  const auto advance = [&](const State& s) {
    int found = 1;
    while (!in_comp(s.p.x() + kDr[(s.back + found) % 8], s.p.y() + kDc[(s.back + found) % 8]))
      ++found;
    const int d = (s.back + found) % 8;
    const PixelCoord next{s.p.x() + kDr[d], s.p.y() + kDc[d]};
    const int prev = (s.back + found - 1) % 8;  // last background cell scanned
    const PixelCoord bg{s.p.x() + kDr[prev], s.p.y() + kDc[prev]};
    return State{next, direction_index(bg.x() - next.x(), bg.y() - next.y())};
  };
  const auto key = [&](const State& s) {
    return (static_cast<long>(s.p.x()) * w + s.p.y()) * 8 + s.back;
  };

  std::vector<State> orbit{State{start, 0}};  // west of start is outside the component
  std::unordered_map<long, std::size_t> seen{{key(orbit[0]), 0}};
  const long limit = 8 * sizes[best] + 16;
  std::size_t cycle_begin = 0;
  for (long step = 0;; ++step) {
    if (step > limit) throw std::logic_error("trace_contour: tracing did not terminate");
    const State next = advance(orbit.back());
    const auto [it, inserted] = seen.emplace(key(next), orbit.size());
    if (!inserted) {
      cycle_begin = it->second;
      break;
    }
    orbit.push_back(next);
  }

  // Rotate the cycle so it begins at the canonical start pixel.
  std::size_t anchor = cycle_begin;
  while (anchor < orbit.size() && orbit[anchor].p != start) ++anchor;
  if (anchor == orbit.size()) anchor = cycle_begin;  // start on the tail only; keep cycle order
  for (std::size_t i = anchor; i < orbit.size(); ++i) contour.points.push_back(orbit[i].p);
  for (std::size_t i = cycle_begin; i < anchor; ++i) contour.points.push_back(orbit[i].p);
  return contour;
}

namespace {

struct Polyline {
  std::vector<Point> vertices;       // closed: segment i runs vertices[i] -> vertices[i+1 mod n]
  std::vector<double> cumulative;    // size n+1, cumulative[0] = 0
  double total = 0.0;

  explicit Polyline(const std::vector<PixelCoord>& pixels) {
    const std::size_t n = pixels.size();
    vertices.reserve(n);
    for (const auto& p : pixels) vertices.emplace_back(p.x(), p.y());
    cumulative.resize(n + 1, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      const Point& a = vertices[i];
      const Point& b = vertices[(i + 1) % n];
      cumulative[i + 1] = cumulative[i] + (b - a).norm();
    }
    total = cumulative.back();
  }

  Point at_arc(double s) const {
    const std::size_t n = vertices.size();
    if (n == 1 || total <= 0.0) return vertices[0];
    auto it = std::upper_bound(cumulative.begin(), cumulative.end(), s);
    auto idx = static_cast<std::size_t>(std::distance(cumulative.begin(), it));
    idx = idx == 0 ? 0 : idx - 1;
    if (idx >= n) idx = n - 1;
    const double seg = cumulative[idx + 1] - cumulative[idx];
    const double t = seg > 0.0 ? (s - cumulative[idx]) / seg : 0.0;
    const Point& a = vertices[idx];
    const Point& b = vertices[(idx + 1) % n];
    return a + t * (b - a);
  }
};

/// Appends seeded duplicates next to their source points so the polygon order
/// of the set stays intact.
std::vector<Point> pad_points(const std::vector<Point>& base, int k, Rng& rng) {
  const int n = static_cast<int>(base.size());
  std::vector<int> copies(base.size(), 1);
  for (int i = n; i < k; ++i) ++copies[static_cast<std::size_t>(rng.uniform_int(0, n - 1))];
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(k));
  for (std::size_t i = 0; i < base.size(); ++i)
    for (int c = 0; c < copies[i]; ++c) out.push_back(base[i]);
  return out;
}

}  // namespace

ContourPointSet uniform_sample(const ClosedContour& contour, int k, std::uint64_t seed) {
  if (k < 1) throw CountError("uniform_sample: k must be >= 1");
  if (contour.points.empty()) throw EmptyMask("uniform_sample: empty contour");

  std::set<std::pair<int, int>> distinct;
  for (const auto& p : contour.points) distinct.emplace(p.x(), p.y());
  const int base_count = std::min<int>(k, static_cast<int>(distinct.size()));

  const Polyline line(contour.points);
  std::vector<Point> base;
  base.reserve(static_cast<std::size_t>(base_count));
  for (int i = 0; i < base_count; ++i)
    base.push_back(line.at_arc(line.total * static_cast<double>(i) / base_count));

  ContourPointSet out;
  out.k = k;
  out.sampling = SamplingKind::uniform;
  out.seed = seed;
  out.pad_count = k - base_count;
  if (out.pad_count > 0) {
    Rng rng(mix_seed(seed, "uniform_sample.pad"));
    out.points = pad_points(base, k, rng);
  } else {
    out.points = std::move(base);
  }
  return out;
}

namespace {

double perpendicular_distance(const Point& p, const Point& a, const Point& b) {
  const Point ab = b - a;
  const double len = ab.norm();
  if (len <= 0.0) return (p - a).norm();
  const double cross = ab.x() * (p.y() - a.y()) - ab.y() * (p.x() - a.x());
  return std::abs(cross) / len;
}

/// Classic recursive simplification over an index chain; records the
/// deviation each retained vertex was selected with.
void rdp_simplify(const std::vector<Point>& pts, const std::vector<int>& chain, std::size_t lo,
                  std::size_t hi, double epsilon, std::vector<std::pair<int, double>>& kept) {
  if (hi <= lo + 1) return;
  const Point& a = pts[static_cast<std::size_t>(chain[lo])];
  const Point& b = pts[static_cast<std::size_t>(chain[hi])];
  double best = -1.0;
  std::size_t arg = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    const double d = perpendicular_distance(pts[static_cast<std::size_t>(chain[i])], a, b);
    if (d > best) {
      best = d;
      arg = i;
    }
  }
  if (best > epsilon) {
    kept.emplace_back(chain[arg], best);
    rdp_simplify(pts, chain, lo, arg, epsilon, kept);
    rdp_simplify(pts, chain, arg, hi, epsilon, kept);
  }
}

}  // namespace

ContourPointSet corner_sample(const ClosedContour& contour, int k, double epsilon,
                              std::uint64_t seed) {
  if (k < 1) throw CountError("corner_sample: k must be >= 1");
  if (epsilon <= 0.0) throw CountError("corner_sample: epsilon must be positive");
  if (contour.points.empty()) throw EmptyMask("corner_sample: empty contour");

  std::vector<Point> pts;
  pts.reserve(contour.points.size());
  for (const auto& p : contour.points) pts.emplace_back(p.x(), p.y());
  const int m = static_cast<int>(pts.size());

  constexpr double kAnchor = std::numeric_limits<double>::infinity();
  std::vector<std::pair<int, double>> candidates;  // (contour index, deviation)
  if (m <= 2) {
    for (int i = 0; i < m; ++i) candidates.emplace_back(i, kAnchor);
  } else {
    int far = 1;
    double far_d = (pts[1] - pts[0]).norm();
    for (int i = 2; i < m; ++i) {
      const double d = (pts[static_cast<std::size_t>(i)] - pts[0]).norm();
      if (d > far_d) {
        far_d = d;
        far = i;
      }
    }
    candidates.emplace_back(0, kAnchor);
    candidates.emplace_back(far, kAnchor);
    std::vector<int> chain;
    for (int i = 0; i <= far; ++i) chain.push_back(i);
    rdp_simplify(pts, chain, 0, chain.size() - 1, epsilon, candidates);
    chain.clear();
    for (int i = far; i < m; ++i) chain.push_back(i);
    chain.push_back(0);
    rdp_simplify(pts, chain, 0, chain.size() - 1, epsilon, candidates);
  }

  std::sort(candidates.begin(), candidates.end());
  if (static_cast<int>(candidates.size()) > k) {
    // Keep the k largest deviations, earlier contour order breaking ties.
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    candidates.resize(static_cast<std::size_t>(k));
    std::sort(candidates.begin(), candidates.end());
  }

  std::vector<Point> base;
  base.reserve(candidates.size());
  for (const auto& [idx, dev] : candidates) base.push_back(pts[static_cast<std::size_t>(idx)]);

  ContourPointSet out;
  out.k = k;
  out.sampling = SamplingKind::corner;
  out.seed = seed;
  out.pad_count = k - static_cast<int>(base.size());
  if (out.pad_count > 0) {
    Rng rng(mix_seed(seed, "corner_sample.pad"));
    out.points = pad_points(base, k, rng);
  } else {
    out.points = std::move(base);
  }
  return out;
}

Point centroid(const BinaryMask& mask) {
  double sr = 0.0, sc = 0.0;
  long count = 0;
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c)
      if (mask.at(r, c)) {
        sr += r;
        sc += c;
        ++count;
      }
  if (count == 0) throw EmptyMask("centroid: no foreground pixels");
  return {sr / count, sc / count};
}

HeatmapLabel encode_heatmaps(const ContourPointSet& points, const Rect& box, int resolution) {
  if (box.height <= 0.0 || box.width <= 0.0)
    throw DegenerateBox("encode_heatmaps: box has no extent");
  HeatmapLabel label;
  label.resolution = resolution;
  label.box = box;
  label.has_center = points.center.has_value();

  std::vector<Point> all = points.points;
  if (points.center) all.push_back(*points.center);
  for (const Point& p : all) {
    // pixel-index point -> edge coordinates of the box grid
    const Point edge{p.x() + 0.5, p.y() + 0.5};
    if (!box.contains(edge)) throw OutOfBox("encode_heatmaps: point outside box");
    const int cy = std::clamp(
        static_cast<int>(std::floor((edge.x() - box.top) / box.height * resolution)), 0,
        resolution - 1);
    const int cx = std::clamp(
        static_cast<int>(std::floor((edge.y() - box.left) / box.width * resolution)), 0,
        resolution - 1);
    label.cells.emplace_back(cy, cx);
  }
  return label;
}

std::vector<Point> decode_heatmaps(const Tensor& grid, const Rect& box) {
  if (grid.rank() != 3) throw ShapeError("decode_heatmaps: expected [M, M, K] grid");
  const auto m = grid.extent(0), channels = grid.extent(2);
  if (grid.extent(1) != m) throw ShapeError("decode_heatmaps: grid must be square");
  std::vector<Point> out;
  out.reserve(static_cast<std::size_t>(channels));
  for (Eigen::Index c = 0; c < channels; ++c) {
    Eigen::Index best_r = 0, best_c = 0;
    double best = grid(0, 0, c);
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index cc = 0; cc < m; ++cc)
        if (grid(r, cc, c) > best) {
          best = grid(r, cc, c);
          best_r = r;
          best_c = cc;
        }
    // cell center in edge coordinates, shifted back to pixel-index space
    out.emplace_back(box.top + (best_r + 0.5) * box.height / static_cast<double>(m) - 0.5,
                     box.left + (best_c + 0.5) * box.width / static_cast<double>(m) - 0.5);
  }
  return out;
}

BinaryMask points_to_mask(const std::vector<Point>& points, int height, int width) {
  if (points.size() < 3) throw DegeneratePolygon("points_to_mask: need at least 3 points");
  return polygon_fill({points}, height, width, 0.0, true);
}

BinaryMask polygon_fill(const std::vector<std::vector<Point>>& rings, int height, int width,
                        double offset, bool include_boundary) {
  BinaryMask mask(height, width);
  struct Edge {
    double y1, x1, y2, x2;
  };
  std::vector<Edge> edges;
  for (const auto& ring : rings)
    for (std::size_t i = 0; i < ring.size(); ++i) {
      const Point& a = ring[i];
      const Point& b = ring[(i + 1) % ring.size()];
      edges.push_back({a.x(), a.y(), b.x(), b.y()});
    }

  std::vector<double> crossings;
  for (int r = 0; r < height; ++r) {
    const double y = r + offset;
    crossings.clear();
    for (const Edge& e : edges) {
      if ((e.y1 > y) == (e.y2 > y)) continue;
      crossings.push_back(e.x1 + (y - e.y1) * (e.x2 - e.x1) / (e.y2 - e.y1));
    }
    std::sort(crossings.begin(), crossings.end());
    for (std::size_t i = 0; i + 1 < crossings.size(); i += 2) {
      // Columns whose sample c + offset falls strictly inside (x_a, x_b).
      const double lo = crossings[i] - offset, hi = crossings[i + 1] - offset;
      int c0 = static_cast<int>(std::floor(lo)) + 1;
      int c1 = static_cast<int>(std::ceil(hi)) - 1;
      c0 = std::max(c0, 0);
      c1 = std::min(c1, width - 1);
      for (int c = c0; c <= c1; ++c) mask.at(r, c) = 1;
    }
  }

  if (include_boundary) {
    constexpr double kEps = 1e-9;
    for (const Edge& e : edges) {
      const double ymin = std::min(e.y1, e.y2), ymax = std::max(e.y1, e.y2);
      if (std::abs(e.y1 - e.y2) < kEps) {
        const double r = e.y1 - offset;
        const int ri = static_cast<int>(std::llround(r));
        if (std::abs(r - ri) > kEps || ri < 0 || ri >= height) continue;
        const double xlo = std::min(e.x1, e.x2) - offset, xhi = std::max(e.x1, e.x2) - offset;
        for (int c = std::max(0, static_cast<int>(std::ceil(xlo - kEps)));
             c <= std::min(width - 1, static_cast<int>(std::floor(xhi + kEps))); ++c)
          mask.at(ri, c) = 1;
        continue;
      }
      const int r0 = std::max(0, static_cast<int>(std::ceil(ymin - offset - kEps)));
      const int r1 = std::min(height - 1, static_cast<int>(std::floor(ymax - offset + kEps)));
      for (int r = r0; r <= r1; ++r) {
        const double t = (r + offset - e.y1) / (e.y2 - e.y1);
        if (t < -kEps || t > 1.0 + kEps) continue;
        const double x = e.x1 + t * (e.x2 - e.x1) - offset;
        const int ci = static_cast<int>(std::llround(x));
        if (ci >= 0 && ci < width && std::abs(x - ci) <= kEps) mask.at(r, ci) = 1;
      }
    }
  }
  return mask;
}

bool point_in_polygon(const Point& p, const std::vector<Point>& ring, double eps) {
  bool inside = false;
  for (std::size_t i = 0; i < ring.size(); ++i) {
    const Point& a = ring[i];
    const Point& b = ring[(i + 1) % ring.size()];
    // Boundary counts as inside.
    const Point ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    if ((a + t * ab - p).norm() <= eps) return true;
    if ((a.x() > p.x()) != (b.x() > p.x())) {
      const double x = a.y() + (p.x() - a.x()) * (b.y() - a.y()) / (b.x() - a.x());
      if (x > p.y()) inside = !inside;
    }
  }
  return inside;
}

namespace {

// Corner-lattice directions: E, S, W, N.
constexpr int kEdgeDr[4] = {0, 1, 0, -1};
constexpr int kEdgeDc[4] = {1, 0, -1, 0};

}  // namespace

std::vector<std::vector<Point>> mask_to_crack_polygons(const BinaryMask& mask) {
  const int h = mask.height(), w = mask.width();
  const auto fg = [&](int r, int c) {
    return r >= 0 && r < h && c >= 0 && c < w && mask.at(r, c) != 0;
  };
  // exists[d](r, c): directed boundary edge leaving corner (r, c) toward d.
  using CornerGrid = Eigen::Array<std::uint8_t, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  std::array<CornerGrid, 4> exists, visited;
  for (int d = 0; d < 4; ++d) {
    exists[d] = CornerGrid::Zero(h + 1, w + 1);
    visited[d] = CornerGrid::Zero(h + 1, w + 1);
  }
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      if (!fg(r, c)) continue;
      if (!fg(r - 1, c)) exists[0](r, c) = 1;          // top edge, eastward
      if (!fg(r, c + 1)) exists[1](r, c + 1) = 1;      // right edge, southward
      if (!fg(r + 1, c)) exists[2](r + 1, c + 1) = 1;  // bottom edge, westward
      if (!fg(r, c - 1)) exists[3](r + 1, c) = 1;      // left edge, northward
    }

  std::vector<std::vector<Point>> rings;
  for (int r = 0; r <= h; ++r)
    for (int c = 0; c <= w; ++c)
      for (int d0 = 0; d0 < 4; ++d0) {
        if (!exists[d0](r, c) || visited[d0](r, c)) continue;
        std::vector<Point> ring;
        int cr = r, cc = c, d = d0;
        while (true) {
          visited[d](cr, cc) = 1;
          if (ring.empty()) ring.emplace_back(cr, cc);
          const int nr = cr + kEdgeDr[d], nc = cc + kEdgeDc[d];
          // successor: prefer right turn, then straight, then left
          int nd = -1;
          for (const int turn : {1, 0, 3}) {
            const int cand = (d + turn) % 4;
            if (exists[cand](nr, nc)) {
              nd = cand;
              break;
            }
          }
          if (nd < 0) throw std::logic_error("mask_to_crack_polygons: open boundary");
          if (nr == r && nc == c && nd == d0) break;  // cycle closed
          if (nd != d) ring.emplace_back(nr, nc);
          cr = nr;
          cc = nc;
          d = nd;
        }
        rings.push_back(std::move(ring));
      }
  return rings;
}

Rect tight_box(const BinaryMask& mask) {
  int rmin = mask.height(), rmax = -1, cmin = mask.width(), cmax = -1;
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c)
      if (mask.at(r, c)) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  if (rmax < 0) throw EmptyMask("tight_box: no foreground pixels");
  return {static_cast<double>(rmin), static_cast<double>(cmin),
          static_cast<double>(rmax - rmin + 1), static_cast<double>(cmax - cmin + 1)};
}

}  // namespace maskpoint
