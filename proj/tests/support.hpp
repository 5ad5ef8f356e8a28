#pragma once

// Shared test utilities: independent oracles and the finite-difference
// gradient checker. Everything here is deliberately written without reusing
// the library's computation paths wherever it serves as an oracle.

#include <cmath>
#include <functional>
#include <vector>

#include "maskpoint/autograd.hpp"
#include "maskpoint/geometry.hpp"
#include "maskpoint/tensor.hpp"

namespace maskpoint::test {

// ---------------------------------------------------------------------------
// Arc-length oracle: dense resampling of the closed contour polyline at
// 1000*k steps; expectation i is dense step 1000*i. Independent cumulative
// walk, no reuse of Polyline.
// ---------------------------------------------------------------------------
inline std::vector<Point> dense_arc_oracle(const ClosedContour& contour, int k) {
  const std::size_t n = contour.points.size();
  std::vector<Point> vertices;
  for (const auto& p : contour.points) vertices.emplace_back(p.x(), p.y());
  double total = 0.0;
  std::vector<double> seg(n);
  for (std::size_t i = 0; i < n; ++i) {
    seg[i] = (vertices[(i + 1) % n] - vertices[i]).norm();
    total += seg[i];
  }
  const long steps = 1000L * k;
  std::vector<Point> dense;
  dense.reserve(static_cast<std::size_t>(steps));
  for (long s = 0; s < steps; ++s) {
    double arc = total * static_cast<double>(s) / static_cast<double>(steps);
    std::size_t i = 0;
    while (i + 1 < n && arc > seg[i]) {
      arc -= seg[i];
      ++i;
    }
    const double t = seg[i] > 0 ? arc / seg[i] : 0.0;
    dense.push_back(vertices[i] + t * (vertices[(i + 1) % n] - vertices[i]));
  }
  std::vector<Point> expected;
  for (int i = 0; i < k; ++i) expected.push_back(dense[static_cast<std::size_t>(1000L * i)]);
  return expected;
}

// ---------------------------------------------------------------------------
// Independent recursive RDP used as the corner-sampling oracle.
// ---------------------------------------------------------------------------
inline void rdp_oracle_rec(const std::vector<Point>& pts, std::size_t lo, std::size_t hi,
                           double eps, std::vector<std::size_t>& keep) {
  if (hi <= lo + 1) return;
  const Point a = pts[lo], b = pts[hi];
  double best = -1.0;
  std::size_t arg = lo;
  for (std::size_t i = lo + 1; i < hi; ++i) {
    double d;
    if ((b - a).norm() <= 0) {
      d = (pts[i] - a).norm();
    } else {
      const Point ab = b - a;
      d = std::abs(ab.x() * (pts[i].y() - a.y()) - ab.y() * (pts[i].x() - a.x())) / ab.norm();
    }
    if (d > best) {
      best = d;
      arg = i;
    }
  }
  if (best > eps) {
    keep.push_back(arg);
    rdp_oracle_rec(pts, lo, arg, eps, keep);
    rdp_oracle_rec(pts, arg, hi, eps, keep);
  }
}

// ---------------------------------------------------------------------------
// Brute-force even-odd polygon containment for small grids (fill oracle).
// ---------------------------------------------------------------------------
inline bool oracle_point_inside(double py, double px, const std::vector<Point>& ring) {
  bool inside = false;
  for (std::size_t i = 0; i < ring.size(); ++i) {
    const Point& a = ring[i];
    const Point& b = ring[(i + 1) % ring.size()];
    if ((a.x() > py) != (b.x() > py)) {
      const double x = a.y() + (py - a.x()) * (b.y() - a.y()) / (b.x() - a.x());
      if (x > px) inside = !inside;
    }
  }
  return inside;
}

// ---------------------------------------------------------------------------
// Central-difference gradient checker. Perturbs every element of the chosen
// leaves and compares (J(x+h)-J(x-h))/2h with the analytic gradient.
// ---------------------------------------------------------------------------
struct GradCheckResult {
  double max_rel_error = 0.0;
  long checked = 0;
  std::string worst;
};

inline GradCheckResult check_gradients(
    const std::vector<std::pair<std::string, NodePtr>>& leaves,
    const std::function<NodePtr()>& forward, double h = 1e-5,
    Eigen::Index max_per_leaf = 0) {
  for (const auto& [name, node] : leaves)
    if (node->has_grad()) node->grad.array().setZero();
  NodePtr root = forward();
  backward(root);

  GradCheckResult result;
  for (const auto& [name, node] : leaves) {
    const Eigen::Index count = node->value.size();
    // Large tensors are stride-sampled; the backward kernels are uniform
    // over elements, so a spread subset exercises the same code paths.
    const Eigen::Index stride =
        (max_per_leaf > 0 && count > max_per_leaf) ? count / max_per_leaf : 1;
    for (Eigen::Index i = 0; i < count; i += stride) {
      const double saved = node->value(i);
      node->value(i) = saved + h;
      const double plus = forward()->value(0);
      node->value(i) = saved - h;
      const double minus = forward()->value(0);
      node->value(i) = saved;
      const double numeric = (plus - minus) / (2 * h);
      const double analytic = node->has_grad() ? node->grad(i) : 0.0;
      const double rel =
          std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1.0});
      ++result.checked;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst = name + "[" + std::to_string(i) + "]";
      }
    }
  }
  return result;
}

/// Moves a freshly initialized model off the zero-bias point so that no
/// pre-activation sits exactly on a ReLU kink, where one-sided behaviour
/// makes central differences meaningless.
inline void randomize_biases(const std::vector<std::pair<std::string, NodePtr>>& params,
                             std::uint64_t seed) {
  Rng rng(seed);
  for (const auto& [name, node] : params)
    if (name.size() > 2 && name.compare(name.size() - 2, 2, ".b") == 0)
      for (Eigen::Index i = 0; i < node->value.size(); ++i)
        node->value(i) = rng.uniform(-0.3, 0.3);
}

inline Tensor random_tensor(std::vector<Eigen::Index> shape, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t(std::move(shape));
  for (Eigen::Index i = 0; i < t.size(); ++i) t(i) = rng.uniform(lo, hi);
  return t;
}

}  // namespace maskpoint::test
