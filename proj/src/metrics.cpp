#include "maskpoint/metrics.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "maskpoint/nn_ops.hpp"

namespace maskpoint {

using nlohmann::json;

std::string LossBreakdown::to_json_line() const {
  json j{{"l_cls", l_cls},           {"l_box", l_box}, {"l_mask", l_mask},
         {"l_keypoint", l_keypoint}, {"alpha", alpha}, {"total", total}};
  return j.dump();
}

double loss_cls(const Tensor& class_logits, int target_class) {
  const Eigen::Index k = class_logits.size();
  NodePtr logits = constant(class_logits.reshaped({1, k}));
  return softmax_ce(logits, {target_class})->value(0);
}

double loss_box(const Tensor& box_deltas, const Eigen::Vector4d& target_deltas, int target_class,
                int num_classes) {
  if (target_class < 0 || target_class >= num_classes) return 0.0;  // background
  Tensor pred({1, 4});
  for (int q = 0; q < 4; ++q) pred(0, q) = box_deltas(4 * target_class + q);
  Tensor target({1, 4});
  for (int q = 0; q < 4; ++q) target(0, q) = target_deltas(q);
  return smooth_l1(constant(std::move(pred)), target)->value(0);
}

double loss_mask(const Tensor& mask_logits, const Tensor& target_mask, int target_class) {
  if (mask_logits.rank() != 3) throw ShapeError("loss_mask: expected [N, N, C] logits");
  const auto n = mask_logits.extent(0);
  NodePtr picked = gather_channel(
      constant(mask_logits.reshaped({1, n, mask_logits.extent(1), mask_logits.extent(2)})),
      {target_class});
  return sigmoid_bce_mean(picked, target_mask.reshaped({1, n, target_mask.extent(1)}))->value(0);
}

namespace {

std::vector<std::pair<int, int>> cells_from_grid(const Tensor& label_grid) {
  if (label_grid.rank() != 3) throw LabelError("keypoint label must be [M, M, K]");
  const auto m = label_grid.extent(0), channels = label_grid.extent(2);
  std::vector<std::pair<int, int>> cells;
  for (Eigen::Index c = 0; c < channels; ++c) {
    double sum = 0.0;
    std::pair<int, int> hot{-1, -1};
    for (Eigen::Index r = 0; r < m; ++r)
      for (Eigen::Index cc = 0; cc < m; ++cc) {
        const double v = label_grid(r, cc, c);
        if (v != 0.0 && v != 1.0) throw LabelError("keypoint label entries must be 0 or 1");
        sum += v;
        if (v == 1.0 && hot.first < 0) hot = {static_cast<int>(r), static_cast<int>(cc)};
      }
    if (sum != 1.0) throw LabelError("keypoint label channel is not one-hot");
    cells.push_back(hot);
  }
  return cells;
}

}  // namespace

double loss_keypoint(const Tensor& keypoint_logits, const Tensor& label_grid) {
  if (keypoint_logits.rank() != 3) throw ShapeError("loss_keypoint: expected [M, M, K] logits");
  if (keypoint_logits.shape() != label_grid.shape())
    throw LabelError("loss_keypoint: logits and label shapes disagree");
  const auto m = keypoint_logits.extent(0), k = keypoint_logits.extent(2);
  NodePtr logits = constant(keypoint_logits.reshaped({1, m, m, k}));
  return spatial_softmax_ce(logits, {cells_from_grid(label_grid)})->value(0);
}

double loss_keypoint(const Tensor& keypoint_logits, const HeatmapLabel& label) {
  return loss_keypoint(keypoint_logits, label.grid());
}

LossBreakdown total_loss(double l_cls, double l_box, double l_mask, double l_keypoint,
                         double alpha) {
  if (alpha < 0.0) throw TargetError("total_loss: alpha must be non-negative");
  return LossBreakdown::make(l_cls, l_box, l_mask, l_keypoint, alpha);
}

double mask_iou(const BinaryMask& a, const BinaryMask& b) {
  const long inter = ((a.grid != 0) && (b.grid != 0)).cast<long>().sum();
  const long uni = a.foreground_count() + b.foreground_count() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

std::vector<double> coco_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

namespace {

/// 101-point interpolated AP from per-prediction TP flags (score-sorted).
double interpolated_ap(const std::vector<char>& tp, long gt_count) {
  if (gt_count == 0) return 0.0;
  std::vector<double> precision, recall;
  long tp_cum = 0;
  for (std::size_t i = 0; i < tp.size(); ++i) {
    tp_cum += tp[i] ? 1 : 0;
    precision.push_back(static_cast<double>(tp_cum) / static_cast<double>(i + 1));
    recall.push_back(static_cast<double>(tp_cum) / static_cast<double>(gt_count));
  }
  // Monotone envelope from the right.
  for (std::size_t i = precision.size(); i-- > 1;)
    precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0.0;
  std::size_t idx = 0;
  for (int i = 0; i <= 100; ++i) {
    const double r = i / 100.0;
    while (idx < recall.size() && recall[idx] < r) ++idx;
    ap += idx < precision.size() ? precision[idx] : 0.0;
  }
  return ap / 101.0;
}

struct ScoredPred {
  double score;
  std::size_t image;
  std::size_t index;  // index within predictions[image]
};

}  // namespace

ApSummary mask_ap(const std::vector<std::vector<PredObject>>& predictions,
                  const std::vector<std::vector<GtObject>>& ground_truths, int num_classes,
                  const std::vector<double>& thresholds) {
  if (predictions.size() != ground_truths.size())
    throw CountError("mask_ap: image count mismatch");
  ApSummary summary;
  summary.per_class.assign(static_cast<std::size_t>(num_classes), 0.0);
  std::vector<double> per_class50(static_cast<std::size_t>(num_classes), 0.0);
  int classes_with_gt = 0;
  double ap_sum = 0.0, ap50_sum = 0.0;

  for (int cls = 0; cls < num_classes; ++cls) {
    long gt_count = 0;
    for (const auto& per_image : ground_truths)
      for (const auto& gt : per_image) gt_count += gt.class_id == cls ? 1 : 0;
    if (gt_count == 0) continue;
    ++classes_with_gt;

    std::vector<ScoredPred> order;
    for (std::size_t img = 0; img < predictions.size(); ++img)
      for (std::size_t i = 0; i < predictions[img].size(); ++i)
        if (predictions[img][i].class_id == cls)
          order.push_back({predictions[img][i].score, img, i});
    std::stable_sort(order.begin(), order.end(),
                     [](const ScoredPred& a, const ScoredPred& b) { return a.score > b.score; });

    // IoU against every same-class GT, computed once per prediction.
    std::vector<std::vector<std::pair<std::size_t, double>>> ious(order.size());
    for (std::size_t p = 0; p < order.size(); ++p) {
      const auto& pred = predictions[order[p].image][order[p].index];
      const auto& gts = ground_truths[order[p].image];
      for (std::size_t g = 0; g < gts.size(); ++g)
        if (gts[g].class_id == cls) ious[p].emplace_back(g, mask_iou(pred.mask, gts[g].mask));
    }

    double class_ap_sum = 0.0, class_ap50 = 0.0;
    for (const double threshold : thresholds) {
      std::vector<std::vector<char>> matched(ground_truths.size());
      for (std::size_t img = 0; img < ground_truths.size(); ++img)
        matched[img].assign(ground_truths[img].size(), 0);
      std::vector<char> tp(order.size(), 0);
      for (std::size_t p = 0; p < order.size(); ++p) {
        double best = threshold;
        std::size_t best_gt = SIZE_MAX;
        for (const auto& [g, iou] : ious[p])
          if (!matched[order[p].image][g] && iou >= best) {
            // Strictly-better keeps the earliest GT on ties.
            if (best_gt == SIZE_MAX || iou > best) {
              best = iou;
              best_gt = g;
            }
          }
        if (best_gt != SIZE_MAX) {
          matched[order[p].image][best_gt] = 1;
          tp[p] = 1;
        }
      }
      const double ap = interpolated_ap(tp, gt_count);
      class_ap_sum += ap;
      if (threshold == 0.5) class_ap50 = ap;
    }
    const double class_ap = class_ap_sum / static_cast<double>(thresholds.size());
    summary.per_class[static_cast<std::size_t>(cls)] = class_ap;
    per_class50[static_cast<std::size_t>(cls)] = class_ap50;
    ap_sum += class_ap;
    ap50_sum += class_ap50;
  }

  if (classes_with_gt > 0) {
    summary.ap = ap_sum / classes_with_gt;
    summary.ap50 = ap50_sum / classes_with_gt;
  }
  return summary;
}

double keypoint_pck(const std::vector<Point>& pred_points, const std::vector<Point>& gt_points,
                    double radius) {
  if (pred_points.size() != gt_points.size())
    throw CountError("keypoint_pck: point count mismatch");
  if (pred_points.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred_points.size(); ++i)
    if ((pred_points[i] - gt_points[i]).norm() <= radius) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred_points.size());
}

ApSummary contour_only_eval(const std::vector<std::vector<ContourPrediction>>& predictions,
                            const std::vector<std::vector<GtObject>>& ground_truths,
                            int num_classes, const std::vector<std::pair<int, int>>& sizes) {
  if (predictions.size() != sizes.size())
    throw CountError("contour_only_eval: image count mismatch");
  std::vector<std::vector<PredObject>> rebuilt(predictions.size());
  for (std::size_t img = 0; img < predictions.size(); ++img)
    for (const ContourPrediction& pred : predictions[img]) {
      PredObject obj;
      obj.class_id = pred.class_id;
      obj.score = pred.score;
      obj.mask = points_to_mask(pred.points, sizes[img].first, sizes[img].second);
      rebuilt[img].push_back(std::move(obj));
    }
  return mask_ap(rebuilt, ground_truths, num_classes);
}

std::string EvalReport::to_json() const {
  json j{{"mask_ap", mask_ap},
         {"ap50", ap50},
         {"keypoint_pck", keypoint_pck},
         {"contour_only_ap", contour_only_ap},
         {"per_class", per_class}};
  return j.dump(2);
}

}  // namespace maskpoint
