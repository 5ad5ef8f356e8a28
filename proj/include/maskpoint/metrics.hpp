#pragma once

#include <string>
#include <vector>

#include "maskpoint/geometry.hpp"
#include "maskpoint/tensor.hpp"

namespace maskpoint {

struct LossBreakdown {
  double l_cls = 0.0;
  double l_box = 0.0;
  double l_mask = 0.0;
  double l_keypoint = 0.0;
  double alpha = 0.0;
  double total = 0.0;

  static LossBreakdown make(double cls, double box, double mask, double keypoint,
                            double alpha) {
    return {cls, box, mask, keypoint, alpha, cls + box + mask + alpha * keypoint};
  }
  bool finite() const {
    return std::isfinite(l_cls) && std::isfinite(l_box) && std::isfinite(l_mask) &&
           std::isfinite(l_keypoint) && std::isfinite(total);
  }
  std::string to_json_line() const;
};

struct DivergedError : Error {
  explicit DivergedError(LossBreakdown b)
      : Error("training diverged: non-finite loss"), breakdown(b) {}
  LossBreakdown breakdown;
};

// ---------------------------------------------------------------------------
// Per-RoI losses. These wrap the differentiable kernels on detached values;
// the training loop uses the same kernels on live graph nodes.
// ---------------------------------------------------------------------------

/// Softmax cross-entropy; target_class may be the background index C.
double loss_cls(const Tensor& class_logits, int target_class);

/// Smooth-L1 over the 4 deltas of the target class; background (class >= C
/// under the bg-last convention) contributes 0.
double loss_box(const Tensor& box_deltas, const Eigen::Vector4d& target_deltas,
                int target_class, int num_classes);

/// Mean binary cross-entropy over the target-class channel of [N, N, C]
/// logits against a {0,1} grid.
double loss_mask(const Tensor& mask_logits, const Tensor& target_mask, int target_class);

/// Mean over channels of the spatial softmax cross-entropy; the label grid
/// must be one-hot per channel.
double loss_keypoint(const Tensor& keypoint_logits, const Tensor& label_grid);
double loss_keypoint(const Tensor& keypoint_logits, const HeatmapLabel& label);

LossBreakdown total_loss(double l_cls, double l_box, double l_mask, double l_keypoint,
                         double alpha);

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

struct PredObject {
  int class_id = 0;
  double score = 0.0;
  BinaryMask mask;
};
struct GtObject {
  int class_id = 0;
  BinaryMask mask;
};

struct ApSummary {
  double ap = 0.0;    // mean over IoU thresholds and classes with ground truth
  double ap50 = 0.0;  // at IoU 0.5 only
  std::vector<double> per_class;
};

double mask_iou(const BinaryMask& a, const BinaryMask& b);

std::vector<double> coco_thresholds();  // 0.50:0.05:0.95

/// COCO-style AP: score-sorted greedy matching per class and threshold,
/// 101-point interpolated precision-recall integration.
ApSummary mask_ap(const std::vector<std::vector<PredObject>>& predictions,
                  const std::vector<std::vector<GtObject>>& ground_truths, int num_classes,
                  const std::vector<double>& thresholds = coco_thresholds());

/// Fraction of predictions within `radius` of their index-matched target.
double keypoint_pck(const std::vector<Point>& pred_points, const std::vector<Point>& gt_points,
                    double radius);

struct ContourPrediction {
  int class_id = 0;
  double score = 0.0;
  std::vector<Point> points;  // ordered contour points (no center)
};

/// Segmentation quality of masks reconstructed from contour points alone.
/// `sizes` carries (height, width) per image for the rebuilt masks.
ApSummary contour_only_eval(const std::vector<std::vector<ContourPrediction>>& predictions,
                            const std::vector<std::vector<GtObject>>& ground_truths,
                            int num_classes, const std::vector<std::pair<int, int>>& sizes);

struct EvalReport {
  double mask_ap = 0.0;
  double ap50 = 0.0;
  double keypoint_pck = 0.0;
  double contour_only_ap = 0.0;
  std::vector<double> per_class;
  std::string to_json() const;
};

}  // namespace maskpoint
