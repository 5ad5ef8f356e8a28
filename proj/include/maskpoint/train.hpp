#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "maskpoint/dataset.hpp"
#include "maskpoint/metrics.hpp"
#include "maskpoint/model.hpp"

namespace maskpoint {

struct ProposalSettings {
  int per_gt = 2;
  int negatives = 4;
  double jitter_center = 0.15;    // max center shift as fraction of box size
  double jitter_scale_lo = 0.85;  // per-axis scale factor range
  double jitter_scale_hi = 1.18;
};

struct TrainConfig {
  double learning_rate = 0.005;
  double momentum = 0.9;
  double weight_decay = 0.0001;
  int batch_images = 4;
  int iterations = 800;
  double lr_drop_fraction = 0.75;
  double lr_drop_factor = 0.1;
  double flip_prob = 0.5;
  FusionConfig fusion;  // desk default k = 16 (set in the constructor)
  std::uint64_t seed = 1;

  ProposalSettings proposals;
  SamplingKind sampling = SamplingKind::uniform;
  double corner_epsilon = 2.0;
  ModelConfig model;

  TrainConfig() { fusion.k = 16; }

  ModelConfig model_config() const {
    ModelConfig m = model;
    m.fusion = fusion;
    m.with_keypoint_branch = fusion.enabled || fusion.alpha > 0.0;
    return m;
  }
  LabelOptions label_options() const {
    return {fusion.k, sampling, corner_epsilon, fusion.use_center, mix_seed(seed, "labels")};
  }

  std::string to_json(int indent = -1) const;
  static TrainConfig from_json_text(const std::string& text);
  static TrainConfig load(const std::string& path);
};

struct Proposal {
  Rect box;
  int matched_gt = -1;  // -1 for background
};

struct ProposalSet {
  std::vector<Proposal> proposals;
  int skipped_negatives = 0;
  std::uint64_t jitter_seed = 0;
};

/// Jittered copies of each ground-truth box (IoU >= 0.5 with their source)
/// plus random negatives with IoU < 0.5 against every ground truth.
ProposalSet sample_proposals(const std::vector<Rect>& gt_boxes, int image_size, int per_gt,
                             int negatives, std::uint64_t seed,
                             const ProposalSettings& settings = {});

/// (tx, ty, tw, th): center offsets normalized by the proposal size, log
/// scale ratios. x is the column axis.
Eigen::Vector4d encode_box_deltas(const Rect& proposal, const Rect& gt);
Rect apply_box_deltas(const Rect& proposal, const Eigen::Vector4d& deltas);

struct RoiTarget {
  int class_target = 0;  // == classes for background
  bool foreground = false;
  Eigen::Vector4d box_deltas = Eigen::Vector4d::Zero();
  Tensor mask;  // [N, N] {0,1}, at the fused output resolution
  std::vector<std::pair<int, int>> kp_cells;
  int clamped_points = 0;
};

/// Per-proposal training targets. Keypoint cells are produced only when
/// alpha > 0; ground-truth points falling outside the (jittered) proposal are
/// clamped onto its boundary and counted.
std::vector<RoiTarget> assign_targets(const ProposalSet& proposals,
                                      const std::vector<InstanceAnnotation>& annotations,
                                      const ModelConfig& config);

/// Nearest-neighbor raster of the box-cropped mask onto an N x N grid.
Tensor rasterize_mask_target(const BinaryMask& mask, const Rect& box, int resolution);

/// Horizontal mirror of a scene: image and masks flip columns; contour points
/// mirror, reverse to stay clockwise, and re-anchor at the topmost-leftmost
/// sampled point.
SceneRecord flip_scene(const SceneRecord& scene);

struct SgdOptimizer {
  double momentum = 0.9;
  double weight_decay = 0.0;
  std::unordered_map<std::string, Tensor> velocity;

  /// v <- momentum * v + (grad + weight_decay * theta); theta -= lr * v.
  void step(ParamStore& params, double lr);
};

struct TrainBatch {
  Tensor images;  // [B, H, W, 3]
  std::vector<RoiRef> rois;
  std::vector<RoiTarget> targets;
};

TrainBatch prepare_batch(const std::vector<SceneRecord>& scenes,
                         const std::vector<std::size_t>& indices, const TrainConfig& config,
                         int iteration);

/// One forward/backward/update. Returns the pre-update loss; throws
/// DivergedError (carrying the breakdown) on non-finite losses.
LossBreakdown train_step(Model& model, SgdOptimizer& optimizer, const TrainBatch& batch,
                         double alpha, double lr);

struct TrainLogEntry {
  int iteration = 0;
  double lr = 0.0;
  LossBreakdown loss;
};

/// Full training loop: seeded scene order, optional horizontal flips,
/// jittered proposals, SGD with a single learning-rate drop. Writes one JSON
/// line per iteration to `log` when given.
std::vector<TrainLogEntry> train_model(Model& model, const std::vector<SceneRecord>& scenes,
                                       const TrainConfig& config, std::ostream* log = nullptr);

struct InferOptions {
  double score_threshold = 0.5;
  double nms_iou = 0.5;
  double mask_threshold = 0.5;
  std::vector<double> scale_fractions{0.25, 0.40, 0.55};
  int grid_stride_cells = 2;
  int chunk = 128;
  bool keep_maps = false;  // retain O_k / mask-logit maps per detection
};

struct Detection {
  Rect box;
  int class_id = 0;
  double score = 0.0;
  Tensor mask_probs;  // fused target-class probabilities on the head grid
  BinaryMask mask;    // pasted full-image mask
  std::vector<Point> keypoints;
  Tensor keypoint_map;  // O_k (keep_maps only)
  Tensor mask_map;      // target-class mask logits (keep_maps only)
};

struct DetectionResult {
  std::vector<Detection> detections;  // sorted by descending score
};

/// Grid proposals at three scales, box scoring and refinement, greedy NMS,
/// then mask/keypoint/fusion heads per surviving box.
DetectionResult infer(const Model& model, const Tensor& image, const InferOptions& options = {});

EvalReport evaluate(const Model& model, const std::vector<SceneRecord>& scenes,
                    const InferOptions& options = {});

struct AblationRow {
  std::string setting;
  double ap = 0.0;
  double ap50 = 0.0;
  bool failed = false;
  std::string error;
};

/// Trains and evaluates one model per grid cell (shared base seed). Cell
/// failures are recorded and the run continues.
std::vector<AblationRow> run_ablation(const std::string& grid_json_text,
                                      const TrainConfig& base,
                                      const std::vector<SceneRecord>& train_scenes,
                                      const std::vector<SceneRecord>& eval_scenes,
                                      std::ostream* progress = nullptr);

std::string ablation_table(const std::vector<AblationRow>& rows);
std::string ablation_json(const std::vector<AblationRow>& rows);

/// Writes one grayscale PNG pair (summed keypoint map, target-class mask
/// logits) per detection; darker pixels mean higher scores. Returns the
/// written paths.
std::vector<std::string> export_heatmaps(const Model& model, const Tensor& image,
                                         const std::string& out_dir,
                                         const InferOptions& options = {});

}  // namespace maskpoint
