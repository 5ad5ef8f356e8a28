#pragma once

#include <string>
#include <unordered_map>
#include <vector>

#include "maskpoint/nn_ops.hpp"

namespace maskpoint {

enum class FusionDesign { a, b, c, d };
enum class ReductionKind { maxpool, avgpool, strided_conv };

const char* to_string(FusionDesign d);
const char* to_string(ReductionKind r);
const char* to_string(FuseMode m);
FusionDesign fusion_design_from_string(const std::string& s);
ReductionKind reduction_from_string(const std::string& s);
FuseMode fuse_mode_from_string(const std::string& s);

/// Structural variant of the keypoint/mask feature fusion plus the keypoint
/// task settings it implies.
struct FusionConfig {
  FusionDesign design = FusionDesign::b;
  ReductionKind reduction = ReductionKind::strided_conv;
  FuseMode mode = FuseMode::multiply;
  int k = 100;
  bool use_center = true;
  double alpha = 0.5;
  bool enabled = true;
  // Whether the center channel joins the channel-wise sum feeding the fusion
  // (it always participates in the keypoint loss).
  bool center_in_fusion = true;

  int keypoint_channels() const { return k + (use_center ? 1 : 0); }
  int summed_channels() const {
    return (use_center && !center_in_fusion) ? k : keypoint_channels();
  }
};

struct ModelConfig {
  int classes = 4;
  int feature_channels = 64;
  int roi_size = 14;
  int mask_head_channels = 64;      // 256 in the full-size configuration
  int keypoint_head_channels = 64;  // 512 in the full-size configuration
  bool paper_widths = false;
  bool with_keypoint_branch = true;
  FusionConfig fusion;

  int effective_mask_channels() const { return paper_widths ? 256 : mask_head_channels; }
  int effective_keypoint_channels() const {
    return paper_widths ? 512 : keypoint_head_channels;
  }
  int mask_resolution() const { return 2 * roi_size; }
  int keypoint_resolution() const {
    return fusion.design == FusionDesign::d ? 2 * roi_size : 4 * roi_size;
  }
  /// Resolution the fused mask logits (and the mask loss) live at.
  int fused_resolution() const {
    return fusion.enabled && fusion.design == FusionDesign::c ? 4 * roi_size
                                                              : 2 * roi_size;
  }

  std::string digest_string() const;
  std::uint64_t digest() const { return fnv1a(digest_string()); }
};

/// Named differentiable leaves in fixed registration order.
class ParamStore {
 public:
  NodePtr create(const std::string& name, std::vector<Eigen::Index> shape, double init_bound,
                 std::uint64_t seed);
  NodePtr get(const std::string& name) const;
  const std::vector<std::pair<std::string, NodePtr>>& entries() const { return entries_; }
  void zero_grads();
  long parameter_count() const;

 private:
  std::vector<std::pair<std::string, NodePtr>> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct HeadOutputs {
  NodePtr class_logits;      // [R, C+1]
  NodePtr box_deltas;        // [R, 4C]
  NodePtr mask_logits;       // [Rf, N, N, C]
  NodePtr keypoint_logits;   // [Rf, M, M, k(+1)]
  NodePtr fused_mask_logits; // [Rf, N, N, C] ([Rf, 2N, 2N, C] under design c)
  NodePtr fusion_map;        // O_k, the reduced single-channel keypoint map
};

class Model {
 public:
  Model(ModelConfig config, std::uint64_t init_seed);

  const ModelConfig& config() const { return config_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// [B, H, W, 3] -> [B, H/4, W/4, F]; H and W must be divisible by 4.
  NodePtr backbone_forward(const NodePtr& images) const;

  /// [R, S, S, F] -> ([R, C+1], [R, 4C]).
  std::pair<NodePtr, NodePtr> box_head_forward(const NodePtr& rois) const;

  /// [R, S, S, F] -> [R, 2S, 2S, C] mask logits (no activation).
  NodePtr mask_head_forward(const NodePtr& rois) const;

  /// [R, S, S, F] -> [R, M, M, k(+1)] keypoint logits, M per fusion design.
  NodePtr keypoint_head_forward(const NodePtr& rois) const;

  struct FusionOut {
    NodePtr fused;
    NodePtr keypoint_map;  // O_k
  };
  FusionOut fuse(const NodePtr& keypoint_logits, const NodePtr& mask_logits) const;

  void save_checkpoint(const std::string& path) const;
  void load_checkpoint(const std::string& path);

 private:
  NodePtr conv_relu(const NodePtr& x, const std::string& name, Eigen::Index stride) const;

  ModelConfig config_;
  ParamStore params_;
};

constexpr char kCheckpointMagic[] = "MPRCNN1";

}  // namespace maskpoint
