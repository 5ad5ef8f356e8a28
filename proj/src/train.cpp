#include "maskpoint/train.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <ostream>
#include <sstream>

namespace maskpoint {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// TrainConfig JSON.
// ---------------------------------------------------------------------------

std::string TrainConfig::to_json(int indent) const {
  json j{{"learning_rate", learning_rate},
         {"momentum", momentum},
         {"weight_decay", weight_decay},
         {"batch_images", batch_images},
         {"iterations", iterations},
         {"lr_drop_fraction", lr_drop_fraction},
         {"lr_drop_factor", lr_drop_factor},
         {"flip_prob", flip_prob},
         {"seed", seed},
         {"sampling", to_string(sampling)},
         {"corner_epsilon", corner_epsilon},
         {"fusion",
          {{"design", to_string(fusion.design)},
           {"reduction", to_string(fusion.reduction)},
           {"mode", to_string(fusion.mode)},
           {"k", fusion.k},
           {"use_center", fusion.use_center},
           {"alpha", fusion.alpha},
           {"enabled", fusion.enabled},
           {"center_in_fusion", fusion.center_in_fusion}}},
         {"proposals",
          {{"per_gt", proposals.per_gt},
           {"negatives", proposals.negatives},
           {"jitter_center", proposals.jitter_center},
           {"jitter_scale", json::array({proposals.jitter_scale_lo, proposals.jitter_scale_hi})}}},
         {"model",
          {{"classes", model.classes},
           {"feature_channels", model.feature_channels},
           {"roi_size", model.roi_size},
           {"mask_head_channels", model.mask_head_channels},
           {"keypoint_head_channels", model.keypoint_head_channels},
           {"paper_widths", model.paper_widths}}}};
  return indent >= 0 ? j.dump(indent) : j.dump();
}

TrainConfig TrainConfig::from_json_text(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("config: malformed JSON: ") + e.what());
  }
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.momentum = j.value("momentum", c.momentum);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_images = j.value("batch_images", c.batch_images);
  c.iterations = j.value("iterations", c.iterations);
  c.lr_drop_fraction = j.value("lr_drop_fraction", c.lr_drop_fraction);
  c.lr_drop_factor = j.value("lr_drop_factor", c.lr_drop_factor);
  c.flip_prob = j.value("flip_prob", c.flip_prob);
  c.seed = j.value("seed", c.seed);
  if (j.contains("sampling"))
    c.sampling = j["sampling"] == "corner" ? SamplingKind::corner : SamplingKind::uniform;
  c.corner_epsilon = j.value("corner_epsilon", c.corner_epsilon);
  if (j.contains("fusion")) {
    const json& f = j["fusion"];
    if (f.contains("design")) c.fusion.design = fusion_design_from_string(f["design"]);
    if (f.contains("reduction")) c.fusion.reduction = reduction_from_string(f["reduction"]);
    if (f.contains("mode")) c.fusion.mode = fuse_mode_from_string(f["mode"]);
    c.fusion.k = f.value("k", c.fusion.k);
    c.fusion.use_center = f.value("use_center", c.fusion.use_center);
    c.fusion.alpha = f.value("alpha", c.fusion.alpha);
    c.fusion.enabled = f.value("enabled", c.fusion.enabled);
    c.fusion.center_in_fusion = f.value("center_in_fusion", c.fusion.center_in_fusion);
  }
  if (j.contains("proposals")) {
    const json& p = j["proposals"];
    c.proposals.per_gt = p.value("per_gt", c.proposals.per_gt);
    c.proposals.negatives = p.value("negatives", c.proposals.negatives);
    c.proposals.jitter_center = p.value("jitter_center", c.proposals.jitter_center);
    if (p.contains("jitter_scale")) {
      c.proposals.jitter_scale_lo = p["jitter_scale"].at(0).get<double>();
      c.proposals.jitter_scale_hi = p["jitter_scale"].at(1).get<double>();
    }
  }
  if (j.contains("model")) {
    const json& m = j["model"];
    c.model.classes = m.value("classes", c.model.classes);
    c.model.feature_channels = m.value("feature_channels", c.model.feature_channels);
    c.model.roi_size = m.value("roi_size", c.model.roi_size);
    c.model.mask_head_channels = m.value("mask_head_channels", c.model.mask_head_channels);
    c.model.keypoint_head_channels =
        m.value("keypoint_head_channels", c.model.keypoint_head_channels);
    c.model.paper_widths = m.value("paper_widths", c.model.paper_widths);
  }
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("config: cannot open " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return from_json_text(buf.str());
}

// ---------------------------------------------------------------------------
// Proposals and targets.
// ---------------------------------------------------------------------------

Eigen::Vector4d encode_box_deltas(const Rect& proposal, const Rect& gt) {
  const double pcx = proposal.left + 0.5 * proposal.width;
  const double pcy = proposal.top + 0.5 * proposal.height;
  const double gcx = gt.left + 0.5 * gt.width;
  const double gcy = gt.top + 0.5 * gt.height;
  return {(gcx - pcx) / proposal.width, (gcy - pcy) / proposal.height,
          std::log(gt.width / proposal.width), std::log(gt.height / proposal.height)};
}

Rect apply_box_deltas(const Rect& proposal, const Eigen::Vector4d& deltas) {
  const double pcx = proposal.left + 0.5 * proposal.width;
  const double pcy = proposal.top + 0.5 * proposal.height;
  const double cx = pcx + deltas(0) * proposal.width;
  const double cy = pcy + deltas(1) * proposal.height;
  const double w = proposal.width * std::exp(deltas(2));
  const double h = proposal.height * std::exp(deltas(3));
  return {cy - 0.5 * h, cx - 0.5 * w, h, w};
}

ProposalSet sample_proposals(const std::vector<Rect>& gt_boxes, int image_size, int per_gt,
                             int negatives, std::uint64_t seed,
                             const ProposalSettings& settings) {
  if (per_gt < 1) throw CountError("sample_proposals: per_gt must be >= 1");
  Rng rng(mix_seed(seed, "proposals"));
  ProposalSet out;
  out.jitter_seed = seed;

  for (std::size_t g = 0; g < gt_boxes.size(); ++g) {
    const Rect& box = gt_boxes[g];
    for (int j = 0; j < per_gt; ++j) {
      bool accepted = false;
      for (int attempt = 0; attempt < 50 && !accepted; ++attempt) {
        const double dy = rng.uniform(-settings.jitter_center, settings.jitter_center) *
                          box.height;
        const double dx = rng.uniform(-settings.jitter_center, settings.jitter_center) *
                          box.width;
        const double sy = rng.uniform(settings.jitter_scale_lo, settings.jitter_scale_hi);
        const double sx = rng.uniform(settings.jitter_scale_lo, settings.jitter_scale_hi);
        const double h = box.height * sy, w = box.width * sx;
        const double cy = box.top + 0.5 * box.height + dy;
        const double cx = box.left + 0.5 * box.width + dx;
        const Rect cand = Rect{cy - 0.5 * h, cx - 0.5 * w, h, w}.clipped(image_size, image_size);
        if (cand.height >= 1.0 && cand.width >= 1.0 && box_iou(cand, box) >= 0.5) {
          out.proposals.push_back({cand, static_cast<int>(g)});
          accepted = true;
        }
      }
      if (!accepted) out.proposals.push_back({box, static_cast<int>(g)});
    }
  }

  for (int n = 0; n < negatives; ++n) {
    bool placed = false;
    for (int attempt = 0; attempt < 200 && !placed; ++attempt) {
      const double h = rng.uniform(0.15, 0.6) * image_size;
      const double w = rng.uniform(0.15, 0.6) * image_size;
      const Rect cand{rng.uniform(0.0, image_size - h), rng.uniform(0.0, image_size - w), h, w};
      bool clear = true;
      for (const Rect& gt : gt_boxes)
        if (box_iou(cand, gt) >= 0.5) {
          clear = false;
          break;
        }
      if (clear) {
        out.proposals.push_back({cand, -1});
        placed = true;
      }
    }
    if (!placed) ++out.skipped_negatives;
  }
  return out;
}

Tensor rasterize_mask_target(const BinaryMask& mask, const Rect& box, int resolution) {
  Tensor target({resolution, resolution});
  for (int i = 0; i < resolution; ++i) {
    const int r = std::clamp(
        static_cast<int>(std::floor(box.top + (i + 0.5) * box.height / resolution)), 0,
        mask.height() - 1);
    for (int j = 0; j < resolution; ++j) {
      const int c = std::clamp(
          static_cast<int>(std::floor(box.left + (j + 0.5) * box.width / resolution)), 0,
          mask.width() - 1);
      target(i, j) = mask.at(r, c) ? 1.0 : 0.0;
    }
  }
  return target;
}

namespace {

Tensor upsample2x_nearest(const Tensor& t) {
  const auto n = t.extent(0), m = t.extent(1);
  Tensor out({2 * n, 2 * m});
  for (Eigen::Index i = 0; i < 2 * n; ++i)
    for (Eigen::Index j = 0; j < 2 * m; ++j) out(i, j) = t(i / 2, j / 2);
  return out;
}

}  // namespace

std::vector<RoiTarget> assign_targets(const ProposalSet& proposals,
                                      const std::vector<InstanceAnnotation>& annotations,
                                      const ModelConfig& config) {
  const FusionConfig& fusion = config.fusion;
  const int kp_res = config.keypoint_resolution();
  std::vector<RoiTarget> targets;
  targets.reserve(proposals.proposals.size());

  for (const Proposal& p : proposals.proposals) {
    RoiTarget t;
    if (p.matched_gt < 0) {
      t.class_target = config.classes;
      targets.push_back(std::move(t));
      continue;
    }
    const InstanceAnnotation& ann = annotations.at(static_cast<std::size_t>(p.matched_gt));
    t.foreground = true;
    t.class_target = ann.class_id;
    t.box_deltas = encode_box_deltas(p.box, ann.box);
    if (config.fused_resolution() != config.mask_resolution()) {
      // Design c: the loss runs at 56x56 against the nearest-upsampled target.
      t.mask = upsample2x_nearest(rasterize_mask_target(ann.mask, p.box,
                                                        config.mask_resolution()));
    } else {
      t.mask = rasterize_mask_target(ann.mask, p.box, config.fused_resolution());
    }

    if (fusion.alpha > 0.0) {
      if (!ann.contour_points)
        throw MissingLabels("assign_targets: contour_points required when alpha > 0");
      const ContourPointSet& src = *ann.contour_points;
      if (static_cast<int>(src.points.size()) != fusion.k)
        throw MissingLabels("assign_targets: contour label k does not match the configuration");
      if (fusion.use_center && !src.center)
        throw MissingLabels("assign_targets: center point required when use_center is set");

      ContourPointSet clamped = src;
      if (!fusion.use_center) clamped.center.reset();
      const auto clamp_point = [&](Point& q) {
        // pixel-index bounds of the edge-coordinate box
        const Point orig = q;
        q.x() = std::clamp(q.x(), p.box.top - 0.5, p.box.bottom() - 0.5);
        q.y() = std::clamp(q.y(), p.box.left - 0.5, p.box.right() - 0.5);
        if (q != orig) ++t.clamped_points;
      };
      for (Point& q : clamped.points) clamp_point(q);
      if (clamped.center) clamp_point(*clamped.center);
      t.kp_cells = encode_heatmaps(clamped, p.box, kp_res).cells;
    }
    targets.push_back(std::move(t));
  }
  return targets;
}

// ---------------------------------------------------------------------------
// Horizontal flip.
// ---------------------------------------------------------------------------

namespace {

Tensor flip_image_columns(const Tensor& image) {
  const auto h = image.extent(0), w = image.extent(1), c = image.extent(2);
  Tensor out({h, w, c});
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index col = 0; col < w; ++col)
      for (Eigen::Index ch = 0; ch < c; ++ch) out(r, col, ch) = image(r, w - 1 - col, ch);
  return out;
}

BinaryMask flip_mask_columns(const BinaryMask& mask) {
  BinaryMask out(mask.height(), mask.width());
  for (int r = 0; r < mask.height(); ++r)
    for (int c = 0; c < mask.width(); ++c) out.at(r, c) = mask.at(r, mask.width() - 1 - c);
  return out;
}

ContourPointSet flip_point_set(const ContourPointSet& set, int width) {
  ContourPointSet out = set;
  for (Point& p : out.points) p.y() = (width - 1) - p.y();
  // Mirroring reverses the winding; restore clockwise order and re-anchor at
  // the topmost-then-leftmost sampled point.
  std::reverse(out.points.begin(), out.points.end());
  std::size_t anchor = 0;
  for (std::size_t i = 1; i < out.points.size(); ++i) {
    const Point& a = out.points[i];
    const Point& b = out.points[anchor];
    if (a.x() < b.x() || (a.x() == b.x() && a.y() < b.y())) anchor = i;
  }
  std::rotate(out.points.begin(), out.points.begin() + static_cast<std::ptrdiff_t>(anchor),
              out.points.end());
  if (out.center) out.center->y() = (width - 1) - out.center->y();
  return out;
}

}  // namespace

SceneRecord flip_scene(const SceneRecord& scene) {
  SceneRecord out;
  out.scene_id = scene.scene_id;
  out.seed = scene.seed;
  out.image = flip_image_columns(scene.image);
  const int width = static_cast<int>(scene.image.extent(1));
  for (const InstanceAnnotation& inst : scene.instances) {
    InstanceAnnotation flipped;
    flipped.class_id = inst.class_id;
    flipped.mask = flip_mask_columns(inst.mask);
    flipped.box = tight_box(flipped.mask);
    if (inst.contour_points) flipped.contour_points = flip_point_set(*inst.contour_points, width);
    out.instances.push_back(std::move(flipped));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer and training loop.
// ---------------------------------------------------------------------------

void SgdOptimizer::step(ParamStore& params, double lr) {
  for (auto& [name, node] : params.entries()) {
    auto [it, inserted] = velocity.try_emplace(name, Tensor::zeros(node->value.shape()));
    Tensor& v = it->second;
    if (node->has_grad())
      v.array() = momentum * v.array() +
                  (node->grad.array() + weight_decay * node->value.array());
    else
      v.array() = momentum * v.array() + weight_decay * node->value.array();
    node->value.array() -= lr * v.array();
  }
}

namespace {

NodePtr zero_scalar() { return constant(Tensor({1})); }

struct LossNodes {
  NodePtr total;
  LossBreakdown breakdown;
};

LossNodes forward_losses(const Model& model, const TrainBatch& batch, double alpha) {
  const ModelConfig& mc = model.config();
  NodePtr images = constant(batch.images);
  NodePtr features = model.backbone_forward(images);
  NodePtr rois = roi_bilinear_stack(features, batch.rois, mc.roi_size, 4.0);
  auto [cls_logits, box_deltas] = model.box_head_forward(rois);

  std::vector<int> cls_targets;
  std::vector<Eigen::Index> fg;
  std::vector<int> fg_classes;
  for (std::size_t i = 0; i < batch.targets.size(); ++i) {
    cls_targets.push_back(batch.targets[i].class_target);
    if (batch.targets[i].foreground) {
      fg.push_back(static_cast<Eigen::Index>(i));
      fg_classes.push_back(batch.targets[i].class_target);
    }
  }
  NodePtr l_cls = softmax_ce(cls_logits, cls_targets);

  NodePtr l_box = zero_scalar(), l_mask = zero_scalar(), l_kp = zero_scalar();
  if (!fg.empty()) {
    Tensor delta_targets({static_cast<Eigen::Index>(fg.size()), 4});
    for (std::size_t i = 0; i < fg.size(); ++i)
      for (int q = 0; q < 4; ++q)
        delta_targets(static_cast<Eigen::Index>(i), q) =
            batch.targets[static_cast<std::size_t>(fg[i])].box_deltas(q);
    l_box = smooth_l1(gather_deltas(select_rows(box_deltas, fg), fg_classes), delta_targets);

    NodePtr fg_rois = select_rows(rois, fg);
    NodePtr mask_logits = model.mask_head_forward(fg_rois);
    NodePtr fused = mask_logits;
    NodePtr kp_logits;
    if (mc.with_keypoint_branch && (mc.fusion.enabled || alpha > 0.0)) {
      kp_logits = model.keypoint_head_forward(fg_rois);
      if (mc.fusion.enabled) fused = model.fuse(kp_logits, mask_logits).fused;
    }

    const auto n = fused->value.extent(1);
    Tensor mask_targets({static_cast<Eigen::Index>(fg.size()), n, n});
    for (std::size_t i = 0; i < fg.size(); ++i) {
      const Tensor& m = batch.targets[static_cast<std::size_t>(fg[i])].mask;
      std::copy(m.data(), m.data() + m.size(),
                mask_targets.data() + static_cast<Eigen::Index>(i) * n * n);
    }
    l_mask = sigmoid_bce_mean(gather_channel(fused, fg_classes), mask_targets);

    if (alpha > 0.0 && kp_logits) {
      std::vector<std::vector<std::pair<int, int>>> cells;
      for (const auto idx : fg)
        cells.push_back(batch.targets[static_cast<std::size_t>(idx)].kp_cells);
      l_kp = spatial_softmax_ce(kp_logits, cells);
    }
  }

  NodePtr total = add(add(l_cls, l_box), l_mask);
  if (alpha > 0.0) total = add(total, scale(l_kp, alpha));
  LossNodes out;
  out.total = total;
  out.breakdown = total_loss(l_cls->value(0), l_box->value(0), l_mask->value(0), l_kp->value(0),
                             alpha);
  return out;
}

}  // namespace

TrainBatch prepare_batch(const std::vector<SceneRecord>& scenes,
                         const std::vector<std::size_t>& indices, const TrainConfig& config,
                         int iteration) {
  if (indices.empty()) throw CountError("prepare_batch: empty batch");
  const ModelConfig mc = config.model_config();
  const auto h = scenes[indices[0]].image.extent(0), w = scenes[indices[0]].image.extent(1);

  TrainBatch batch;
  batch.images = Tensor({static_cast<Eigen::Index>(indices.size()), h, w, 3});
  for (std::size_t j = 0; j < indices.size(); ++j) {
    const SceneRecord& source = scenes[indices[j]];
    if (source.image.extent(0) != h || source.image.extent(1) != w)
      throw ShapeError("prepare_batch: scenes in a batch must share one size");
    const std::uint64_t slot =
        static_cast<std::uint64_t>(iteration) * indices.size() + j;
    Rng flip_rng(mix_seed(mix_seed(config.seed, "flip"), slot));
    const bool flip = flip_rng.bernoulli(config.flip_prob);
    const SceneRecord scene = flip ? flip_scene(source) : source;

    std::copy(scene.image.data(), scene.image.data() + scene.image.size(),
              batch.images.data() + static_cast<Eigen::Index>(j) * h * w * 3);

    std::vector<Rect> gt_boxes;
    for (const auto& inst : scene.instances) gt_boxes.push_back(inst.box);
    const ProposalSet pset =
        sample_proposals(gt_boxes, static_cast<int>(h), config.proposals.per_gt,
                         config.proposals.negatives,
                         mix_seed(mix_seed(config.seed, "jitter"), slot), config.proposals);
    std::vector<RoiTarget> targets = assign_targets(pset, scene.instances, mc);
    for (std::size_t p = 0; p < pset.proposals.size(); ++p) {
      batch.rois.push_back({static_cast<Eigen::Index>(j), pset.proposals[p].box});
      batch.targets.push_back(std::move(targets[p]));
    }
  }
  return batch;
}

LossBreakdown train_step(Model& model, SgdOptimizer& optimizer, const TrainBatch& batch,
                         double alpha, double lr) {
  model.params().zero_grads();
  LossNodes nodes = forward_losses(model, batch, alpha);
  if (!nodes.breakdown.finite()) throw DivergedError(nodes.breakdown);
  backward(nodes.total);
  optimizer.step(model.params(), lr);
  return nodes.breakdown;
}

std::vector<TrainLogEntry> train_model(Model& model, const std::vector<SceneRecord>& scenes,
                                       const TrainConfig& config, std::ostream* log) {
  if (scenes.empty()) throw CountError("train_model: no scenes");
  SgdOptimizer optimizer{config.momentum, config.weight_decay, {}};
  const std::size_t n = scenes.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::uint64_t epoch = ~std::uint64_t{0};

  const auto shuffled = [&](std::uint64_t e) {
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(mix_seed(mix_seed(config.seed, "order"), e));
    for (std::size_t i = n; i > 1; --i)
      std::swap(perm[i - 1],
                perm[static_cast<std::size_t>(rng.uniform_int(0, static_cast<long>(i) - 1))]);
    return perm;
  };

  const int drop_at = static_cast<int>(config.lr_drop_fraction * config.iterations);
  std::vector<TrainLogEntry> entries;
  entries.reserve(static_cast<std::size_t>(config.iterations));
  for (int it = 0; it < config.iterations; ++it) {
    std::vector<std::size_t> indices;
    for (int j = 0; j < config.batch_images; ++j) {
      const std::uint64_t pos =
          static_cast<std::uint64_t>(it) * config.batch_images + static_cast<std::uint64_t>(j);
      const std::uint64_t e = pos / n;
      if (e != epoch) {
        order = shuffled(e);
        epoch = e;
      }
      indices.push_back(order[pos % n]);
    }
    const double lr =
        config.learning_rate * (it >= drop_at ? config.lr_drop_factor : 1.0);
    const TrainBatch batch = prepare_batch(scenes, indices, config, it);
    TrainLogEntry entry;
    entry.iteration = it;
    entry.lr = lr;
    entry.loss = train_step(model, optimizer, batch, config.fusion.alpha, lr);
    if (log) {
      json j = json::parse(entry.loss.to_json_line());
      j["iteration"] = it;
      j["lr"] = lr;
      (*log) << j.dump() << '\n';
    }
    entries.push_back(entry);
  }
  return entries;
}

// ---------------------------------------------------------------------------
// Inference.
// ---------------------------------------------------------------------------

namespace {

Tensor slice_row(const Tensor& t, Eigen::Index row) {
  std::vector<Eigen::Index> shape(t.shape().begin() + 1, t.shape().end());
  Tensor out(shape);
  const Eigen::Index stride = out.size();
  std::copy(t.data() + row * stride, t.data() + (row + 1) * stride, out.data());
  return out;
}

BinaryMask paste_mask(const Tensor& probs, const Rect& box, int height, int width,
                      double threshold) {
  // Pixel r sits at edge coordinate r + 0.5; only pixels whose centers fall
  // inside the box receive mask values.
  BinaryMask out(height, width);
  const auto n = probs.extent(0);
  const int r0 = std::max(0, static_cast<int>(std::ceil(box.top - 0.5)));
  const int r1 = std::min(height - 1, static_cast<int>(std::floor(box.bottom() - 0.5)));
  const int c0 = std::max(0, static_cast<int>(std::ceil(box.left - 0.5)));
  const int c1 = std::min(width - 1, static_cast<int>(std::floor(box.right() - 0.5)));
  for (int r = r0; r <= r1; ++r) {
    const double fy =
        std::clamp((r + 0.5 - box.top) / box.height * n - 0.5, 0.0, static_cast<double>(n - 1));
    const Eigen::Index y0 = std::min(static_cast<Eigen::Index>(fy), n - 2 >= 0 ? n - 2 : 0);
    const double ty = fy - y0;
    for (int c = c0; c <= c1; ++c) {
      const double fx =
          std::clamp((c + 0.5 - box.left) / box.width * n - 0.5, 0.0, static_cast<double>(n - 1));
      const Eigen::Index x0 = std::min(static_cast<Eigen::Index>(fx), n - 2 >= 0 ? n - 2 : 0);
      const double tx = fx - x0;
      const double v = (1 - ty) * ((1 - tx) * probs(y0, x0) + tx * probs(y0, x0 + 1)) +
                       ty * ((1 - tx) * probs(y0 + 1, x0) + tx * probs(y0 + 1, x0 + 1));
      if (v > threshold) out.at(r, c) = 1;
    }
  }
  return out;
}

struct ScoredBox {
  Rect box;
  int class_id;
  double score;
};

}  // namespace

DetectionResult infer(const Model& model, const Tensor& image, const InferOptions& options) {
  NoGradGuard no_grad;
  const ModelConfig& mc = model.config();
  if (image.rank() != 3 || image.extent(2) != 3) throw ShapeError("infer: expected [H, W, 3]");
  const auto h = image.extent(0), w = image.extent(1);

  NodePtr images = constant(image.reshaped({1, h, w, 3}));
  NodePtr features = model.backbone_forward(images);
  const auto fh = features->value.extent(1), fw = features->value.extent(2);

  std::vector<Rect> candidates;
  for (const double fraction : options.scale_fractions) {
    const double side = fraction * std::min(h, w);
    for (Eigen::Index cy = 0; cy < fh; cy += options.grid_stride_cells)
      for (Eigen::Index cx = 0; cx < fw; cx += options.grid_stride_cells) {
        const double py = (cy + 0.5) * 4.0, px = (cx + 0.5) * 4.0;
        const Rect box = Rect{py - side / 2, px - side / 2, side, side}
                             .clipped(static_cast<double>(h), static_cast<double>(w));
        if (box.height >= 2.0 && box.width >= 2.0) candidates.push_back(box);
      }
  }

  const int classes = mc.classes;
  std::vector<ScoredBox> scored;
  for (std::size_t begin = 0; begin < candidates.size();
       begin += static_cast<std::size_t>(options.chunk)) {
    const std::size_t end =
        std::min(candidates.size(), begin + static_cast<std::size_t>(options.chunk));
    std::vector<RoiRef> rois;
    for (std::size_t i = begin; i < end; ++i) rois.push_back({0, candidates[i]});
    NodePtr stacked = roi_bilinear_stack(features, rois, mc.roi_size, 4.0);
    auto [cls_logits, box_deltas] = model.box_head_forward(stacked);
    Tensor probs = cls_logits->value;
    softmax_rows_inplace(probs);
    for (std::size_t i = begin; i < end; ++i) {
      const Eigen::Index row = static_cast<Eigen::Index>(i - begin);
      int best_class = 0;
      double best = probs(row, 0);
      for (int c = 1; c < classes; ++c)
        if (probs(row, c) > best) {
          best = probs(row, c);
          best_class = c;
        }
      if (best <= options.score_threshold) continue;
      Eigen::Vector4d deltas;
      for (int q = 0; q < 4; ++q) deltas(q) = box_deltas->value(row, 4 * best_class + q);
      const Rect refined = apply_box_deltas(candidates[i], deltas)
                               .clipped(static_cast<double>(h), static_cast<double>(w));
      if (refined.height < 2.0 || refined.width < 2.0) continue;
      scored.push_back({refined, best_class, best});
    }
  }

  std::stable_sort(scored.begin(), scored.end(),
                   [](const ScoredBox& a, const ScoredBox& b) { return a.score > b.score; });
  std::vector<ScoredBox> survivors;
  for (const ScoredBox& s : scored) {
    bool keep = true;
    for (const ScoredBox& kept : survivors)
      if (kept.class_id == s.class_id && box_iou(kept.box, s.box) >= options.nms_iou) {
        keep = false;
        break;
      }
    if (keep) survivors.push_back(s);
  }

  DetectionResult result;
  if (survivors.empty()) return result;

  std::vector<RoiRef> rois;
  for (const ScoredBox& s : survivors) rois.push_back({0, s.box});
  NodePtr stacked = roi_bilinear_stack(features, rois, mc.roi_size, 4.0);
  NodePtr mask_logits = model.mask_head_forward(stacked);
  NodePtr fused = mask_logits;
  NodePtr kp_logits;
  Tensor keypoint_map;
  NodePtr keypoint_map_node;
  if (mc.with_keypoint_branch) {
    kp_logits = model.keypoint_head_forward(stacked);
    if (mc.fusion.enabled) {
      const Model::FusionOut out = model.fuse(kp_logits, mask_logits);
      fused = out.fused;
      keypoint_map_node = out.keypoint_map;
    }
  }
  const Tensor fused_probs = sigmoid(fused->value);

  for (std::size_t i = 0; i < survivors.size(); ++i) {
    const auto row = static_cast<Eigen::Index>(i);
    Detection det;
    det.box = survivors[i].box;
    det.class_id = survivors[i].class_id;
    det.score = survivors[i].score;

    const auto n = fused_probs.extent(1);
    det.mask_probs = Tensor({n, n});
    for (Eigen::Index y = 0; y < n; ++y)
      for (Eigen::Index x = 0; x < n; ++x)
        det.mask_probs(y, x) = fused_probs(row, y, x, det.class_id);
    det.mask = paste_mask(det.mask_probs, det.box, static_cast<int>(h), static_cast<int>(w),
                          options.mask_threshold);

    if (kp_logits) det.keypoints = decode_heatmaps(slice_row(kp_logits->value, row), det.box);
    if (options.keep_maps) {
      if (keypoint_map_node) {
        const Tensor ok = slice_row(keypoint_map_node->value, row);
        det.keypoint_map = ok.reshaped({ok.extent(0), ok.extent(1)});
      }
      const Tensor ml = slice_row(mask_logits->value, row);
      const auto mn = ml.extent(0);
      det.mask_map = Tensor({mn, mn});
      for (Eigen::Index y = 0; y < mn; ++y)
        for (Eigen::Index x = 0; x < mn; ++x) det.mask_map(y, x) = ml(y, x, det.class_id);
    }
    result.detections.push_back(std::move(det));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

EvalReport evaluate(const Model& model, const std::vector<SceneRecord>& scenes,
                    const InferOptions& options) {
  const int classes = model.config().classes;
  const int k = model.config().fusion.k;
  std::vector<std::vector<PredObject>> preds(scenes.size());
  std::vector<std::vector<GtObject>> gts(scenes.size());
  std::vector<std::vector<ContourPrediction>> contour_preds(scenes.size());
  std::vector<std::pair<int, int>> sizes(scenes.size());

  long pck_hits = 0, pck_total = 0;
  for (std::size_t img = 0; img < scenes.size(); ++img) {
    const SceneRecord& scene = scenes[img];
    sizes[img] = {static_cast<int>(scene.image.extent(0)),
                  static_cast<int>(scene.image.extent(1))};
    for (const InstanceAnnotation& inst : scene.instances)
      gts[img].push_back({inst.class_id, inst.mask});

    const DetectionResult result = infer(model, scene.image, options);
    std::vector<char> gt_used(scene.instances.size(), 0);
    for (const Detection& det : result.detections) {
      preds[img].push_back({det.class_id, det.score, det.mask});
      if (static_cast<int>(det.keypoints.size()) >= k && k >= 3)
        contour_preds[img].push_back(
            {det.class_id, det.score,
             std::vector<Point>(det.keypoints.begin(), det.keypoints.begin() + k)});

      // Greedy detection-to-GT pairing for PCK.
      double best_iou = 0.5;
      std::size_t best_gt = SIZE_MAX;
      for (std::size_t g = 0; g < scene.instances.size(); ++g) {
        if (gt_used[g]) continue;
        const double iou = mask_iou(det.mask, scene.instances[g].mask);
        if (iou >= best_iou && (best_gt == SIZE_MAX || iou > best_iou)) {
          best_iou = iou;
          best_gt = g;
        }
      }
      if (best_gt == SIZE_MAX) continue;
      gt_used[best_gt] = 1;
      const InstanceAnnotation& gt = scene.instances[best_gt];
      if (!gt.contour_points || det.keypoints.empty()) continue;
      std::vector<Point> gt_points = gt.contour_points->points;
      if (gt.contour_points->center) gt_points.push_back(*gt.contour_points->center);
      if (gt_points.size() != det.keypoints.size()) continue;
      const double radius = 0.05 * gt.box.diagonal();
      for (std::size_t q = 0; q < gt_points.size(); ++q) {
        pck_hits += (det.keypoints[q] - gt_points[q]).norm() <= radius ? 1 : 0;
        ++pck_total;
      }
    }
  }

  const ApSummary masks = mask_ap(preds, gts, classes);
  ApSummary contours;
  if (!scenes.empty())
    contours = contour_only_eval(contour_preds, gts, classes, sizes);

  EvalReport report;
  report.mask_ap = masks.ap;
  report.ap50 = masks.ap50;
  report.per_class = masks.per_class;
  report.keypoint_pck =
      pck_total > 0 ? static_cast<double>(pck_hits) / static_cast<double>(pck_total) : 0.0;
  report.contour_only_ap = contours.ap;
  return report;
}

// ---------------------------------------------------------------------------
// Ablation runner.
// ---------------------------------------------------------------------------

std::vector<AblationRow> run_ablation(const std::string& grid_json_text,
                                      const TrainConfig& base,
                                      const std::vector<SceneRecord>& train_scenes,
                                      const std::vector<SceneRecord>& eval_scenes,
                                      std::ostream* progress) {
  json grid;
  try {
    grid = json::parse(grid_json_text);
  } catch (const json::exception& e) {
    throw FormatError(std::string("ablate: malformed grid JSON: ") + e.what());
  }
  if (!grid.contains("cells") || !grid["cells"].is_array())
    throw FormatError("ablate: grid must contain a 'cells' array");

  const json base_json = json::parse(base.to_json());
  std::vector<AblationRow> rows;
  for (const json& cell : grid["cells"]) {
    AblationRow row;
    row.setting = cell.value("name", "cell" + std::to_string(rows.size()));
    try {
      json patch = cell;
      patch.erase("name");
      json merged = base_json;
      merged.merge_patch(patch);
      const TrainConfig config = TrainConfig::from_json_text(merged.dump());

      std::vector<SceneRecord> train_copy = train_scenes;
      std::vector<SceneRecord> eval_copy = eval_scenes;
      ensure_contour_labels(train_copy, config.label_options());
      ensure_contour_labels(eval_copy, config.label_options());

      Model model(config.model_config(), mix_seed(config.seed, "init"));
      if (progress)
        (*progress) << "[ablate] training cell '" << row.setting << "' ("
                    << config.iterations << " iterations)\n";
      train_model(model, train_copy, config, nullptr);
      const EvalReport report = evaluate(model, eval_copy);
      row.ap = report.mask_ap;
      row.ap50 = report.ap50;
    } catch (const std::exception& e) {
      row.failed = true;
      row.error = e.what();
      if (progress) (*progress) << "[ablate] cell '" << row.setting << "' failed: " << e.what()
                                << '\n';
    }
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::size_t name_width = 7;  // "Setting"
  for (const AblationRow& row : rows) name_width = std::max(name_width, row.setting.size());
  std::ostringstream os;
  os << std::left << std::setw(static_cast<int>(name_width + 2)) << "Setting" << std::right
     << std::setw(8) << "AP" << std::setw(8) << "AP50" << '\n';
  for (const AblationRow& row : rows) {
    os << std::left << std::setw(static_cast<int>(name_width + 2)) << row.setting;
    if (row.failed) {
      os << std::right << std::setw(8) << "failed" << std::setw(8) << "-" << '\n';
    } else {
      os << std::right << std::setw(8) << std::fixed << std::setprecision(3) << row.ap
         << std::setw(8) << row.ap50 << '\n';
    }
  }
  return os.str();
}

std::string ablation_json(const std::vector<AblationRow>& rows) {
  json out = json::array();
  for (const AblationRow& row : rows) {
    json r{{"setting", row.setting}, {"AP", row.ap}, {"AP50", row.ap50}};
    if (row.failed) r["error"] = row.error;
    out.push_back(std::move(r));
  }
  return out.dump(2);
}

// ---------------------------------------------------------------------------
// Heatmap export.
// ---------------------------------------------------------------------------

namespace {

ImageU8 to_heat_image(const Tensor& map) {
  // Min-max normalize; darker pixels mean higher scores. A constant map
  // normalizes to all zeros (uniform output).
  const auto h = map.extent(0), w = map.extent(1);
  const double lo = map.array().minCoeff(), hi = map.array().maxCoeff();
  ImageU8 img;
  img.height = static_cast<int>(h);
  img.width = static_cast<int>(w);
  img.channels = 1;
  img.data.resize(static_cast<std::size_t>(h * w));
  for (Eigen::Index i = 0; i < map.size(); ++i) {
    const double norm = hi > lo ? (map(i) - lo) / (hi - lo) : 0.0;
    img.data[static_cast<std::size_t>(i)] =
        static_cast<std::uint8_t>(std::lround(255.0 * (1.0 - norm)));
  }
  return img;
}

}  // namespace

std::vector<std::string> export_heatmaps(const Model& model, const Tensor& image,
                                         const std::string& out_dir,
                                         const InferOptions& options) {
  InferOptions opts = options;
  opts.keep_maps = true;
  const DetectionResult result = infer(model, image, opts);
  fs::create_directories(out_dir);
  std::vector<std::string> written;
  for (std::size_t i = 0; i < result.detections.size(); ++i) {
    const Detection& det = result.detections[i];
    char tag[16];
    std::snprintf(tag, sizeof(tag), "det_%02zu", i);
    if (det.keypoint_map.size() > 0) {
      const std::string path = (fs::path(out_dir) / (std::string(tag) + "_keypoints.png")).string();
      write_png(path, to_heat_image(det.keypoint_map));
      written.push_back(path);
    }
    if (det.mask_map.size() > 0) {
      const std::string path = (fs::path(out_dir) / (std::string(tag) + "_mask.png")).string();
      write_png(path, to_heat_image(det.mask_map));
      written.push_back(path);
    }
  }
  return written;
}

}  // namespace maskpoint
