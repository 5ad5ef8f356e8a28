#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <sstream>

#include "maskpoint/train.hpp"
#include "support.hpp"

using namespace maskpoint;
using test::random_tensor;

namespace {

/// Small, fast configuration used throughout this suite: 64 px scenes and a
/// slim model.
TrainConfig tiny_config() {
  TrainConfig c;
  c.batch_images = 2;
  c.iterations = 12;
  c.fusion.k = 8;
  c.model.classes = 4;
  c.model.feature_channels = 16;
  c.model.mask_head_channels = 12;
  c.model.keypoint_head_channels = 12;
  c.model.roi_size = 7;
  c.proposals.per_gt = 1;
  c.proposals.negatives = 2;
  c.seed = 5;
  return c;
}

std::vector<SceneRecord> tiny_scenes(int count, const TrainConfig& config,
                                     std::uint64_t seed = 21) {
  SceneConfig sc;
  sc.size = 64;
  sc.min_scale = 10.0;
  sc.max_scale = 16.0;
  std::vector<SceneRecord> scenes = generate_dataset(sc, count, seed);
  ensure_contour_labels(scenes, config.label_options());
  return scenes;
}

}  // namespace

TEST_CASE("box deltas: encode/apply round trip, identity at equality") {
  const Rect proposal{10, 20, 30, 40};
  CHECK(encode_box_deltas(proposal, proposal) == Eigen::Vector4d::Zero());

  Rng rng(3);
  for (int trial = 0; trial < 30; ++trial) {
    const Rect p{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(5, 40),
                 rng.uniform(5, 40)};
    const Rect g{rng.uniform(0, 50), rng.uniform(0, 50), rng.uniform(5, 40),
                 rng.uniform(5, 40)};
    const Rect back = apply_box_deltas(p, encode_box_deltas(p, g));
    CHECK(back.top == doctest::Approx(g.top).epsilon(1e-9));
    CHECK(back.left == doctest::Approx(g.left).epsilon(1e-9));
    CHECK(back.height == doctest::Approx(g.height).epsilon(1e-9));
    CHECK(back.width == doctest::Approx(g.width).epsilon(1e-9));
  }
}

TEST_CASE("sample_proposals: zero jitter reproduces GT, invariants hold") {
  const std::vector<Rect> gts{{10, 10, 20, 16}, {40, 30, 12, 18}};
  ProposalSettings zero{1, 0, 0.0, 1.0, 1.0};
  const ProposalSet exact = sample_proposals(gts, 64, 1, 0, 9, zero);
  REQUIRE(exact.proposals.size() == 2);
  for (std::size_t g = 0; g < 2; ++g) {
    CHECK(exact.proposals[g].matched_gt == static_cast<int>(g));
    CHECK(box_iou(exact.proposals[g].box, gts[g]) == doctest::Approx(1.0));
  }

  const ProposalSet jittered = sample_proposals(gts, 64, 3, 4, 9);
  int fg = 0, bg = 0;
  for (const Proposal& p : jittered.proposals) {
    if (p.matched_gt >= 0) {
      ++fg;
      CHECK(box_iou(p.box, gts[static_cast<std::size_t>(p.matched_gt)]) >= 0.5);
    } else {
      ++bg;
      for (const Rect& gt : gts) CHECK(box_iou(p.box, gt) < 0.5);
    }
  }
  CHECK(fg == 6);
  CHECK(bg + jittered.skipped_negatives == 4);

  // determinism
  const ProposalSet again = sample_proposals(gts, 64, 3, 4, 9);
  REQUIRE(again.proposals.size() == jittered.proposals.size());
  for (std::size_t i = 0; i < again.proposals.size(); ++i) {
    CHECK(again.proposals[i].box.top == jittered.proposals[i].box.top);
    CHECK(again.proposals[i].box.left == jittered.proposals[i].box.left);
    CHECK(again.proposals[i].matched_gt == jittered.proposals[i].matched_gt);
  }
}

TEST_CASE("rasterize_mask_target matches an independent nearest-neighbor oracle") {
  Rng rng(17);
  ShapeSpec spec;
  spec.kind = ShapeKind::triangle;
  spec.scale = 14.0;
  spec.center = {24.0, 28.0};
  spec.rotation = 0.7;
  const BinaryMask mask = rasterize_shape(spec, 64, 64);
  const Rect box = tight_box(mask);
  const Tensor target = rasterize_mask_target(mask, box, 14);
  for (int i = 0; i < 14; ++i)
    for (int j = 0; j < 14; ++j) {
      const int r = std::clamp(
          static_cast<int>(std::floor(box.top + (i + 0.5) * box.height / 14.0)), 0, 63);
      const int c = std::clamp(
          static_cast<int>(std::floor(box.left + (j + 0.5) * box.width / 14.0)), 0, 63);
      CHECK(target(i, j) == (mask.at(r, c) ? 1.0 : 0.0));
    }
}

TEST_CASE("assign_targets: identity proposal, background rows, label errors") {
  TrainConfig config = tiny_config();
  const ModelConfig mc = config.model_config();
  std::vector<SceneRecord> scenes = tiny_scenes(1, config);
  const SceneRecord& scene = scenes[0];
  std::vector<Rect> gt_boxes;
  for (const auto& inst : scene.instances) gt_boxes.push_back(inst.box);

  ProposalSettings zero{1, 0, 0.0, 1.0, 1.0};
  ProposalSet pset = sample_proposals(gt_boxes, 64, 1, 1, 4, zero);
  const auto targets = assign_targets(pset, scene.instances, mc);
  REQUIRE(targets.size() == pset.proposals.size());
  for (std::size_t i = 0; i < targets.size(); ++i) {
    if (!targets[i].foreground) {
      CHECK(targets[i].class_target == mc.classes);
      CHECK(targets[i].kp_cells.empty());
      continue;
    }
    CHECK(targets[i].box_deltas == Eigen::Vector4d::Zero());
    CHECK(targets[i].class_target ==
          scene.instances[static_cast<std::size_t>(pset.proposals[i].matched_gt)].class_id);
    // identity proposal: target equals the downsampled GT mask exactly
    const auto& inst = scene.instances[static_cast<std::size_t>(pset.proposals[i].matched_gt)];
    const Tensor oracle = rasterize_mask_target(inst.mask, inst.box, mc.fused_resolution());
    CHECK((targets[i].mask.array() == oracle.array()).all());
    CHECK(static_cast<int>(targets[i].kp_cells.size()) == mc.fusion.keypoint_channels());
  }

  // missing labels with alpha > 0
  std::vector<InstanceAnnotation> unlabelled = scene.instances;
  for (auto& inst : unlabelled) inst.contour_points.reset();
  CHECK_THROWS_AS(assign_targets(pset, unlabelled, mc), MissingLabels);

  // label k mismatch
  std::vector<InstanceAnnotation> wrong_k = scene.instances;
  for (auto& inst : wrong_k) inst.contour_points->points.resize(3);
  CHECK_THROWS_AS(assign_targets(pset, wrong_k, mc), MissingLabels);

  // alpha = 0 tolerates missing labels
  TrainConfig no_kp = config;
  no_kp.fusion.alpha = 0.0;
  no_kp.fusion.enabled = false;
  const auto bare = assign_targets(pset, unlabelled, no_kp.model_config());
  for (const auto& t : bare) CHECK(t.kp_cells.empty());
}

TEST_CASE("assign_targets clamps outside points into jittered boxes") {
  TrainConfig config = tiny_config();
  std::vector<SceneRecord> scenes = tiny_scenes(1, config);
  const SceneRecord& scene = scenes[0];
  const InstanceAnnotation& inst = scene.instances[0];
  // a proposal strictly inside the GT box forces clamping of boundary points
  Rect small = inst.box;
  small.top += 2;
  small.left += 2;
  small.height -= 4;
  small.width -= 4;
  ProposalSet pset;
  pset.proposals.push_back({small, 0});
  const auto targets = assign_targets(pset, scene.instances, config.model_config());
  CHECK(targets[0].clamped_points > 0);
  for (const auto& [r, c] : targets[0].kp_cells) {
    CHECK(r >= 0);
    CHECK(r < config.model_config().keypoint_resolution());
  }
}

TEST_CASE("flip consistency: per-instance losses are unchanged with zero jitter") {
  // An asymmetric rotated triangle whose tight box has odd width: no sample
  // position or quantized cell sits on an exact half-pixel boundary, so the
  // mirrored targets match bit for bit. (A symmetric shape would put points
  // exactly on the quantization knife edge of the box center column.)
  SceneRecord scene;
  scene.scene_id = 0;
  scene.image = Tensor({64, 64, 3});
  ShapeSpec spec;
  spec.kind = ShapeKind::triangle;
  spec.scale = 12.0;
  spec.rotation = 0.7;
  spec.center = {29.0, 29.0};
  InstanceAnnotation inst;
  inst.class_id = 2;
  inst.mask = rasterize_shape(spec, 64, 64);
  inst.box = tight_box(inst.mask);
  scene.instances.push_back(std::move(inst));
  TrainConfig config = tiny_config();
  std::vector<SceneRecord> wrap{scene};
  ensure_contour_labels(wrap, config.label_options());
  const SceneRecord& orig = wrap[0];
  const SceneRecord flipped = flip_scene(orig);
  const ModelConfig mc = config.model_config();

  ProposalSettings zero{1, 0, 0.0, 1.0, 1.0};
  const auto t_orig = assign_targets(sample_proposals({orig.instances[0].box}, 64, 1, 0, 1, zero),
                                     orig.instances, mc);
  const auto t_flip =
      assign_targets(sample_proposals({flipped.instances[0].box}, 64, 1, 0, 1, zero),
                     flipped.instances, mc);

  // target equivariance: the flipped mask target is the mirrored target
  const Eigen::Index n = t_orig[0].mask.extent(0);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      CHECK(t_flip[0].mask(i, j) == t_orig[0].mask(i, n - 1 - j));

  // box deltas mirror exactly: tx negates, the rest are unchanged
  CHECK(t_flip[0].box_deltas(0) == -t_orig[0].box_deltas(0));
  CHECK(t_flip[0].box_deltas(1) == t_orig[0].box_deltas(1));
  CHECK(t_flip[0].box_deltas(2) == t_orig[0].box_deltas(2));
  CHECK(t_flip[0].box_deltas(3) == t_orig[0].box_deltas(3));

  // keypoint channels are a permutation of the mirrored cells
  const int m = mc.keypoint_resolution();
  REQUIRE(t_flip[0].kp_cells.size() == t_orig[0].kp_cells.size());
  std::vector<std::pair<int, int>> mirrored;
  for (const auto& [r, c] : t_orig[0].kp_cells) mirrored.emplace_back(r, m - 1 - c);
  std::vector<std::pair<int, int>> flipped_cells = t_flip[0].kp_cells;
  std::sort(mirrored.begin(), mirrored.end());
  std::sort(flipped_cells.begin(), flipped_cells.end());
  CHECK(mirrored == flipped_cells);

  // per-instance losses: mirrored logits against flipped targets match
  Rng rng(77);
  const int num_classes = mc.classes;
  Tensor mask_logits = random_tensor({n, n, num_classes}, rng);
  Tensor mirrored_logits({n, n, num_classes});
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j)
      for (int c = 0; c < num_classes; ++c)
        mirrored_logits(i, j, c) = mask_logits(i, n - 1 - j, c);
  CHECK(loss_mask(mirrored_logits, t_flip[0].mask, 2) ==
        doctest::Approx(loss_mask(mask_logits, t_orig[0].mask, 2)).epsilon(1e-12));

  // keypoint loss with channel permutation + spatial mirror
  const int channels = mc.fusion.keypoint_channels();
  std::vector<int> perm(static_cast<std::size_t>(channels), -1);
  for (std::size_t i = 0; i < t_flip[0].kp_cells.size(); ++i) {
    const auto [fr, fc] = t_flip[0].kp_cells[i];
    for (std::size_t j = 0; j < t_orig[0].kp_cells.size(); ++j)
      if (t_orig[0].kp_cells[j].first == fr && m - 1 - t_orig[0].kp_cells[j].second == fc) {
        perm[i] = static_cast<int>(j);
        break;
      }
    REQUIRE(perm[i] >= 0);
  }
  Tensor kp_logits = random_tensor({m, m, channels}, rng);
  Tensor kp_mirrored({m, m, channels});
  for (Eigen::Index i = 0; i < m; ++i)
    for (Eigen::Index j = 0; j < m; ++j)
      for (int c = 0; c < channels; ++c)
        kp_mirrored(i, j, c) = kp_logits(i, m - 1 - j, perm[static_cast<std::size_t>(c)]);
  Tensor label_orig({m, m, channels}), label_flip({m, m, channels});
  for (int c = 0; c < channels; ++c) {
    label_orig(t_orig[0].kp_cells[static_cast<std::size_t>(c)].first,
               t_orig[0].kp_cells[static_cast<std::size_t>(c)].second, c) = 1.0;
    label_flip(t_flip[0].kp_cells[static_cast<std::size_t>(c)].first,
               t_flip[0].kp_cells[static_cast<std::size_t>(c)].second, c) = 1.0;
  }
  CHECK(loss_keypoint(kp_mirrored, label_flip) ==
        doctest::Approx(loss_keypoint(kp_logits, label_orig)).epsilon(1e-12));
}

TEST_CASE("SGD: zero learning rate, hand-computed momentum steps") {
  ParamStore store;
  NodePtr theta = store.create("theta", {1}, 0.0, 1);
  theta->value(0) = 2.0;

  SgdOptimizer opt{0.9, 0.01, {}};
  // loss = theta^2 via the graph; analytic gradient 2*theta
  const auto run_step = [&](double lr) {
    store.zero_grads();
    NodePtr t4 = reshape(theta, {1, 1, 1, 1});
    NodePtr sq = broadcast_combine(t4, t4, FuseMode::multiply);
    NodePtr loss = reshape(sq, {1});
    backward(loss);
    opt.step(store, lr);
  };

  run_step(0.0);
  CHECK(theta->value(0) == 2.0);  // lr 0 leaves parameters unchanged

  // hand-computed: v = 0.9 v + (2 theta + 0.01 theta); theta -= 0.1 v.
  // The zero-lr step above already charged the velocity once.
  double v = 2 * 2.0 + 0.01 * 2.0;
  double th = 2.0;
  v = 0.9 * v + (2 * th + 0.01 * th);
  th -= 0.1 * v;
  run_step(0.1);
  CHECK(theta->value(0) == doctest::Approx(th).epsilon(1e-15));

  v = 0.9 * v + (2 * th + 0.01 * th);
  th -= 0.1 * v;
  run_step(0.1);
  CHECK(theta->value(0) == doctest::Approx(th).epsilon(1e-15));
}

TEST_CASE("train_step: deterministic, divergence carries the breakdown") {
  TrainConfig config = tiny_config();
  std::vector<SceneRecord> scenes = tiny_scenes(4, config);

  const auto run = [&](int steps) {
    Model model(config.model_config(), mix_seed(config.seed, "init"));
    SgdOptimizer opt{config.momentum, config.weight_decay, {}};
    LossBreakdown last;
    for (int i = 0; i < steps; ++i) {
      const TrainBatch batch = prepare_batch(scenes, {0, 1}, config, i);
      last = train_step(model, opt, batch, config.fusion.alpha, config.learning_rate);
    }
    std::vector<Tensor> params;
    for (const auto& [name, node] : model.params().entries()) params.push_back(node->value);
    return std::make_pair(last, params);
  };
  const auto [loss_a, params_a] = run(10);
  const auto [loss_b, params_b] = run(10);
  CHECK(loss_a.total == loss_b.total);
  REQUIRE(params_a.size() == params_b.size());
  for (std::size_t i = 0; i < params_a.size(); ++i)
    CHECK((params_a[i].array() == params_b[i].array()).all());

  // a poisoned model diverges and reports the breakdown
  Model model(config.model_config(), 1);
  model.params().get("backbone.conv1.w")->value.array().setConstant(
      std::numeric_limits<double>::quiet_NaN());
  SgdOptimizer opt{config.momentum, config.weight_decay, {}};
  const TrainBatch batch = prepare_batch(scenes, {0, 1}, config, 0);
  CHECK_THROWS_AS(train_step(model, opt, batch, config.fusion.alpha, 0.005), DivergedError);
}

TEST_CASE("full-model gradient check through the total loss") {
  TrainConfig config = tiny_config();
  config.model.feature_channels = 4;
  config.model.mask_head_channels = 5;
  config.model.keypoint_head_channels = 5;
  config.model.roi_size = 4;
  config.fusion.k = 3;
  std::vector<SceneRecord> scenes = tiny_scenes(2, config);

  Model model(config.model_config(), 3);
  test::randomize_biases(model.params().entries(), 11);
  const TrainBatch batch = prepare_batch(scenes, {0, 1}, config, 0);

  std::vector<std::pair<std::string, NodePtr>> leaves;
  for (const auto& [name, node] : model.params().entries()) leaves.emplace_back(name, node);
  const auto forward = [&] {
    NodePtr images = constant(batch.images);
    NodePtr features = model.backbone_forward(images);
    NodePtr rois = roi_bilinear_stack(features, batch.rois, 4, 4.0);
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
    NodePtr total = softmax_ce(cls_logits, cls_targets);
    Tensor delta_targets({static_cast<Eigen::Index>(fg.size()), 4});
    for (std::size_t i = 0; i < fg.size(); ++i)
      for (int q = 0; q < 4; ++q)
        delta_targets(static_cast<Eigen::Index>(i), q) =
            batch.targets[static_cast<std::size_t>(fg[i])].box_deltas(q);
    total = add(total, smooth_l1(gather_deltas(select_rows(box_deltas, fg), fg_classes),
                                 delta_targets));
    NodePtr fg_rois = select_rows(rois, fg);
    NodePtr mask_logits = model.mask_head_forward(fg_rois);
    NodePtr kp_logits = model.keypoint_head_forward(fg_rois);
    NodePtr fused = model.fuse(kp_logits, mask_logits).fused;
    const auto nres = fused->value.extent(1);
    Tensor mask_targets({static_cast<Eigen::Index>(fg.size()), nres, nres});
    for (std::size_t i = 0; i < fg.size(); ++i) {
      const Tensor& mt = batch.targets[static_cast<std::size_t>(fg[i])].mask;
      std::copy(mt.data(), mt.data() + mt.size(),
                mask_targets.data() + static_cast<Eigen::Index>(i) * nres * nres);
    }
    total = add(total, sigmoid_bce_mean(gather_channel(fused, fg_classes), mask_targets));
    std::vector<std::vector<std::pair<int, int>>> cells;
    for (const auto idx : fg) cells.push_back(batch.targets[static_cast<std::size_t>(idx)].kp_cells);
    total = add(total, scale(spatial_softmax_ce(kp_logits, cells), config.fusion.alpha));
    return total;
  };
  // h = 1e-6: the quantized flat-color images duplicate pre-activation
  // values, so a wider step would straddle ReLU kinks shared by many pixels.
  const auto r = test::check_gradients(leaves, forward, 1e-6, 64);
  CHECK(r.max_rel_error < 1e-4);
}

TEST_CASE("alpha=0 with fusion disabled matches the mask-only baseline bitwise") {
  TrainConfig config = tiny_config();
  config.fusion.alpha = 0.0;
  config.fusion.enabled = false;
  config.iterations = 50;
  std::vector<SceneRecord> scenes = tiny_scenes(6, config);

  // Full pipeline model: keypoint branch registered but inert.
  ModelConfig with_branch = config.model_config();
  with_branch.with_keypoint_branch = true;
  Model full(with_branch, mix_seed(config.seed, "init"));
  // Baseline: built without the keypoint branch at all.
  Model baseline(config.model_config(), mix_seed(config.seed, "init"));
  REQUIRE_FALSE(baseline.config().with_keypoint_branch);

  const auto trajectory = [&](Model& model) {
    SgdOptimizer opt{config.momentum, config.weight_decay, {}};
    std::vector<LossBreakdown> losses;
    for (int i = 0; i < config.iterations; ++i) {
      const TrainBatch batch = prepare_batch(scenes, {static_cast<std::size_t>(i) % 6,
                                                      static_cast<std::size_t>(i + 1) % 6},
                                             config, i);
      losses.push_back(train_step(model, opt, batch, 0.0, config.learning_rate));
    }
    return losses;
  };
  const auto full_losses = trajectory(full);
  const auto base_losses = trajectory(baseline);
  for (int i = 0; i < config.iterations; ++i) {
    CHECK(full_losses[static_cast<std::size_t>(i)].total ==
          base_losses[static_cast<std::size_t>(i)].total);
    CHECK(full_losses[static_cast<std::size_t>(i)].l_mask ==
          base_losses[static_cast<std::size_t>(i)].l_mask);
    CHECK(full_losses[static_cast<std::size_t>(i)].l_keypoint == 0.0);
  }
  for (const auto& [name, node] : baseline.params().entries()) {
    const NodePtr other = full.params().get(name);
    CHECK((other->value.array() == node->value.array()).all());
  }
}

TEST_CASE("training reduces the loss on a small problem") {
  TrainConfig config = tiny_config();
  config.iterations = 60;
  config.learning_rate = 0.004;
  std::vector<SceneRecord> scenes = tiny_scenes(8, config);
  Model model(config.model_config(), mix_seed(config.seed, "init"));
  const auto log = train_model(model, scenes, config, nullptr);
  double early = 0.0, late = 0.0;
  for (int i = 0; i < 10; ++i) {
    early += log[static_cast<std::size_t>(i)].loss.total;
    late += log[log.size() - 10 + static_cast<std::size_t>(i)].loss.total;
  }
  CHECK(late < early);
}

TEST_CASE("checkpoint round trip preserves inference outputs exactly") {
  namespace fs = std::filesystem;
  TrainConfig config = tiny_config();
  config.iterations = 8;
  std::vector<SceneRecord> scenes = tiny_scenes(4, config);
  Model model(config.model_config(), mix_seed(config.seed, "init"));
  train_model(model, scenes, config, nullptr);

  const fs::path dir = fs::temp_directory_path() / "maskpoint_train_ckpt";
  fs::create_directories(dir);
  const std::string path = (dir / "ckpt.bin").string();
  model.save_checkpoint(path);
  Model loaded(config.model_config(), 12345);
  loaded.load_checkpoint(path);

  InferOptions options;
  options.score_threshold = 0.0;  // keep some detections even untrained
  const DetectionResult a = infer(model, scenes[0].image, options);
  const DetectionResult b = infer(loaded, scenes[0].image, options);
  REQUIRE(a.detections.size() == b.detections.size());
  for (std::size_t i = 0; i < a.detections.size(); ++i) {
    CHECK(a.detections[i].score == b.detections[i].score);
    CHECK(a.detections[i].class_id == b.detections[i].class_id);
    CHECK((a.detections[i].mask_probs.array() == b.detections[i].mask_probs.array()).all());
    CHECK(a.detections[i].mask == b.detections[i].mask);
  }
  fs::remove_all(dir);
}

TEST_CASE("infer: background-favoring model detects nothing, outputs are ordered") {
  TrainConfig config = tiny_config();
  Model model(config.model_config(), 7);
  // Bias the classifier hard toward background.
  model.params().get("box_head.cls.b")->value(config.model.classes) = 50.0;
  const Tensor blank = Tensor::full({64, 64, 3}, 0.1);
  const DetectionResult result = infer(model, blank);
  CHECK(result.detections.empty());

  // Low threshold: detections must be score-sorted and masks stay inside boxes.
  InferOptions options;
  options.score_threshold = 0.0;
  std::vector<SceneRecord> scenes = tiny_scenes(1, config);
  const DetectionResult some = infer(model, scenes[0].image, options);
  for (std::size_t i = 1; i < some.detections.size(); ++i)
    CHECK(some.detections[i - 1].score >= some.detections[i].score);
  for (const Detection& det : some.detections) {
    for (int r = 0; r < det.mask.height(); ++r)
      for (int c = 0; c < det.mask.width(); ++c)
        if (det.mask.at(r, c)) {
          CHECK(r >= static_cast<int>(std::floor(det.box.top)));
          CHECK(r <= static_cast<int>(std::ceil(det.box.bottom())));
          CHECK(c >= static_cast<int>(std::floor(det.box.left)));
          CHECK(c <= static_cast<int>(std::ceil(det.box.right())));
        }
  }
}

TEST_CASE("TrainConfig JSON round trip mirrors field names") {
  TrainConfig config = tiny_config();
  config.fusion.mode = FuseMode::add;
  config.fusion.alpha = 0.25;
  config.sampling = SamplingKind::corner;
  const std::string text = config.to_json();
  for (const char* field : {"learning_rate", "momentum", "weight_decay", "batch_images",
                            "iterations", "lr_drop_fraction", "flip_prob", "fusion", "design",
                            "reduction", "mode", "k", "use_center", "alpha", "seed"})
    CHECK(text.find(field) != std::string::npos);
  const TrainConfig back = TrainConfig::from_json_text(text);
  CHECK(back.fusion.mode == FuseMode::add);
  CHECK(back.fusion.alpha == 0.25);
  CHECK(back.fusion.k == config.fusion.k);
  CHECK(back.sampling == SamplingKind::corner);
  CHECK(back.model.feature_channels == config.model.feature_channels);
  CHECK(back.to_json() == text);
}

TEST_CASE("ablation: single cell and alpha grid ordering") {
  TrainConfig base = tiny_config();
  base.iterations = 6;
  std::vector<SceneRecord> train = tiny_scenes(4, base);
  std::vector<SceneRecord> eval = tiny_scenes(2, base, 99);

  const std::string one_cell = R"({"cells": [{"name": "only", "fusion": {"mode": "add"}}]})";
  const auto rows = run_ablation(one_cell, base, train, eval, nullptr);
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].setting == "only");
  CHECK_FALSE(rows[0].failed);

  const std::string alpha_grid = R"({"cells": [
    {"name": "1", "fusion": {"alpha": 1.0}},
    {"name": "0.5", "fusion": {"alpha": 0.5}},
    {"name": "0.2", "fusion": {"alpha": 0.2}}]})";
  const auto alpha_rows = run_ablation(alpha_grid, base, train, eval, nullptr);
  REQUIRE(alpha_rows.size() == 3);
  CHECK(alpha_rows[0].setting == "1");
  CHECK(alpha_rows[1].setting == "0.5");
  CHECK(alpha_rows[2].setting == "0.2");

  // cell failures are recorded, not fatal
  const std::string bad = R"({"cells": [{"name": "broken", "fusion": {"design": "zz"}}]})";
  const auto bad_rows = run_ablation(bad, base, train, eval, nullptr);
  REQUIRE(bad_rows.size() == 1);
  CHECK(bad_rows[0].failed);
  CHECK_FALSE(bad_rows[0].error.empty());

  const std::string table = ablation_table(alpha_rows);
  CHECK(table.find("Setting") != std::string::npos);
  CHECK(table.find("AP50") != std::string::npos);
}

TEST_CASE("export_heatmaps writes one image pair per detection") {
  namespace fs = std::filesystem;
  TrainConfig config = tiny_config();
  std::vector<SceneRecord> scenes = tiny_scenes(1, config);
  Model model(config.model_config(), 31);

  const fs::path dir = fs::temp_directory_path() / "maskpoint_heatmaps";
  fs::remove_all(dir);
  InferOptions options;
  options.score_threshold = 0.0;
  const auto written = export_heatmaps(model, scenes[0].image, dir.string(), options);
  const DetectionResult dets = infer(model, scenes[0].image, options);
  CHECK(written.size() == 2 * dets.detections.size());
  int full_range = 0;
  for (const auto& path : written) {
    const ImageU8 img = read_png(path);
    CHECK(img.channels == 1);
    std::uint8_t lo = 255, hi = 0;
    for (const auto v : img.data) {
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    if (lo == 0 && hi == 255) ++full_range;  // min-max contract for non-constant maps
  }
  if (!written.empty()) CHECK(full_range > 0);
  fs::remove_all(dir);
}
