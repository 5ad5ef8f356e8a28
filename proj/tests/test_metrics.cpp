#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "maskpoint/metrics.hpp"
#include "support.hpp"

using namespace maskpoint;
using test::random_tensor;

namespace {

BinaryMask block(int h, int w, int r0, int r1, int c0, int c1) {
  BinaryMask m(h, w);
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c) m.at(r, c) = 1;
  return m;
}

}  // namespace

TEST_CASE("loss_cls: uniform, saturated and hand-computed values") {
  Tensor uniform({5});
  CHECK(loss_cls(uniform, 0) == doctest::Approx(std::log(5.0)).epsilon(1e-12));

  Tensor hot({5});
  hot(3) = 1000.0;
  CHECK(loss_cls(hot, 3) == doctest::Approx(0.0).epsilon(1e-9));

  CHECK(loss_cls(Tensor::from_values({3}, {1.0, 2.0, 3.0}), 2) ==
        doctest::Approx(0.40760596).epsilon(1e-7));

  CHECK_THROWS_AS(loss_cls(uniform, 5), TargetError);
  CHECK_THROWS_AS(loss_cls(uniform, -1), TargetError);
}

TEST_CASE("loss_box: exact zero, quadratic branch, background") {
  Tensor deltas({8});  // 2 classes
  deltas(4) = 0.1;
  deltas(5) = -0.2;
  CHECK(loss_box(deltas, {0.1, -0.2, 0.0, 0.0}, 1, 2) == 0.0);

  Tensor off({4});
  off(0) = off(1) = off(2) = off(3) = 0.5;
  CHECK(loss_box(off, {0.0, 0.0, 0.0, 0.0}, 0, 1) == doctest::Approx(0.5).epsilon(1e-12));

  // background contributes 0 no matter the deltas
  CHECK(loss_box(off, {9.0, 9.0, 9.0, 9.0}, 1, 1) == 0.0);
}

TEST_CASE("loss_mask: ln2 at zero logits, saturation, single pixel") {
  Tensor logits({2, 2, 3});
  Tensor target({2, 2});
  target(0, 1) = 1.0;
  CHECK(loss_mask(logits, target, 1) == doctest::Approx(std::log(2.0)).epsilon(1e-12));

  Tensor sat({2, 2, 1});
  Tensor sat_target({2, 2});
  for (int r = 0; r < 2; ++r)
    for (int c = 0; c < 2; ++c) {
      const bool fg = (r + c) % 2 == 0;
      sat(r, c, 0) = fg ? 1000.0 : -1000.0;
      sat_target(r, c) = fg ? 1.0 : 0.0;
    }
  CHECK(loss_mask(sat, sat_target, 0) == doctest::Approx(0.0).epsilon(1e-9));

  Tensor single({1, 1, 1});
  single(0) = 1.0;
  Tensor one({1, 1});
  one(0) = 1.0;
  CHECK(loss_mask(single, one, 0) == doctest::Approx(0.31326169).epsilon(1e-7));
}

TEST_CASE("loss_keypoint: uniform grid, saturation, hand value, label checks") {
  Tensor uniform({56, 56, 2});
  Tensor label({56, 56, 2});
  label(10, 20, 0) = 1.0;
  label(30, 40, 1) = 1.0;
  CHECK(loss_keypoint(uniform, label) == doctest::Approx(std::log(3136.0)).epsilon(1e-10));

  Tensor sat({8, 8, 1});
  Tensor sat_label({8, 8, 1});
  sat(3, 4, 0) = 1000.0;
  sat_label(3, 4, 0) = 1.0;
  CHECK(loss_keypoint(sat, sat_label) == doctest::Approx(0.0).epsilon(1e-9));

  Tensor small({2, 2, 1});
  small(1, 1, 0) = 1.0;
  Tensor small_label({2, 2, 1});
  small_label(1, 1, 0) = 1.0;
  CHECK(loss_keypoint(small, small_label) == doctest::Approx(0.74366838).epsilon(1e-7));

  // decomposition: mean of independently computed per-channel values
  Rng rng(5);
  Tensor logits = random_tensor({6, 6, 3}, rng);
  Tensor grid({6, 6, 3});
  grid(1, 2, 0) = grid(3, 3, 1) = grid(5, 0, 2) = 1.0;
  double sum = 0.0;
  for (int ch = 0; ch < 3; ++ch) {
    Tensor single_ch({6, 6, 1});
    Tensor single_label({6, 6, 1});
    for (int r = 0; r < 6; ++r)
      for (int c = 0; c < 6; ++c) {
        single_ch(r, c, 0) = logits(r, c, ch);
        single_label(r, c, 0) = grid(r, c, ch);
      }
    sum += loss_keypoint(single_ch, single_label);
  }
  CHECK(loss_keypoint(logits, grid) == doctest::Approx(sum / 3.0).epsilon(1e-12));

  Tensor bad = grid;
  bad(0, 0, 1) = 1.0;  // two ones in channel 1
  CHECK_THROWS_AS(loss_keypoint(logits, bad), LabelError);
  Tensor frac = grid;
  frac(1, 2, 0) = 0.5;
  CHECK_THROWS_AS(loss_keypoint(logits, frac), LabelError);
}

TEST_CASE("total_loss: exact arithmetic and affinity in alpha") {
  CHECK(total_loss(1.0, 2.0, 0.5, 0.4, 0.5).total == 3.7);
  CHECK(total_loss(1.0, 2.0, 0.5, 0.4, 1.0).total == 3.9);
  CHECK(total_loss(1.0, 2.0, 0.5, 0.4, 0.0).total == 3.5);
  CHECK_THROWS_AS(total_loss(1.0, 1.0, 1.0, 1.0, -0.1), TargetError);

  // affine in alpha with slope l_keypoint
  Rng rng(7);
  for (int trial = 0; trial < 20; ++trial) {
    const double cls = rng.uniform(0, 3), box = rng.uniform(0, 3);
    const double mask = rng.uniform(0, 3), kp = rng.uniform(0, 3);
    const double a1 = rng.uniform(0, 2), a2 = rng.uniform(0, 2);
    const LossBreakdown b1 = total_loss(cls, box, mask, kp, a1);
    const LossBreakdown b2 = total_loss(cls, box, mask, kp, a2);
    CHECK(b2.total - b1.total == doctest::Approx((a2 - a1) * kp).epsilon(1e-12));
    CHECK(b1.total == b1.l_cls + b1.l_box + b1.l_mask + b1.alpha * b1.l_keypoint);
  }
}

TEST_CASE("sub-losses are non-negative on random inputs") {
  Rng rng(11);
  for (int trial = 0; trial < 25; ++trial) {
    Tensor cls = random_tensor({4}, rng, -5, 5);
    CHECK(loss_cls(cls, static_cast<int>(rng.uniform_int(0, 3))) >= 0.0);
    Tensor deltas = random_tensor({8}, rng, -2, 2);
    CHECK(loss_box(deltas, {rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1),
                            rng.uniform(-1, 1)},
                   static_cast<int>(rng.uniform_int(0, 1)), 2) >= 0.0);
    Tensor ml = random_tensor({4, 4, 2}, rng, -3, 3);
    Tensor mt = random_tensor({4, 4}, rng, 0, 1);
    mt.array() = (mt.array() > 0.5).cast<double>();
    CHECK(loss_mask(ml, mt, 0) >= 0.0);
    Tensor kl = random_tensor({4, 4, 2}, rng, -3, 3);
    Tensor kt({4, 4, 2});
    kt(static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 3)), 0) = 1.0;
    kt(static_cast<int>(rng.uniform_int(0, 3)), static_cast<int>(rng.uniform_int(0, 3)), 1) = 1.0;
    CHECK(loss_keypoint(kl, kt) >= 0.0);
  }
}

TEST_CASE("mask_iou basics") {
  const BinaryMask a = block(8, 8, 0, 3, 0, 3);
  const BinaryMask b = block(8, 8, 2, 5, 0, 3);
  CHECK(mask_iou(a, a) == 1.0);
  CHECK(mask_iou(a, b) == doctest::Approx(8.0 / 24.0).epsilon(1e-12));
  CHECK(mask_iou(a, BinaryMask(8, 8)) == 0.0);
}

TEST_CASE("mask_ap: perfect predictions, misses, threshold behaviour") {
  // predictions identical to ground truth -> AP 1.0
  std::vector<std::vector<GtObject>> gts(2);
  gts[0].push_back({0, block(16, 16, 1, 6, 1, 6)});
  gts[0].push_back({1, block(16, 16, 8, 14, 8, 14)});
  gts[1].push_back({0, block(16, 16, 4, 9, 2, 12)});
  std::vector<std::vector<PredObject>> preds(2);
  for (std::size_t img = 0; img < 2; ++img)
    for (const auto& gt : gts[img]) preds[img].push_back({gt.class_id, 1.0, gt.mask});
  ApSummary s = mask_ap(preds, gts, 4);
  CHECK(s.ap == doctest::Approx(1.0));
  CHECK(s.ap50 == doctest::Approx(1.0));

  // no predictions -> AP 0
  s = mask_ap({{}, {}}, gts, 4);
  CHECK(s.ap == 0.0);
  CHECK(s.ap50 == 0.0);

  // one GT, one prediction with IoU 0.6: AP@0.5 = 1, AP@0.75 = 0
  std::vector<std::vector<GtObject>> gt1(1);
  gt1[0].push_back({0, block(16, 16, 0, 9, 0, 0)});  // 10-pixel column
  std::vector<std::vector<PredObject>> pred1(1);
  pred1[0].push_back({0, 0.9, block(16, 16, 2, 11, 0, 0)});  // overlap 8/12 = 0.667
  const double iou = mask_iou(pred1[0][0].mask, gt1[0][0].mask);
  REQUIRE(iou == doctest::Approx(8.0 / 12.0));
  s = mask_ap(pred1, gt1, 1, {0.5});
  CHECK(s.ap == doctest::Approx(1.0));
  s = mask_ap(pred1, gt1, 1, {0.75});
  CHECK(s.ap == doctest::Approx(0.0));
}

TEST_CASE("mask_ap: invariant to uniform positive score rescaling") {
  Rng rng(13);
  std::vector<std::vector<GtObject>> gts(3);
  std::vector<std::vector<PredObject>> preds(3);
  for (int img = 0; img < 3; ++img) {
    for (int i = 0; i < 3; ++i) {
      const int r = static_cast<int>(rng.uniform_int(0, 8));
      const int c = static_cast<int>(rng.uniform_int(0, 8));
      const int cls = static_cast<int>(rng.uniform_int(0, 1));
      gts[img].push_back({cls, block(16, 16, r, r + 5, c, c + 5)});
      // noisy prediction
      const int dr = static_cast<int>(rng.uniform_int(0, 2));
      preds[img].push_back(
          {cls, rng.uniform(0.1, 1.0), block(16, 16, r + dr, r + 5 + dr, c, c + 5)});
    }
  }
  const ApSummary a = mask_ap(preds, gts, 2);
  for (auto& per_image : preds)
    for (auto& p : per_image) p.score *= 37.5;
  const ApSummary b = mask_ap(preds, gts, 2);
  CHECK(a.ap == b.ap);
  CHECK(a.ap50 == b.ap50);
  REQUIRE(a.per_class.size() == b.per_class.size());
  for (std::size_t i = 0; i < a.per_class.size(); ++i) CHECK(a.per_class[i] == b.per_class[i]);
}

TEST_CASE("keypoint_pck: fractions and errors") {
  const std::vector<Point> gt{{0, 0}, {5, 5}, {10, 10}, {15, 15}};
  CHECK(keypoint_pck(gt, gt, 1.0) == 1.0);
  std::vector<Point> far;
  for (const Point& p : gt) far.push_back(p + Point{4.0, 0.0});
  CHECK(keypoint_pck(far, gt, 2.0) == 0.0);
  std::vector<Point> half = gt;
  half[0] += Point{9.0, 0.0};
  half[1] += Point{9.0, 0.0};
  CHECK(keypoint_pck(half, gt, 2.0) == 0.5);
  CHECK_THROWS_AS(keypoint_pck({{0, 0}}, gt, 1.0), CountError);
}

TEST_CASE("contour_only_eval: GT-derived points score high, degenerate ones do not") {
  // Ground truth rectangle; prediction points traced from the GT mask.
  std::vector<std::vector<GtObject>> gts(1);
  gts[0].push_back({0, block(32, 32, 4, 20, 6, 25)});
  const ContourPointSet set = uniform_sample(trace_contour(gts[0][0].mask), 16, 3);

  std::vector<std::vector<ContourPrediction>> preds(1);
  preds[0].push_back({0, 0.9, set.points});
  ApSummary s = contour_only_eval(preds, gts, 1, {{32, 32}});
  CHECK(s.ap50 == doctest::Approx(1.0));

  // collinear points: zero IoU, no true positive
  preds[0][0].points = {{1, 1}, {1, 5}, {1, 9}};
  s = contour_only_eval(preds, gts, 1, {{32, 32}});
  CHECK(s.ap50 == 0.0);

  // empty predictions
  s = contour_only_eval({{}}, gts, 1, {{32, 32}});
  CHECK(s.ap == 0.0);
}

TEST_CASE("EvalReport serializes with fixed field names") {
  EvalReport report;
  report.mask_ap = 0.5;
  report.ap50 = 0.75;
  report.keypoint_pck = 0.25;
  report.contour_only_ap = 0.125;
  report.per_class = {0.5, 0.5};
  const std::string json = report.to_json();
  for (const char* field :
       {"mask_ap", "ap50", "keypoint_pck", "contour_only_ap", "per_class"})
    CHECK(json.find(field) != std::string::npos);
}
