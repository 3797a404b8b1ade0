#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <map>

#include "psimap/metrics.hpp"

using namespace psimap;

namespace {

IntPlane plane_of(int w, int h, int fill = -1) { return IntPlane(w, h, 1, fill); }

void stamp(IntPlane& p, int x0, int y0, int x1, int y1, int value) {
  for (int y = y0; y < y1; ++y) {
    for (int x = x0; x < x1; ++x) p.at(x, y) = value;
  }
}

// independent pixel-counting PQ oracle for a single class
struct CountedPQ {
  double pq, sq, rq;
};
CountedPQ counting_oracle(const IntPlane& pred, const IntPlane& gt) {
  std::map<int, int64_t> psz, gsz;
  std::map<std::pair<int, int>, int64_t> inter;
  for (int i = 0; i < gt.pixel_count(); ++i) {
    if (pred.data[i] >= 0) ++psz[pred.data[i]];
    if (gt.data[i] >= 0) ++gsz[gt.data[i]];
    if (pred.data[i] >= 0 && gt.data[i] >= 0) ++inter[{pred.data[i], gt.data[i]}];
  }
  int tp = 0;
  double iou_sum = 0;
  std::map<int, char> pm, gm;
  for (const auto& [pg, c] : inter) {
    const double iou = static_cast<double>(c) / (psz[pg.first] + gsz[pg.second] - c);
    if (iou > 0.5) {
      ++tp;
      iou_sum += iou;
      pm[pg.first] = 1;
      gm[pg.second] = 1;
    }
  }
  const int fp = static_cast<int>(psz.size()) - static_cast<int>(pm.size());
  const int fn = static_cast<int>(gsz.size()) - static_cast<int>(gm.size());
  const double denom = tp + 0.5 * fp + 0.5 * fn;
  CountedPQ out;
  out.pq = denom > 0 ? iou_sum / denom : 0;
  out.sq = tp > 0 ? iou_sum / tp : 0;
  out.rq = denom > 0 ? tp / denom : 0;
  return out;
}

}  // namespace

TEST_CASE("PQ: identical prediction gives all ones") {
  IntPlane ids = plane_of(16, 16);
  stamp(ids, 0, 0, 8, 16, 0);
  stamp(ids, 8, 0, 16, 16, 1);
  IntPlane classes = plane_of(16, 16, 0);
  const PanopticResult r = panoptic_quality(ids, classes, ids, classes);
  CHECK(r.pq == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.sq == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.rq == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(r.miou == doctest::Approx(1.0).epsilon(1e-12));
  for (const auto& c : r.per_class) {
    CHECK(c.pq == doctest::Approx(c.sq * c.rq).epsilon(1e-8));
  }
}

TEST_CASE("PQ boundary: exactly half overlap is not a match") {
  // gt: one 4x2 instance; pred: one 2x2 instance inside it -> IoU = 0.5
  IntPlane gt_ids = plane_of(8, 8);
  stamp(gt_ids, 2, 2, 6, 4, 0);
  IntPlane pred_ids = plane_of(8, 8);
  stamp(pred_ids, 2, 2, 4, 4, 0);
  IntPlane classes = plane_of(8, 8, 0);

  const PanopticResult r = panoptic_quality(pred_ids, classes, gt_ids, classes);
  REQUIRE(r.per_class.size() == 1);
  CHECK(r.per_class[0].tp == 0);
  CHECK(r.per_class[0].fp == 1);
  CHECK(r.per_class[0].fn == 1);
  CHECK(r.pq == doctest::Approx(0.0).epsilon(1e-12));

  const CountedPQ oracle = counting_oracle(pred_ids, gt_ids);
  CHECK(r.pq == doctest::Approx(oracle.pq).epsilon(1e-10));
}

TEST_CASE("PQ: one IoU-0.8 match and one miss against the counting oracle") {
  // gt A: 10 pixels; pred A': its first 8 pixels -> IoU 8/10 = 0.8
  IntPlane gt_ids = plane_of(16, 8);
  stamp(gt_ids, 0, 0, 10, 1, 0);
  stamp(gt_ids, 0, 4, 6, 5, 1);  // gt B, unmatched
  IntPlane pred_ids = plane_of(16, 8);
  stamp(pred_ids, 0, 0, 8, 1, 5);  // contained in gt A, different id value
  IntPlane classes = plane_of(16, 8, 0);

  const PanopticResult r = panoptic_quality(pred_ids, classes, gt_ids, classes);
  const CountedPQ oracle = counting_oracle(pred_ids, gt_ids);
  CHECK(r.pq == doctest::Approx(oracle.pq).epsilon(1e-10));
  CHECK(r.sq == doctest::Approx(oracle.sq).epsilon(1e-10));
  CHECK(r.rq == doctest::Approx(oracle.rq).epsilon(1e-10));
  CHECK(r.sq == doctest::Approx(0.8).epsilon(1e-10));
  CHECK(r.rq == doctest::Approx(2.0 / 3.0).epsilon(1e-10));
  for (const auto& c : r.per_class) {
    CHECK(c.pq == doctest::Approx(c.sq * c.rq).epsilon(1e-8));
  }
}

TEST_CASE("PQ invariant under instance-id permutation of predictions") {
  Rng rng(9);
  IntPlane gt_ids = plane_of(32, 32);
  stamp(gt_ids, 0, 0, 16, 16, 0);
  stamp(gt_ids, 16, 0, 32, 16, 1);
  stamp(gt_ids, 0, 16, 32, 32, 2);
  IntPlane pred_ids = gt_ids;
  for (auto& v : pred_ids.data) {
    if (rng.uniform() < 0.05) v = -1;  // some void speckle
  }
  IntPlane classes = plane_of(32, 32, 0);

  const PanopticResult base = panoptic_quality(pred_ids, classes, gt_ids, classes);
  IntPlane permuted = pred_ids;
  for (auto& v : permuted.data) {
    if (v >= 0) v = (v + 7) * 13 % 97;  // injective remap
  }
  const PanopticResult after = panoptic_quality(permuted, classes, gt_ids, classes);
  CHECK(base.pq == doctest::Approx(after.pq).epsilon(1e-12));
  CHECK(base.sq == doctest::Approx(after.sq).epsilon(1e-12));
  CHECK(base.rq == doctest::Approx(after.rq).epsilon(1e-12));
  CHECK(base.mcov == doctest::Approx(after.mcov).epsilon(1e-12));
}

TEST_CASE("PQ respects class agreement") {
  IntPlane gt_ids = plane_of(8, 8);
  stamp(gt_ids, 0, 0, 8, 8, 0);
  IntPlane pred_ids = gt_ids;
  IntPlane gt_classes = plane_of(8, 8, 1);
  IntPlane pred_classes = plane_of(8, 8, 2);  // wrong class everywhere
  const PanopticResult r = panoptic_quality(pred_ids, pred_classes, gt_ids, gt_classes);
  CHECK(r.pq == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("miou and macc hand case") {
  IntPlane gt = plane_of(4, 1);
  gt.at(0, 0) = 0;
  gt.at(1, 0) = 0;
  gt.at(2, 0) = 1;
  gt.at(3, 0) = -1;  // ignored
  IntPlane pred = plane_of(4, 1);
  pred.at(0, 0) = 0;
  pred.at(1, 0) = 1;
  pred.at(2, 0) = 1;
  pred.at(3, 0) = 0;
  // class 0: tp=1, fn=1, fp=0 -> iou 0.5 ; class 1: tp=1, fp=1 -> iou 0.5
  CHECK(miou(pred, gt) == doctest::Approx(0.5).epsilon(1e-12));
  // recall: class 0 -> 0.5, class 1 -> 1.0
  CHECK(macc(pred, gt) == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("coverage: best-IoU average and weighted variant") {
  IntPlane gt = plane_of(10, 1);
  stamp(gt, 0, 0, 8, 1, 0);   // 8 px
  stamp(gt, 8, 0, 10, 1, 1);  // 2 px
  IntPlane pred = plane_of(10, 1);
  stamp(pred, 0, 0, 4, 1, 3);  // IoU vs gt0 = 4/8
  stamp(pred, 8, 0, 10, 1, 9); // IoU vs gt1 = 1
  double mcov, mwcov;
  coverage(pred, gt, mcov, mwcov);
  CHECK(mcov == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(mwcov == doctest::Approx((0.5 * 8 + 1.0 * 2) / 10.0).epsilon(1e-12));
}

TEST_CASE("geom metrics: identical and shifted clouds") {
  Rng rng(21);
  std::vector<Vec3> pts;
  for (int i = 0; i < 300; ++i) pts.emplace_back(rng.normal(), rng.normal(), rng.normal());
  const GeomResult same = geom_metrics(pts, pts, 0.05);
  CHECK(same.accuracy == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(same.completeness == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(same.fscore == doctest::Approx(1.0).epsilon(1e-12));

  std::vector<Vec3> shifted;
  for (const auto& p : pts) shifted.push_back(p + Vec3(0.01, 0, 0));
  const GeomResult shift = geom_metrics(shifted, pts, 0.05);
  CHECK(shift.accuracy == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(shift.completeness == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(shift.chamfer_l1 == doctest::Approx(0.01).epsilon(1e-9));
  CHECK(shift.fscore == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("geom metrics: swap symmetry") {
  Rng rng(23);
  std::vector<Vec3> a, b;
  for (int i = 0; i < 150; ++i) a.emplace_back(rng.normal(), rng.normal(), rng.normal());
  for (int i = 0; i < 220; ++i) b.emplace_back(rng.normal(), rng.normal(), rng.normal());
  const GeomResult ab = geom_metrics(a, b, 0.5);
  const GeomResult ba = geom_metrics(b, a, 0.5);
  CHECK(ab.accuracy == doctest::Approx(ba.completeness).epsilon(1e-12));
  CHECK(ab.completeness == doctest::Approx(ba.accuracy).epsilon(1e-12));
  CHECK(ab.precision == doctest::Approx(ba.recall).epsilon(1e-12));
  CHECK(ab.recall == doctest::Approx(ba.precision).epsilon(1e-12));
}

TEST_CASE("grid nearest-neighbor matches the brute-force oracle") {
  Rng rng(25);
  std::vector<Vec3> q, t;
  for (int i = 0; i < 400; ++i) {
    q.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
  }
  for (int i = 0; i < 500; ++i) {
    t.emplace_back(rng.uniform(-2, 2), rng.uniform(-2, 2), rng.uniform(-2, 2));
  }
  // a few far-outside queries exercise the ring sweep
  q.emplace_back(10, 10, 10);
  q.emplace_back(-8, 0, 3);
  const auto brute = nn_distances_brute(q, t);
  const auto grid = nn_distances_grid(q, t);
  REQUIRE(brute.size() == grid.size());
  for (size_t i = 0; i < brute.size(); ++i) {
    CHECK(grid[i] == doctest::Approx(brute[i]).epsilon(1e-12));
  }
}

TEST_CASE("surfel area sampling allocates points by area and stays on the discs") {
  SceneMap scene;
  scene.vocabulary = {"a"};
  Surfel big;
  big.center = Vec3(0, 0, 0);
  big.scales = Vec2(2, 2);  // area weight 4
  big.f_sem = VecX();
  big.f_ins = VecX();
  Surfel small = big;
  small.center = Vec3(10, 0, 0);
  small.scales = Vec2(1, 1);  // area weight 1
  scene.surfels = {big, small};
  const auto pts = sample_surfel_points(scene, 1000, 3);
  int near_big = 0, near_small = 0;
  for (const auto& p : pts) {
    // both surfels lie in the z=0 plane
    CHECK(std::abs(p[2]) < 1e-12);
    if ((p - big.center).norm() < 3) {
      ++near_big;
    } else {
      ++near_small;
    }
  }
  CHECK(near_big + near_small == static_cast<int>(pts.size()));
  CHECK(near_big > 3.2 * near_small);
  CHECK(near_big < 4.8 * near_small);
}
