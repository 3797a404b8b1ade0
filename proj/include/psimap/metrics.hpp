// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_METRICS_HPP
#define PSIMAP_METRICS_HPP

#include <string>
#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/image.hpp"
#include "psimap/raster.hpp"

namespace psimap {

struct ClassPQ {
  int class_id = -1;
  double pq = 0, sq = 0, rq = 0;
  int tp = 0, fp = 0, fn = 0;
  double iou_sum = 0;
};

struct PanopticResult {
  double pq = 0, sq = 0, rq = 0;  // mean over counted classes
  std::vector<ClassPQ> per_class;
  double miou = 0, macc = 0;
  double mcov = 0, mwcov = 0;
  struct Match {
    int pred_id, gt_id;
    double iou;
  };
  std::vector<Match> matches;
};

struct GeomResult {
  double accuracy = 0;      // mean pred -> gt distance
  double completeness = 0;  // mean gt -> pred distance
  double chamfer_l1 = 0;
  double precision = 0, recall = 0, fscore = 0;
  double tau = 0;
};

// Panoptic quality over id+class planes; id or class -1 marks void.
// Segments are pixel sets sharing an id; a segment's class is the
// majority class over its pixels. Matches require same class and
// IoU > 0.5 (strict).
PanopticResult panoptic_quality(const IntPlane& pred_ids, const IntPlane& pred_classes,
                                const IntPlane& gt_ids, const IntPlane& gt_classes);

// Semantic metrics; gt pixels with class -1 ignored.
double miou(const IntPlane& pred_classes, const IntPlane& gt_classes);
double macc(const IntPlane& pred_classes, const IntPlane& gt_classes);

// Per-GT-instance best IoU, unweighted and pixel-count weighted.
void coverage(const IntPlane& pred_ids, const IntPlane& gt_ids, double& mcov, double& mwcov);

// Point-cloud reconstruction metrics at threshold tau.
GeomResult geom_metrics(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau);

// Nearest-neighbor distances from each query point to the target set.
// Brute force doubles as the oracle for the grid-hash path.
std::vector<double> nn_distances_brute(const std::vector<Vec3>& queries,
                                       const std::vector<Vec3>& targets);
std::vector<double> nn_distances_grid(const std::vector<Vec3>& queries,
                                      const std::vector<Vec3>& targets);

// Points sampled uniformly by area from the surfel discs (1-sigma
// ellipses), for geometric evaluation.
std::vector<Vec3> sample_surfel_points(const SceneMap& scene, int total_points, uint64_t seed);

// Panoptic prediction planes rendered from a scene: instance ids from
// the blended label argmax, classes from the winning query's class id,
// semantic classes from the blended feature argmax. Pixels with
// accumulated opacity below 0.5 are void (-1).
struct PanopticRender {
  IntPlane ids;
  IntPlane classes;      // class of the winning query
  IntPlane sem_classes;  // argmax of the semantic feature plane
};
PanopticRender render_panoptic(const SceneMap& scene, const Camera& cam,
                               const RasterConfig& cfg);

}  // namespace psimap

#endif
