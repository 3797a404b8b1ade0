// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_SYNTHETIC_HPP
#define PSIMAP_SYNTHETIC_HPP

#include <string>
#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/raster.hpp"

namespace psimap {

// Desk-scale stand-in for a captured dataset: a floor plus boxes, GT
// frames and labels produced by the renderer itself, and a point cloud
// sampled from the faces.
struct SyntheticSpec {
  int n_objects = 3;
  int image_w = 64, image_h = 64;
  int n_train = 10;
  int n_heldout = 3;
  double mask_noise = 0.0;       // per-(frame, instance) corruption probability
  double boundary_jitter = 1.0;  // pixel shift applied to corrupted masks
  double pixel_dropout = 0.25;   // in-mask dropout applied to corrupted masks
  uint64_t seed = 1;
  int cloud_points = 4000;
  double cloud_sigma = 0.002;  // normal jitter of the sampled cloud
};

struct SyntheticScene {
  SceneMap gt_scene;
  std::vector<int> surfel_instance;  // per GT surfel
  std::vector<int> surfel_class;
  std::vector<std::string> vocabulary;
  std::vector<int> instance_class;  // per instance id
  std::vector<FrameBundle> train_frames;
  std::vector<FrameBundle> heldout_frames;
  std::vector<IntPlane> train_ids, heldout_ids;          // clean instance id planes
  std::vector<IntPlane> train_classes, heldout_classes;  // clean class planes
  PointCloud cloud;
};

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec);

// Street-like benchmark scene: elongated surfels (aspect >= min_aspect)
// on a ground strip, angled walls and stacked facade layers, with
// random high-dimensional semantic features and near-one-hot instance
// labels. Deep per-pixel overlap exercises the fast rendering paths.
struct StreetSpec {
  int n_surfels = 12000;
  uint64_t seed = 7;
  double min_aspect = 5.0;
  int image_w = 256, image_h = 192;
  int c_sem = 32;
  int n_instances = 256;  // query-scale channel count, the regime Top-K targets
};

struct StreetScene {
  SceneMap scene;
  MatX labels;  // n_instances x n_surfels, near one-hot
  Camera camera;
};

StreetScene make_street_scene(const StreetSpec& spec);

}  // namespace psimap

#endif
