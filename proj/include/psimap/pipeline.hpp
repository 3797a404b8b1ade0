// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_PIPELINE_HPP
#define PSIMAP_PIPELINE_HPP

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "psimap/losses.hpp"
#include "psimap/panoptic.hpp"
#include "psimap/raster.hpp"
#include "psimap/sogmm.hpp"

namespace psimap {

struct PipelineConfig {
  RasterConfig raster;
  LossWeights weights;
  double no_match_cost = 1.0;

  // Smooth variant for gradient checking: no alpha floor, no
  // transmittance early-out, no footprint cutoff.
  static PipelineConfig smooth();
};

// One full training forward: frustum selection, attention refinement,
// label assignment, render, losses.
struct PipelineForward {
  LossReport report;
  RenderTargets targets;
  RenderCache rcache;
  std::vector<int> visible;
  KeysValues kv;
  AttentionForward attn;
  MatX features_used;        // query features fed to assign_labels
  bool used_refined = false;
  LabelAssignment labels;
  std::vector<int> alive;       // alive query indices (rows of the cost matrix)
  std::vector<int> assignment;  // alive row -> gt mask index, -1 unmatched
  std::vector<int> geo_assign;  // per-surfel nearest component
};

PipelineForward pipeline_forward(const SceneMap& scene, const SogmmModel* model,
                                 const FrameBundle& frame, const PipelineConfig& cfg,
                                 bool want_cache);

// Scalar total loss (for finite differences).
double pipeline_loss(const SceneMap& scene, const SogmmModel* model, const FrameBundle& frame,
                     const PipelineConfig& cfg);

// All optimized parameter classes.
enum class ParamClass {
  Center,
  Rotation,
  Scale,
  Opacity,
  Color,
  SemFeature,
  InsFeature,
  QueryFeature,
  QueryMean,
  QueryCov,
  AttnWq,
  AttnWk,
  AttnWv,
};
const char* param_class_name(ParamClass c);

struct Gradients {
  std::vector<Vec3> center;
  std::vector<Vec4> rotation;
  std::vector<Vec2> scales;
  std::vector<double> opacity;
  std::vector<Vec3> color;
  MatX f_sem;          // C_sem x N_surfels
  MatX f_ins;          // C_ins x N_surfels
  MatX query_feature;  // C_ins x N_queries
  std::vector<Vec3> query_mean;
  std::vector<Vec6> query_cov;  // unique entries (00, 01, 02, 11, 12, 22)
  MatX w_q, w_k, w_v;

  static Gradients zero(const SceneMap& scene);
  void accumulate(const Gradients& other, double scale = 1.0);
  // Name of the first parameter class containing a non-finite entry.
  std::optional<std::string> find_non_finite() const;
};

// Exact reverse-mode gradients of the total loss through blending,
// alpha evaluation, attention and all loss terms. Top-K selection and
// discrete assignments (Hungarian, nearest component) are treated as
// constants.
struct BackwardResult {
  LossReport report;
  Gradients grads;
};
BackwardResult pipeline_backward(const SceneMap& scene, const SogmmModel* model,
                                 const FrameBundle& frame, const PipelineConfig& cfg);

// Flat addressing of every optimized coordinate, for the finite
// difference verifier and the optimizer.
struct ParamRef {
  ParamClass cls;
  int entity;  // surfel / query index, 0 for attention weights
  int comp;    // flat component within the entity
};
std::vector<ParamRef> enumerate_params(const SceneMap& scene);
double get_param(const SceneMap& scene, const ParamRef& ref);
void set_param(SceneMap& scene, const ParamRef& ref, double value);
double grad_entry(const Gradients& g, const ParamRef& ref);

struct FiniteDiffReport {
  double max_rel_err = 0;
  ParamRef worst{ParamClass::Center, -1, -1};
  double worst_analytic = 0, worst_numeric = 0;
  std::map<std::string, double> per_class_max;
  int coords_checked = 0;
};

// Central differences on a stratified random subsample of at least
// min_coords coordinates covering every parameter class present.
// Relative error denominator: max(|analytic|, |numeric|, 1e-8).
FiniteDiffReport finite_diff_check(const SceneMap& scene, const SogmmModel* model,
                                   const FrameBundle& frame, const PipelineConfig& cfg, double h,
                                   int min_coords, uint64_t seed);

}  // namespace psimap

#endif
