// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_SOGMM_HPP
#define PSIMAP_SOGMM_HPP

#include <optional>
#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/math_util.hpp"

namespace psimap {

// Anisotropic mixture component with its cached eigen frame. The
// eigenvectors (v0, v1) span the local plane, v2 is the reference
// normal. Intensity statistics carry the 4th (appearance) dimension of
// the augmented tangent vector.
struct SogmmComponent {
  double weight = 1.0;
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();
  Vec3 eigenvalues = Vec3::Ones();   // sorted descending
  Mat3 eigenvectors = Mat3::Identity();  // columns v0, v1, v2
  Vec3 normal = Vec3::UnitZ();       // v2 with deterministic sign
  double intensity_mean = 0.0;
  double intensity_var = 0.0;
  int point_count = 0;
  int depth = 0;  // splits taken to reach this leaf
};

struct SogmmFitConfig {
  double planarity_threshold = 0.02;  // split while lambda2/lambda0 exceeds this
  int min_points = 20;
  int max_depth = 16;
  int em_iters = 10;
  // Resolution cap: planar nodes still split while they hold more than
  // this many points (0 disables). Children of planar nodes stay
  // planar, so the leaf postcondition is unaffected.
  int max_points_per_component = 0;
  // Optional camera centroid fixing the normal sign convention.
  std::optional<Vec3> camera_centroid;
};

struct SogmmModel {
  std::vector<SogmmComponent> components;
  SogmmFitConfig config;
  // Per-EM-round log-likelihood traces (monotone non-decreasing within
  // a round up to arithmetic noise).
  std::vector<std::vector<double>> em_loglik;

  int k() const { return static_cast<int>(components.size()); }
};

// Local coordinates of a world point in a component's eigen frame plus
// the intensity channel; (u, v, 0, g) is the augmented tangent vector.
struct TangentCoords {
  double u = 0, v = 0, w = 0;
  double g = 0;
};

// Recursive splitting followed by EM refinement. Splits a node along
// v0 at the mean while lambda2/lambda0 > planarity_threshold, the node
// holds at least 2*min_points and depth < max_depth. Degenerate
// covariances are regularized with eps*I, eps = 1e-8 * trace.
// Throws std::invalid_argument when the cloud has fewer than min_points.
SogmmModel fit_sogmm(const PointCloud& cloud, const SogmmFitConfig& cfg);

// Recompute and cache the eigen frame of a component (eigenvalues
// descending, right-handed eigenvectors, sign-fixed normal).
// Throws std::invalid_argument if cov is not symmetric.
void eigen_frame(SogmmComponent& comp, const std::optional<Vec3>& camera_centroid = std::nullopt);

TangentCoords to_tangent(const SogmmComponent& comp, const Vec3& p, double g);
Vec3 from_tangent(const SogmmComponent& comp, const TangentCoords& tc);

// Mixture density at p (3D spatial marginal).
double density(const SogmmModel& model, const Vec3& p);

// Gaussian density of one component at p.
double component_density(const SogmmComponent& comp, const Vec3& p);

// argmax_k weight_k * N(p | mean_k, cov_k); ties broken by lowest index.
int nearest_component(const SogmmModel& model, const Vec3& p);

// |(mu - mean_k) . normal_k|
double plane_distance(const Vec3& mu, const SogmmComponent& comp);

// Sample surfels on each component's tangent plane (w forced to 0).
// Rotation aligns (t_u, t_v, n) with (v0, v1, normal); scales are
// (sqrt(l0), sqrt(l1)) / sqrt(samples_per_component); color is the
// component intensity mean on all three channels; opacity 0.5; feature
// vectors zero-initialized at the given dims.
// Throws std::invalid_argument when samples_per_component == 0.
std::vector<Surfel> init_surfels(const SogmmModel& model, int samples_per_component, int c_sem,
                                 int c_ins, uint64_t seed = 0);

// Total data log-likelihood of the cloud under the model.
double log_likelihood(const SogmmModel& model, const PointCloud& cloud);

}  // namespace psimap

#endif
