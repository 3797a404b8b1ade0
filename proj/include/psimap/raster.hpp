// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_RASTER_HPP
#define PSIMAP_RASTER_HPP

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/image.hpp"
#include "psimap/math_util.hpp"

namespace psimap {

enum class Binning { Circle, Aabb };
enum class Blending { Full, TopK };

// Screen-space footprint of one surfel under one camera.
struct ProjectedSurfel {
  int source = -1;          // index into the scene surfel list
  Vec2 screen_center = Vec2::Zero();   // pixels
  Mat2 sigma = Mat2::Zero();           // projected covariance J Sigma_world J^T, pixel^2
  double sort_depth = 0;               // camera-space z of the center
  Mat3 h = Mat3::Zero();      // tangent (u, v, 1) -> camera point
  Mat3 h_inv = Mat3::Zero();  // camera ray direction -> homogeneous tangent coords
  Mat2 footprint_inv = Mat2::Zero();   // inverse of the dilated covariance
  Vec3 normal_vis = Vec3::UnitZ();     // world normal oriented toward the camera
};

struct TileGrid {
  int tile_size = 16;
  int tiles_x = 0, tiles_y = 0;
  std::vector<std::vector<int>> tiles;  // projected indices, ascending (depth, source)
  uint64_t rn_total = 0;                // total surfel-to-tile assignments
  double rn_per_tile = 0;               // mean assignments per nonempty tile

  int tile_count() const { return tiles_x * tiles_y; }
};

struct RasterConfig {
  int tile_size = 16;
  double chi2 = 9.0;           // confidence bound for binning and footprint support
  double alpha_min = 1.0 / 255.0;
  double t_min = 1e-4;         // transmittance early-out
  bool support_cutoff = true;  // hard footprint bound at the chi2 ellipse
  Binning binning = Binning::Aabb;
  Blending blending = Blending::Full;
  int top_k = 16;
  Vec3 background = Vec3::Zero();
  bool render_depth_normal = true;
  int threads = 0;  // 0 -> PSIMAP_THREADS / hardware
};

struct RenderTargets {
  Image color;          // W x H x 3
  Image depth;          // W x H x 2: expected-depth, dominant-surfel depth
  Image normal;         // W x H x 3
  Image sem_feat;       // W x H x C_sem
  Image ins_dist;       // W x H x N_queries (pre-argmax blended distribution)
  IntPlane ins_argmax;  // W x H x 1, -1 where nothing accumulated
  Image alpha_acc;      // W x H x 1
  IntPlane blend_count; // contributors processed per pixel
  uint64_t blended_total = 0;  // feature-blend events summed over pixels
};

// One processed contributor at one pixel, in blend order.
struct PixelContribution {
  int proj;      // index into RenderCache::projected
  double alpha;
  double u, v;   // tangent coordinates in sigma units
};

// Forward intermediates kept for the backward pass.
struct RenderCache {
  std::vector<ProjectedSurfel> projected;
  TileGrid grid;
  std::vector<std::vector<PixelContribution>> pixels;  // per pixel, blend order
  RasterConfig cfg;
  int width = 0, height = 0;
};

// Perspective projection of one surfel; nullopt when culled (center
// depth outside (near, far), footprint fully off-screen, or the surfel
// plane passes through the camera center).
std::optional<ProjectedSurfel> project_surfel(const Surfel& s, const Camera& cam,
                                              const RasterConfig& cfg);

// Baseline binning: every tile overlapping the bounding square of the
// disc of radius sqrt(chi2 * lambda_max(sigma')) about the center.
TileGrid bin_circle(const std::vector<ProjectedSurfel>& projected, const Camera& cam,
                    const RasterConfig& cfg);

// Precise binning: tiles overlapping the covariance-derived box
// [cx +- sqrt(chi2 * sigma'_11), cy +- sqrt(chi2 * sigma'_22)].
// Never assigns more tiles than bin_circle for any surfel.
TileGrid bin_aabb(const std::vector<ProjectedSurfel>& projected, const Camera& cam,
                  const RasterConfig& cfg, double chi2);

// Exact tangent-plane alpha at a pixel center (x, y), including the
// support and alpha_min cutoffs.
struct AlphaSample {
  double alpha = 0;
  double u = 0, v = 0;
  double w2 = 0;  // 1 / w2 is the camera depth of the ray-plane hit
  bool inside = false;
};
AlphaSample sample_surfel_alpha(const ProjectedSurfel& proj, const Camera& cam, double px,
                                double py, const RasterConfig& cfg);

// alpha = opacity * exp(-(u^2 + v^2) / 2), zero when below alpha_min or
// outside the footprint support.
double evaluate_alpha(const ProjectedSurfel& proj, const Surfel& s, const Camera& cam, double px,
                      double py, const RasterConfig& cfg);

// Exact Top-K selection over blend weights, ordered by (weight desc,
// proj asc). Marks selected[i] for the k winners among m entries.
// Insertion-based: far cheaper than nth_element at per-pixel sizes.
struct WeightKey {
  double weight;
  int proj;
  int index;
};
void topk_select(const WeightKey* keys, int m, int k, std::vector<WeightKey>& best_scratch,
                 std::vector<char>& selected);

// Chain d L / d h_inv (accumulated over pixels) back to surfel
// geometry parameters.
struct SurfelGeomGrads {
  Vec3 d_center = Vec3::Zero();
  Vec4 d_rotation = Vec4::Zero();
  Vec2 d_scales = Vec2::Zero();
};
SurfelGeomGrads project_surfel_backward(const Surfel& s, const Camera& cam,
                                        const ProjectedSurfel& proj, const Mat3& g_hinv);

// Tile-parallel forward render. `labels` is the per-surfel instance
// distribution (N_queries x N_surfels, column per surfel); pass nullptr
// to skip the instance plane. `cache` non-null records per-pixel
// contributor lists for the backward pass.
RenderTargets render(const SceneMap& scene, const MatX* labels, const Camera& cam,
                     const RasterConfig& cfg, RenderCache* cache = nullptr);

// Same, but reuses the caller's target buffers (no reallocation when
// shapes match). Keeps framebuffer pages warm across frames.
void render_into(RenderTargets& out, const SceneMap& scene, const MatX* labels,
                 const Camera& cam, const RasterConfig& cfg, RenderCache* cache = nullptr);

struct BenchRow {
  std::string name;
  Binning binning;
  Blending blending;
  double time_ms = 0;
  double fps = 0;
  uint64_t rn_total = 0;
  double rn_per_tile = 0;
  uint64_t blended_total = 0;
  double blended_per_pixel = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;  // baseline, precise_tile, topk, full_method
  int repetitions = 0;
  int width = 0, height = 0;
  int surfel_count = 0;
};

// Runs the four-configuration ablation grid on identical inputs.
// Counters are deterministic across repetitions; times are medians.
BenchReport bench_render(const SceneMap& scene, const MatX* labels, const Camera& cam,
                         int repetitions, const RasterConfig& base_cfg);

}  // namespace psimap

#endif
