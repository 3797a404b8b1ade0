// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_CORE_TYPES_HPP
#define PSIMAP_CORE_TYPES_HPP

#include <string>
#include <vector>

#include "psimap/image.hpp"
#include "psimap/math_util.hpp"

namespace psimap {

// 2D Gaussian disc in world space. The rotation quaternion (w, x, y, z)
// maps the local frame onto world axes: column 0 of the rotation matrix
// is the tangent axis t_u, column 1 is t_v, column 2 is the normal.
struct Surfel {
  Vec3 center = Vec3::Zero();
  Vec4 rotation = Vec4(1, 0, 0, 0);
  Vec2 scales = Vec2(1, 1);    // positive lengths along (t_u, t_v)
  double opacity = 0.5;        // post-activation, in [0, 1]
  Vec3 color = Vec3::Zero();   // per-channel in [0, 1]
  VecX f_sem;                  // semantic feature, C_sem entries
  VecX f_ins;                  // instance feature, C_ins entries
};

struct TangentFrame {
  Vec3 t_u, t_v, n;
};

// Orthonormal right-handed frame of a surfel; n = t_u x t_v.
// Throws std::invalid_argument when the quaternion is degenerate
// (non-finite or norm off unit by more than 1e-6).
TangentFrame tangent_frame(const Surfel& s);

struct Camera {
  Mat3 r_cw = Mat3::Identity();  // world -> camera rotation
  Vec3 t_cw = Vec3::Zero();      // world -> camera translation
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 0, height = 0;
  double near_clip = 0.01, far_clip = 100.0;

  // Validating factory; throws std::invalid_argument on bad parameters.
  static Camera make(const Mat3& r_cw, const Vec3& t_cw, double fx, double fy, double cx,
                     double cy, int width, int height, double near_clip, double far_clip);

  // Camera positioned at `eye` looking at `target`, `up` roughly up.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy,
                        int width, int height, double near_clip, double far_clip);

  Vec3 to_camera(const Vec3& p_world) const { return r_cw * p_world + t_cw; }
  Vec3 center_world() const { return -r_cw.transpose() * t_cw; }
};

struct PointCloud {
  std::vector<Vec3> points;
  std::vector<double> intensities;  // grayscale in [0, 1], same length as points

  // Throws std::invalid_argument on length mismatch or non-finite entries.
  static PointCloud make(std::vector<Vec3> points, std::vector<double> intensities);
  size_t size() const { return points.size(); }
};

// Per-frame supervision: RGB plus pseudo-GT panoptic labels. Instance
// masks may overlap (noisy pseudo-labels); overlap is resolved later by
// argmax. Semantic class id -1 marks unlabeled pixels.
struct FrameBundle {
  Camera camera;
  Image rgb;                        // W x H x 3 in [0, 1]
  IntPlane sem_gt;                  // W x H x 1 class ids, -1 = ignore
  std::vector<Image> instance_gt;   // binary W x H x 1 planes
};

// Learnable object hypothesis: a feature vector paired with a spatial
// 3D Gaussian. Class id is derived from pseudo-label votes collected
// over Hungarian matches.
struct InstanceQuery {
  VecX feature;                 // C_ins entries
  Vec3 mean = Vec3::Zero();
  Mat3 cov = Mat3::Identity();  // SPD, kept symmetric with an eps*I floor
  std::vector<int64_t> class_votes;
  int class_id = -1;
  int64_t assign_count = 0;
  bool alive = true;
};

// Cross-attention projections plus the positional-encoding config.
// The sinusoidal encoding is projected to C_ins dims by a fixed random
// map derived from pos_enc_seed; only the seed is checkpointed.
struct AttentionWeights {
  MatX w_q, w_k, w_v;  // C_ins x d
  int pos_enc_bands = 6;
  double pos_enc_base_freq = 0.5;
  uint64_t pos_enc_seed = 42;

  int dim() const { return static_cast<int>(w_q.cols()); }
  int c_ins() const { return static_cast<int>(w_q.rows()); }

  static AttentionWeights init(int c_ins, int d, uint64_t seed);
};

struct SceneMap {
  std::vector<Surfel> surfels;
  std::vector<std::string> vocabulary;
  std::vector<InstanceQuery> queries;
  AttentionWeights attn;

  int c_sem() const { return surfels.empty() ? 0 : static_cast<int>(surfels[0].f_sem.size()); }
  int c_ins() const { return surfels.empty() ? 0 : static_cast<int>(surfels[0].f_ins.size()); }
  int alive_query_count() const;
};

struct Violation {
  int surfel_index;   // -1 for scene-level violations
  std::string field;
  std::string detail;
};

// Empty result iff every core-type invariant holds. Reporting only,
// never throws.
std::vector<Violation> validate_scene(const SceneMap& scene);

}  // namespace psimap

#endif
