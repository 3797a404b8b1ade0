// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/core_types.hpp"

#include <cmath>
#include <stdexcept>

namespace psimap {

TangentFrame tangent_frame(const Surfel& s) {
  if (!s.rotation.allFinite() || std::abs(s.rotation.norm() - 1.0) > 1e-6) {
    throw std::invalid_argument("degenerate quaternion");
  }
  const Mat3 r = rotation_from_quat(s.rotation);
  return TangentFrame{r.col(0), r.col(1), r.col(2)};
}

Camera Camera::make(const Mat3& r_cw, const Vec3& t_cw, double fx, double fy, double cx,
                    double cy, int width, int height, double near_clip, double far_clip) {
  if (!(fx > 0) || !(fy > 0)) throw std::invalid_argument("camera: focal must be positive");
  if (width <= 0 || height <= 0) throw std::invalid_argument("camera: image size must be positive");
  if (!(near_clip > 0) || !(near_clip < far_clip)) {
    throw std::invalid_argument("camera: require 0 < near < far");
  }
  if (!r_cw.allFinite() || !t_cw.allFinite()) throw std::invalid_argument("camera: non-finite pose");
  Camera c;
  c.r_cw = r_cw;
  c.t_cw = t_cw;
  c.fx = fx;
  c.fy = fy;
  c.cx = cx;
  c.cy = cy;
  c.width = width;
  c.height = height;
  c.near_clip = near_clip;
  c.far_clip = far_clip;
  return c;
}

Camera Camera::look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fx, double fy,
                       int width, int height, double near_clip, double far_clip) {
  Vec3 fwd = target - eye;
  if (fwd.norm() < 1e-12) throw std::invalid_argument("camera: eye equals target");
  fwd.normalize();
  Vec3 right = fwd.cross(up);
  if (right.norm() < 1e-9) {
    // up parallel to view direction; pick another up
    right = fwd.cross(Vec3(1, 0, 0));
    if (right.norm() < 1e-9) right = fwd.cross(Vec3(0, 1, 0));
  }
  right.normalize();
  const Vec3 down = fwd.cross(right);  // +y in image points down
  Mat3 r_wc;
  r_wc.col(0) = right;
  r_wc.col(1) = down;
  r_wc.col(2) = fwd;
  const Mat3 r_cw = r_wc.transpose();
  return make(r_cw, -r_cw * eye, fx, fy, 0.5 * width, 0.5 * height, width, height, near_clip,
              far_clip);
}

PointCloud PointCloud::make(std::vector<Vec3> points, std::vector<double> intensities) {
  if (points.size() != intensities.size()) {
    throw std::invalid_argument("point cloud: points/intensities length mismatch");
  }
  for (size_t i = 0; i < points.size(); ++i) {
    if (!points[i].allFinite() || !std::isfinite(intensities[i])) {
      throw std::invalid_argument("point cloud: non-finite entry at index " + std::to_string(i));
    }
  }
  PointCloud pc;
  pc.points = std::move(points);
  pc.intensities = std::move(intensities);
  return pc;
}

AttentionWeights AttentionWeights::init(int c_ins, int d, uint64_t seed) {
  if (c_ins <= 0 || d <= 0) throw std::invalid_argument("attention weights: dims must be positive");
  AttentionWeights w;
  Rng rng(seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c_ins));
  w.w_q = MatX(c_ins, d);
  w.w_k = MatX(c_ins, d);
  w.w_v = MatX(c_ins, d);
  for (MatX* m : {&w.w_q, &w.w_k, &w.w_v}) {
    for (int i = 0; i < c_ins; ++i) {
      for (int j = 0; j < d; ++j) (*m)(i, j) = rng.normal() * scale;
    }
  }
  w.pos_enc_seed = seed ^ 0x5e5e5e5e5e5e5e5eull;
  return w;
}

int SceneMap::alive_query_count() const {
  int n = 0;
  for (const auto& q : queries) {
    if (q.alive) ++n;
  }
  return n;
}

namespace {

void check_unit_interval(std::vector<Violation>& out, int idx, const char* field, double v) {
  if (!(v >= 0.0 && v <= 1.0) || !std::isfinite(v)) {
    out.push_back({idx, field, "value " + std::to_string(v) + " outside [0, 1]"});
  }
}

}  // namespace

std::vector<Violation> validate_scene(const SceneMap& scene) {
  std::vector<Violation> out;
  const int c_sem = scene.c_sem();
  const int c_ins = scene.c_ins();
  for (size_t i = 0; i < scene.surfels.size(); ++i) {
    const Surfel& s = scene.surfels[i];
    const int idx = static_cast<int>(i);
    if (!s.center.allFinite()) {
      out.push_back({idx, "center", "non-finite"});
    }
    if (!s.rotation.allFinite() || std::abs(s.rotation.norm() - 1.0) > 1e-6) {
      out.push_back({idx, "rotation", "quaternion norm off unit"});
    }
    if (!(s.scales[0] > 0) || !(s.scales[1] > 0) || !s.scales.allFinite()) {
      out.push_back({idx, "scale", "scales must be positive"});
    }
    check_unit_interval(out, idx, "opacity", s.opacity);
    for (int c = 0; c < 3; ++c) check_unit_interval(out, idx, "color", s.color[c]);
    if (static_cast<int>(s.f_sem.size()) != c_sem) {
      out.push_back({idx, "f_sem", "semantic feature dim not uniform"});
    } else if (!s.f_sem.allFinite()) {
      out.push_back({idx, "f_sem", "non-finite"});
    }
    if (static_cast<int>(s.f_ins.size()) != c_ins) {
      out.push_back({idx, "f_ins", "instance feature dim not uniform"});
    } else if (!s.f_ins.allFinite()) {
      out.push_back({idx, "f_ins", "non-finite"});
    }
  }
  return out;
}

}  // namespace psimap
