// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/synthetic.hpp"

#include <algorithm>
#include <cmath>

namespace psimap {

namespace {

struct Face {
  Vec3 origin;   // corner
  Vec3 e1, e2;   // edges spanning the rectangle
  Vec3 normal;   // unit, outward
  int instance;
  int class_id;
  Vec3 color;
};

Vec4 quat_from_axes(const Vec3& t_u, const Vec3& t_v) {
  Mat3 r;
  r.col(0) = t_u.normalized();
  r.col(2) = t_u.cross(t_v).normalized();
  r.col(1) = r.col(2).cross(r.col(0));
  return quat_from_rotation(r);
}

// Tile a rectangular face with overlapping near-opaque discs.
void tile_face(const Face& f, double spacing, double opacity, Rng& rng,
               std::vector<Surfel>& surfels, std::vector<int>& instance,
               std::vector<int>& class_id) {
  const double l1 = f.e1.norm(), l2 = f.e2.norm();
  const int n1 = std::max(1, static_cast<int>(std::ceil(l1 / spacing)));
  const int n2 = std::max(1, static_cast<int>(std::ceil(l2 / spacing)));
  const double d1 = l1 / n1, d2 = l2 / n2;
  const Vec3 u1 = f.e1 / l1, u2 = f.e2 / l2;
  const Vec4 q = quat_from_axes(u1, u2);
  for (int i = 0; i < n1; ++i) {
    for (int j = 0; j < n2; ++j) {
      Surfel s;
      s.center = f.origin + (i + 0.5) * d1 * u1 + (j + 0.5) * d2 * u2;
      s.rotation = q;
      s.scales = Vec2(0.8 * d1, 0.8 * d2);
      s.opacity = opacity;
      for (int c = 0; c < 3; ++c) {
        s.color[c] = std::clamp(f.color[c] + rng.uniform(-0.06, 0.06), 0.0, 1.0);
      }
      s.f_sem = VecX();
      s.f_ins = VecX();
      surfels.push_back(std::move(s));
      instance.push_back(f.instance);
      class_id.push_back(f.class_id);
    }
  }
}

void box_faces(const Vec3& base_center, const Vec3& half, int instance, int class_id,
               const Vec3& color, std::vector<Face>& faces) {
  const double hx = half[0], hy = half[1], hz = half[2];
  const Vec3 c = base_center + Vec3(0, hy, 0);  // box sits on the floor
  // top
  faces.push_back({c + Vec3(-hx, hy, -hz), Vec3(2 * hx, 0, 0), Vec3(0, 0, 2 * hz),
                   Vec3(0, 1, 0), instance, class_id, color});
  // sides
  faces.push_back({c + Vec3(-hx, -hy, -hz), Vec3(2 * hx, 0, 0), Vec3(0, 2 * hy, 0),
                   Vec3(0, 0, -1), instance, class_id, color});
  faces.push_back({c + Vec3(-hx, -hy, hz), Vec3(2 * hx, 0, 0), Vec3(0, 2 * hy, 0),
                   Vec3(0, 0, 1), instance, class_id, color});
  faces.push_back({c + Vec3(-hx, -hy, -hz), Vec3(0, 0, 2 * hz), Vec3(0, 2 * hy, 0),
                   Vec3(-1, 0, 0), instance, class_id, color});
  faces.push_back({c + Vec3(hx, -hy, -hz), Vec3(0, 0, 2 * hz), Vec3(0, 2 * hy, 0),
                   Vec3(1, 0, 0), instance, class_id, color});
}

IntPlane classes_from_ids(const IntPlane& ids, const std::vector<int>& instance_class) {
  IntPlane out(ids.width, ids.height, 1, -1);
  for (int i = 0; i < ids.pixel_count(); ++i) {
    const int id = ids.data[i];
    if (id >= 0 && id < static_cast<int>(instance_class.size())) {
      out.data[i] = instance_class[id];
    }
  }
  return out;
}

}  // namespace

SyntheticScene make_synthetic_scene(const SyntheticSpec& spec) {
  SyntheticScene scene;
  Rng rng(spec.seed);
  const double extent = 4.0;
  const Vec3 center(extent / 2, 0.35, extent / 2);

  scene.vocabulary = {"floor", "crate", "barrel"};
  std::vector<Face> faces;
  faces.push_back({Vec3(0, 0, 0), Vec3(extent, 0, 0), Vec3(0, 0, extent), Vec3(0, 1, 0), 0, 0,
                   Vec3(0.45, 0.45, 0.48)});
  scene.instance_class = {0};

  const std::array<Vec3, 6> palette = {Vec3(0.85, 0.30, 0.25), Vec3(0.25, 0.55, 0.85),
                                       Vec3(0.35, 0.75, 0.35), Vec3(0.85, 0.70, 0.25),
                                       Vec3(0.70, 0.35, 0.80), Vec3(0.30, 0.75, 0.75)};
  for (int i = 0; i < spec.n_objects; ++i) {
    const double theta = 2.0 * M_PI * i / spec.n_objects + 0.45;
    const Vec3 pos = Vec3(extent / 2 + 1.15 * std::cos(theta), 0, extent / 2 + 1.15 * std::sin(theta));
    const Vec3 half(0.32 + 0.08 * rng.uniform(), 0.38 + 0.14 * rng.uniform(),
                    0.30 + 0.08 * rng.uniform());
    const int cls = 1 + (i % 2);
    const int instance = 1 + i;
    box_faces(pos, half, instance, cls, palette[i % palette.size()], faces);
    scene.instance_class.push_back(cls);
  }

  for (const Face& f : faces) {
    const double spacing = f.instance == 0 ? 0.16 : 0.09;
    tile_face(f, spacing, 0.95, rng, scene.gt_scene.surfels, scene.surfel_instance,
              scene.surfel_class);
  }
  scene.gt_scene.vocabulary = scene.vocabulary;

  // cameras on an orbit; every heldout-th view goes to the eval split
  const int n_total = spec.n_train + spec.n_heldout;
  std::vector<Camera> cams;
  std::vector<bool> is_heldout(n_total, false);
  for (int k = 0; k < n_total; ++k) {
    const double theta = 2.0 * M_PI * k / n_total;
    const Vec3 eye = center + Vec3(3.4 * std::cos(theta), 2.3, 3.4 * std::sin(theta));
    cams.push_back(Camera::look_at(eye, center, Vec3(0, 1, 0), spec.image_w, spec.image_w,
                                   spec.image_w, spec.image_h, 0.1, 100.0));
  }
  if (spec.n_heldout > 0) {
    const int stride = std::max(1, n_total / spec.n_heldout);
    int assigned = 0;
    for (int k = stride - 1; k < n_total && assigned < spec.n_heldout; k += stride) {
      is_heldout[k] = true;
      ++assigned;
    }
  }

  // GT renders: one-hot instance labels blended by the renderer
  const int n_inst = static_cast<int>(scene.instance_class.size());
  const int n_surf = static_cast<int>(scene.gt_scene.surfels.size());
  MatX onehot = MatX::Zero(n_inst, n_surf);
  for (int s = 0; s < n_surf; ++s) onehot(scene.surfel_instance[s], s) = 1.0;

  RasterConfig rc;
  rc.binning = Binning::Aabb;
  rc.render_depth_normal = false;

  for (int k = 0; k < n_total; ++k) {
    const RenderTargets targets = render(scene.gt_scene, &onehot, cams[k], rc);
    IntPlane ids(spec.image_w, spec.image_h, 1, -1);
    for (int y = 0; y < spec.image_h; ++y) {
      for (int x = 0; x < spec.image_w; ++x) {
        if (targets.alpha_acc.at(x, y) >= 0.5) ids.at(x, y) = targets.ins_argmax.at(x, y);
      }
    }
    IntPlane classes = classes_from_ids(ids, scene.instance_class);

    FrameBundle fb;
    fb.camera = cams[k];
    fb.rgb = targets.color;

    if (is_heldout[k]) {
      fb.sem_gt = classes;
      for (int inst = 0; inst < n_inst; ++inst) {
        Image mask(spec.image_w, spec.image_h, 1);
        bool any = false;
        for (int i = 0; i < ids.pixel_count(); ++i) {
          mask.data[i] = ids.data[i] == inst ? 1.0 : 0.0;
          any |= ids.data[i] == inst;
        }
        if (any) fb.instance_gt.push_back(std::move(mask));
      }
      scene.heldout_ids.push_back(ids);
      scene.heldout_classes.push_back(std::move(classes));
      scene.heldout_frames.push_back(std::move(fb));
      continue;
    }

    // pseudo-label corruption: per-instance shift + pixel dropout
    IntPlane noisy_ids(spec.image_w, spec.image_h, 1, -1);
    for (int inst = 0; inst < n_inst; ++inst) {
      int dx = 0, dy = 0;
      bool corrupt = rng.uniform() < spec.mask_noise;
      if (corrupt) {
        const int j = std::max(1, static_cast<int>(spec.boundary_jitter));
        dx = static_cast<int>(rng.uniform_int(2 * j + 1)) - j;
        dy = static_cast<int>(rng.uniform_int(2 * j + 1)) - j;
      }
      for (int y = 0; y < spec.image_h; ++y) {
        for (int x = 0; x < spec.image_w; ++x) {
          if (ids.at(x, y) != inst) continue;
          if (corrupt && rng.uniform() < spec.pixel_dropout) continue;
          const int nx = x + dx, ny = y + dy;
          if (nx < 0 || nx >= spec.image_w || ny < 0 || ny >= spec.image_h) continue;
          noisy_ids.at(nx, ny) = inst;
        }
      }
    }
    fb.sem_gt = classes_from_ids(noisy_ids, scene.instance_class);
    for (int inst = 0; inst < n_inst; ++inst) {
      Image mask(spec.image_w, spec.image_h, 1);
      bool any = false;
      for (int i = 0; i < noisy_ids.pixel_count(); ++i) {
        mask.data[i] = noisy_ids.data[i] == inst ? 1.0 : 0.0;
        any |= noisy_ids.data[i] == inst;
      }
      if (any) fb.instance_gt.push_back(std::move(mask));
    }
    scene.train_ids.push_back(std::move(noisy_ids));
    scene.train_classes.push_back(classes);
    scene.train_frames.push_back(std::move(fb));
  }

  // point cloud sampled from the faces, area-proportional
  double total_area = 0;
  for (const Face& f : faces) total_area += f.e1.norm() * f.e2.norm();
  double carry = 0;
  for (const Face& f : faces) {
    carry += f.e1.norm() * f.e2.norm() / total_area * spec.cloud_points;
    int n = static_cast<int>(std::floor(carry));
    carry -= n;
    const double gray = std::clamp(f.color.mean(), 0.0, 1.0);
    for (int i = 0; i < n; ++i) {
      const Vec3 p = f.origin + rng.uniform() * f.e1 + rng.uniform() * f.e2 +
                     rng.normal() * spec.cloud_sigma * f.normal;
      scene.cloud.points.push_back(p);
      scene.cloud.intensities.push_back(std::clamp(gray + rng.uniform(-0.02, 0.02), 0.0, 1.0));
    }
  }
  return scene;
}

StreetScene make_street_scene(const StreetSpec& spec) {
  StreetScene out;
  Rng rng(spec.seed);
  const int c_ins = 8;

  out.camera = Camera::look_at(Vec3(0, 0, 0), Vec3(0, 0, 20), Vec3(0, -1, 0),
                               0.8 * spec.image_w, 0.8 * spec.image_w, spec.image_w,
                               spec.image_h, 0.1, 200.0);

  // groups: ground strip, two tilted walls, stacked facade layers
  struct Group {
    Vec3 origin, e1, e2;
    int instance;
    double share;
  };
  std::vector<Group> groups;
  groups.push_back({Vec3(-4, 1.5, 1.5), Vec3(8, 0, 0), Vec3(0, 0, 38), 0, 0.10});
  groups.push_back({Vec3(-4.0, 1.5, 1.5), Vec3(0.9, -4.0, 0), Vec3(0, 0, 38), 1, 0.06});
  groups.push_back({Vec3(4.0, 1.5, 1.5), Vec3(-0.9, -4.0, 0), Vec3(0, 0, 38), 2, 0.06});
  // facade layers split into x-bands; every layer of a band shares one
  // instance (a building column), so depth-stacked contributors along a
  // ray mostly agree on the winning id
  const int n_layers = 18;
  const int bands = std::max(1, (spec.n_instances - 3) / n_layers + 1);
  for (int l = 0; l < n_layers; ++l) {
    const double z = 3.2 + 2.0 * l;
    const double band_w = 7.2 / bands;
    for (int b = 0; b < bands; ++b) {
      groups.push_back({Vec3(-3.6 + b * band_w, -2.6, z), Vec3(band_w, 0, 0), Vec3(0, 5.2, 0),
                        3 + (b % std::max(1, spec.n_instances - 3)),
                        0.78 / (n_layers * bands)});
    }
  }

  for (const Group& g : groups) {
    const int n = static_cast<int>(std::round(g.share * spec.n_surfels));
    const Vec3 u1 = g.e1.normalized();
    const Vec3 u2 = g.e2.normalized();
    const Vec3 g_normal = u1.cross(u2).normalized();
    for (int i = 0; i < n; ++i) {
      Surfel s;
      // small normal jitter keeps sort depths distinct
      s.center = g.origin + rng.uniform() * g.e1 + rng.uniform() * g.e2 +
                 rng.uniform(-0.03, 0.03) * g_normal;
      // elongated, rotated in-plane
      const double phi = rng.uniform(0, M_PI);
      const Vec3 t_u = std::cos(phi) * u1 + std::sin(phi) * u2;
      const Vec3 t_v_raw = -std::sin(phi) * u1 + std::cos(phi) * u2;
      s.rotation = quat_from_axes(t_u, t_v_raw);
      const double s1 = rng.uniform(0.45, 1.1);
      const double aspect = rng.uniform(spec.min_aspect, 2.0 * spec.min_aspect);
      s.scales = Vec2(s1, s1 / aspect);
      s.opacity = rng.uniform(0.30, 0.70);
      s.color = Vec3(rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9), rng.uniform(0.2, 0.9));
      s.f_sem = VecX(spec.c_sem);
      for (int c = 0; c < spec.c_sem; ++c) s.f_sem[c] = rng.normal();
      s.f_ins = VecX(c_ins);
      for (int c = 0; c < c_ins; ++c) s.f_ins[c] = 0.3 * rng.normal();
      out.scene.surfels.push_back(std::move(s));
    }
  }

  // near one-hot labels per structural instance
  const int n_s = static_cast<int>(out.scene.surfels.size());
  out.labels = MatX::Constant(spec.n_instances, n_s, 0.0);
  int at = 0;
  for (const Group& g : groups) {
    const int n = static_cast<int>(std::round(g.share * spec.n_surfels));
    for (int i = 0; i < n; ++i, ++at) {
      for (int q = 0; q < spec.n_instances; ++q) {
        out.labels(q, at) = q == g.instance ? 0.92 : 0.08 / (spec.n_instances - 1);
      }
    }
  }
  out.scene.vocabulary = {"street"};
  return out;
}

}  // namespace psimap
