#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "psimap/raster.hpp"
#include "psimap/synthetic.hpp"

using namespace psimap;

namespace {

Camera front_camera(int w = 64, int h = 64, double f = 100.0) {
  // identity pose looking down +z, principal point on a pixel center
  return Camera::make(Mat3::Identity(), Vec3::Zero(), f, f, w / 2 - 0.5, h / 2 - 0.5, w, h, 0.1,
                      100.0);
}

Surfel facing_surfel(const Vec3& center, double s1, double s2, double opacity, const Vec3& color) {
  Surfel s;
  s.center = center;
  s.rotation = Vec4(1, 0, 0, 0);  // tangent = x/y, normal = +z
  s.scales = Vec2(s1, s2);
  s.opacity = opacity;
  s.color = color;
  s.f_sem = VecX::Zero(2);
  s.f_ins = VecX::Zero(2);
  return s;
}

SceneMap one_surfel_scene(const Surfel& s) {
  SceneMap scene;
  scene.vocabulary = {"x", "y"};
  scene.surfels.push_back(s);
  return scene;
}

}  // namespace

TEST_CASE("projection: pinhole scaling of the covariance") {
  const Camera cam = front_camera();
  const Surfel s = facing_surfel(Vec3(0, 0, 2), 0.1, 0.1, 1.0, Vec3(1, 0, 0));
  RasterConfig cfg;
  const auto p = project_surfel(s, cam, cfg);
  REQUIRE(p.has_value());
  // sigma_px = s * f / z = 0.1 * 100 / 2 = 5 -> sigma' = diag(25, 25)
  CHECK(p->sigma(0, 0) == doctest::Approx(25.0).epsilon(1e-9));
  CHECK(p->sigma(1, 1) == doctest::Approx(25.0).epsilon(1e-9));
  CHECK(std::abs(p->sigma(0, 1)) < 1e-9);
  CHECK(p->sort_depth == doctest::Approx(2.0));
  CHECK(p->screen_center[0] == doctest::Approx(cam.cx));
  CHECK(p->screen_center[1] == doctest::Approx(cam.cy));
}

TEST_CASE("projection culls behind-camera and grazing surfels") {
  const Camera cam = front_camera();
  RasterConfig cfg;
  CHECK_FALSE(project_surfel(facing_surfel(Vec3(0, 0, -2), 0.1, 0.1, 1, Vec3(1, 0, 0)), cam, cfg)
                  .has_value());
  // plane passes through the camera center: normal = z, center on z=0... use
  // an edge-on surfel whose plane contains the origin
  Surfel graze = facing_surfel(Vec3(0, 0, 2), 0.1, 0.1, 1, Vec3(1, 0, 0));
  // rotate 90 about x: tangent plane becomes x-z, normal = -y; plane y=0 contains origin
  const double c = std::cos(M_PI / 4), sn = std::sin(M_PI / 4);
  graze.rotation = Vec4(c, sn, 0, 0);
  CHECK_FALSE(project_surfel(graze, cam, cfg).has_value());
}

TEST_CASE("edge-on surfel: near-singular sigma but finite exact alpha") {
  const Camera cam = front_camera();
  RasterConfig cfg;
  cfg.support_cutoff = false;
  Surfel s = facing_surfel(Vec3(0.3, 0, 2), 0.4, 0.4, 1.0, Vec3(1, 0, 0));
  // tilt almost edge-on (rotate ~88 degrees about y)
  const double ang = 88.0 * M_PI / 180.0;
  s.rotation = Vec4(std::cos(ang / 2), 0, std::sin(ang / 2), 0);
  const auto p = project_surfel(s, cam, cfg);
  REQUIRE(p.has_value());
  const double lmin = 0.5 * (p->sigma.trace() -
                             std::sqrt(std::pow(p->sigma(0, 0) - p->sigma(1, 1), 2) +
                                       4 * p->sigma(0, 1) * p->sigma(0, 1)));
  const double lmax = p->sigma.trace() - lmin;
  CHECK(lmin / lmax < 0.05);  // near rank-1

  // alpha via homography matches a direct ray-plane intersection
  const double px = p->screen_center[0] + 1.0, py = p->screen_center[1];
  const AlphaSample smp = sample_surfel_alpha(*p, cam, px, py, cfg);
  REQUIRE(smp.inside);
  CHECK(std::isfinite(smp.u));
  CHECK(std::isfinite(smp.v));

  const Vec3 ray((px - cam.cx) / cam.fx, (py - cam.cy) / cam.fy, 1.0);
  const Mat3 r = rotation_from_quat(s.rotation);
  const Vec3 n = r.col(2);
  const double t = n.dot(s.center) / n.dot(ray);
  const Vec3 hit = t * ray;
  const double u_direct = (hit - s.center).dot(r.col(0)) / s.scales[0];
  const double v_direct = (hit - s.center).dot(r.col(1)) / s.scales[1];
  CHECK(smp.u == doctest::Approx(u_direct).epsilon(1e-8));
  CHECK(smp.v == doctest::Approx(v_direct).epsilon(1e-8));
  CHECK(1.0 / smp.w2 == doctest::Approx(t).epsilon(1e-8));
}

TEST_CASE("evaluate_alpha closed forms") {
  const Camera cam = front_camera();
  RasterConfig cfg;
  Surfel s = facing_surfel(Vec3(0, 0, 2), 0.1, 0.1, 0.8, Vec3(1, 0, 0));
  const auto p = project_surfel(s, cam, cfg);
  REQUIRE(p.has_value());

  // at the center: alpha = o * 1
  CHECK(evaluate_alpha(*p, s, cam, cam.cx, cam.cy, cfg) == doctest::Approx(0.8).epsilon(1e-12));

  // (u, v) = (1, 1): one sigma along both axes -> o * exp(-1)
  const double px = cam.cx + 5.0, py = cam.cy + 5.0;  // sigma_px = 5
  CHECK(evaluate_alpha(*p, s, cam, px, py, cfg) ==
        doctest::Approx(0.8 * std::exp(-1.0)).epsilon(1e-9));

  // 4 sigma out: below 1/255, clamped to zero
  RasterConfig wide = cfg;
  wide.chi2 = 100.0;  // keep the support cutoff out of the way
  const auto p2 = project_surfel(s, cam, wide);
  CHECK(evaluate_alpha(*p2, s, cam, cam.cx + 20.0, cam.cy + 20.0, wide) == 0.0);
}

TEST_CASE("binning: isotropic footprints give identical assignments") {
  const Camera cam = front_camera();
  RasterConfig cfg;
  std::vector<ProjectedSurfel> projected;
  Rng rng(5);
  for (int i = 0; i < 40; ++i) {
    const Surfel s = facing_surfel(Vec3(rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5),
                                        rng.uniform(1.5, 4.0)),
                                   0.08, 0.08, 0.9, Vec3(1, 1, 1));
    auto p = project_surfel(s, cam, cfg);
    if (p) {
      p->source = static_cast<int>(projected.size());
      projected.push_back(*p);
    }
  }
  const TileGrid a = bin_circle(projected, cam, cfg);
  const TileGrid b = bin_aabb(projected, cam, cfg, cfg.chi2);
  REQUIRE(a.tiles.size() == b.tiles.size());
  for (size_t t = 0; t < a.tiles.size(); ++t) CHECK(a.tiles[t] == b.tiles[t]);
  CHECK(a.rn_total == b.rn_total);
}

TEST_CASE("binning: elongated footprint gets strictly fewer tiles from the AABB") {
  const Camera cam = front_camera(128, 128);
  RasterConfig cfg;
  // sigma' = diag(400, 1) px^2: 3-sigma box 120x6 px vs circle square 120x120
  Surfel s = facing_surfel(Vec3(0, 0, 2), 0.4, 0.02, 0.9, Vec3(1, 1, 1));
  auto p = project_surfel(s, cam, cfg);
  REQUIRE(p.has_value());
  CHECK(p->sigma(0, 0) == doctest::Approx(400.0).epsilon(1e-9));
  CHECK(p->sigma(1, 1) == doctest::Approx(1.0).epsilon(1e-9));
  p->source = 0;
  std::vector<ProjectedSurfel> projected = {*p};
  const TileGrid a = bin_circle(projected, cam, cfg);
  const TileGrid b = bin_aabb(projected, cam, cfg, cfg.chi2);

  // enumerate expected tiles for the placed example (16 px tiles)
  // aabb: x in [3.5, 124.4], y in [60.5, 66.9] -> tiles x 0..7, y 3..4
  uint64_t expected_aabb = 8 * 2;
  CHECK(b.rn_total == expected_aabb);
  CHECK(a.rn_total > b.rn_total);
  // circle square covers the full 8x8 tile grid
  CHECK(a.rn_total == 64);
}

TEST_CASE("bin_aabb never assigns more tiles than bin_circle") {
  const Camera cam = front_camera(128, 96);
  RasterConfig cfg;
  Rng rng(9);
  std::vector<ProjectedSurfel> projected;
  for (int i = 0; i < 200; ++i) {
    Surfel s = facing_surfel(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(1, 6)),
                             rng.uniform(0.02, 0.5), rng.uniform(0.02, 0.5), 0.9, Vec3(1, 1, 1));
    s.rotation = rng.unit_quaternion();
    auto p = project_surfel(s, cam, cfg);
    if (p) {
      p->source = static_cast<int>(projected.size());
      projected.push_back(*p);
    }
  }
  const TileGrid a = bin_circle(projected, cam, cfg);
  const TileGrid b = bin_aabb(projected, cam, cfg, cfg.chi2);
  // per-surfel tile sets are nested
  std::vector<int> count_a(projected.size(), 0), count_b(projected.size(), 0);
  for (const auto& tile : a.tiles) {
    for (int i : tile) ++count_a[i];
  }
  for (const auto& tile : b.tiles) {
    for (int i : tile) ++count_b[i];
  }
  for (size_t i = 0; i < projected.size(); ++i) CHECK(count_b[i] <= count_a[i]);
  CHECK(b.rn_total <= a.rn_total);
}

TEST_CASE("render: single opaque surfel covering the center pixel") {
  const Camera cam = front_camera();
  const SceneMap scene = one_surfel_scene(facing_surfel(Vec3(0, 0, 2), 0.2, 0.2, 1.0,
                                                        Vec3(0.3, 0.6, 0.9)));
  RasterConfig cfg;
  cfg.background = Vec3(0.1, 0.1, 0.1);
  const RenderTargets out = render(scene, nullptr, cam, cfg);
  const int x = static_cast<int>(cam.cx), y = static_cast<int>(cam.cy);
  CHECK(out.color.at(x, y, 0) == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(out.color.at(x, y, 1) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(out.color.at(x, y, 2) == doctest::Approx(0.9).epsilon(1e-12));
  CHECK(out.alpha_acc.at(x, y) == doctest::Approx(1.0).epsilon(1e-12));
  // depth of the exact ray-plane hit through the center pixel
  CHECK(out.depth.at(x, y, 0) == doctest::Approx(2.0).epsilon(1e-9));
  CHECK(out.depth.at(x, y, 1) == doctest::Approx(2.0).epsilon(1e-9));
}

TEST_CASE("render: two-surfel alpha arithmetic") {
  const Camera cam = front_camera();
  SceneMap scene;
  scene.vocabulary = {"x", "y"};
  scene.surfels.push_back(facing_surfel(Vec3(0, 0, 2), 0.2, 0.2, 0.5, Vec3(1, 0, 0)));
  scene.surfels.push_back(facing_surfel(Vec3(0, 0, 3), 0.3, 0.3, 1.0, Vec3(0, 1, 0)));
  RasterConfig cfg;
  const RenderTargets out = render(scene, nullptr, cam, cfg);
  const int x = static_cast<int>(cam.cx), y = static_cast<int>(cam.cy);
  // front contributes 0.5, back 0.5 * 1.0
  CHECK(out.color.at(x, y, 0) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.color.at(x, y, 1) == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out.color.at(x, y, 2) == doctest::Approx(0.0).epsilon(1e-12));
}

TEST_CASE("render: empty scene gives background and zero opacity") {
  const Camera cam = front_camera(16, 16);
  SceneMap scene;
  RasterConfig cfg;
  cfg.background = Vec3(0.25, 0.5, 0.75);
  const RenderTargets out = render(scene, nullptr, cam, cfg);
  for (int y = 0; y < 16; ++y) {
    for (int x = 0; x < 16; ++x) {
      CHECK(out.color.at(x, y, 0) == 0.25);
      CHECK(out.color.at(x, y, 1) == 0.5);
      CHECK(out.color.at(x, y, 2) == 0.75);
      CHECK(out.alpha_acc.at(x, y) == 0.0);
      CHECK(out.ins_argmax.at(x, y) == -1);
    }
  }
}

TEST_CASE("binning soundness: circle and aabb render identical color planes") {
  StreetSpec spec;
  spec.n_surfels = 400;
  spec.image_w = 96;
  spec.image_h = 64;
  spec.c_sem = 4;
  const StreetScene street = make_street_scene(spec);
  RasterConfig cfg;
  cfg.binning = Binning::Circle;
  const RenderTargets a = render(street.scene, &street.labels, street.camera, cfg);
  cfg.binning = Binning::Aabb;
  const RenderTargets b = render(street.scene, &street.labels, street.camera, cfg);
  double max_diff = 0;
  for (size_t i = 0; i < a.color.data.size(); ++i) {
    max_diff = std::max(max_diff, std::abs(a.color.data[i] - b.color.data[i]));
  }
  CHECK(max_diff < 1e-6);
}

TEST_CASE("depth-order permutation leaves targets bit-identical") {
  StreetSpec spec;
  spec.n_surfels = 200;
  spec.image_w = 64;
  spec.image_h = 48;
  spec.c_sem = 3;
  const StreetScene street = make_street_scene(spec);

  // shuffled copy of the scene (labels permuted identically)
  std::vector<int> perm(street.scene.surfels.size());
  for (size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  Rng rng(13);
  for (int i = static_cast<int>(perm.size()) - 1; i > 0; --i) {
    std::swap(perm[i], perm[rng.uniform_int(i + 1)]);
  }
  SceneMap shuffled = street.scene;
  MatX shuffled_labels = street.labels;
  for (size_t i = 0; i < perm.size(); ++i) {
    shuffled.surfels[i] = street.scene.surfels[perm[i]];
    shuffled_labels.col(i) = street.labels.col(perm[i]);
  }

  RasterConfig cfg;
  const RenderTargets a = render(street.scene, &street.labels, street.camera, cfg);
  const RenderTargets b = render(shuffled, &shuffled_labels, street.camera, cfg);
  CHECK(a.color.data == b.color.data);
  CHECK(a.sem_feat.data == b.sem_feat.data);
  CHECK(a.ins_dist.data == b.ins_dist.data);
  CHECK(a.depth.data == b.depth.data);
}

TEST_CASE("transmittance invariant: accumulated opacity within [0, 1]") {
  StreetSpec spec;
  spec.n_surfels = 300;
  spec.image_w = 64;
  spec.image_h = 48;
  spec.c_sem = 2;
  const StreetScene street = make_street_scene(spec);
  RasterConfig cfg;
  const RenderTargets out = render(street.scene, &street.labels, street.camera, cfg);
  for (double a : out.alpha_acc.data) {
    CHECK(a >= 0.0);
    CHECK(a <= 1.0 + 1e-12);
  }
}

TEST_CASE("top-k feature error is bounded by the tail mass") {
  // 50 stacked low-opacity surfels on one pixel column
  const Camera cam = front_camera(32, 32);
  SceneMap scene;
  scene.vocabulary = {"x"};
  Rng rng(31);
  const int n = 50;
  MatX labels = MatX::Zero(4, n);
  for (int i = 0; i < n; ++i) {
    Surfel s = facing_surfel(Vec3(rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02),
                                  1.5 + 0.05 * i),
                             0.3, 0.3, rng.uniform(0.03, 0.12), Vec3(0.5, 0.5, 0.5));
    s.f_sem = VecX(2);
    s.f_sem << rng.uniform(-1, 1), rng.uniform(-1, 1);
    s.f_ins = VecX::Zero(2);
    scene.surfels.push_back(s);
    for (int q = 0; q < 4; ++q) labels(q, i) = 0.25;
  }

  RasterConfig full_cfg;
  full_cfg.t_min = 0;  // keep every contributor so the tail mass is exact
  RenderCache cache;
  const RenderTargets full = render(scene, &labels, cam, full_cfg, &cache);

  RasterConfig topk_cfg = full_cfg;
  topk_cfg.blending = Blending::TopK;
  topk_cfg.top_k = 8;
  const RenderTargets sel = render(scene, &labels, cam, topk_cfg);

  // the full pass is the oracle: per pixel, error <= max|f| * tail mass
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      const auto& contribs = cache.pixels[static_cast<size_t>(y) * cam.width + x];
      const int m = static_cast<int>(contribs.size());
      if (m == 0) continue;
      std::vector<double> w(m);
      double t = 1;
      double max_f = 0;
      for (int j = 0; j < m; ++j) {
        w[j] = contribs[j].alpha * t;
        t *= 1 - contribs[j].alpha;
        const Surfel& sf = scene.surfels[cache.projected[contribs[j].proj].source];
        max_f = std::max(max_f, sf.f_sem.cwiseAbs().maxCoeff());
      }
      std::vector<double> sorted_w = w;
      std::sort(sorted_w.begin(), sorted_w.end(), std::greater<double>());
      double tail = 0;
      for (size_t j = 8; j < sorted_w.size(); ++j) tail += sorted_w[j];
      for (int c = 0; c < 2; ++c) {
        const double err = std::abs(full.sem_feat.at(x, y, c) - sel.sem_feat.at(x, y, c));
        CHECK(err <= max_f * tail + 1e-12);
      }
    }
  }
  CHECK(sel.blended_total < full.blended_total);
}

TEST_CASE("bench grid: deterministic counters across repetitions") {
  StreetSpec spec;
  spec.n_surfels = 250;
  spec.image_w = 64;
  spec.image_h = 48;
  spec.c_sem = 4;
  const StreetScene street = make_street_scene(spec);
  RasterConfig cfg;
  const BenchReport r1 = bench_render(street.scene, &street.labels, street.camera, 2, cfg);
  const BenchReport r2 = bench_render(street.scene, &street.labels, street.camera, 2, cfg);
  REQUIRE(r1.rows.size() == 4);
  for (size_t i = 0; i < 4; ++i) {
    CHECK(r1.rows[i].rn_total == r2.rows[i].rn_total);
    CHECK(r1.rows[i].blended_total == r2.rows[i].blended_total);
  }
  CHECK(r1.rows[1].rn_total <= r1.rows[0].rn_total);  // aabb <= circle
  // precise binning does not change what is blended
  CHECK(r1.rows[2].blended_total == r1.rows[3].blended_total);
}
