#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "psimap/core_types.hpp"

using namespace psimap;

namespace {

Surfel unit_surfel() {
  Surfel s;
  s.center = Vec3(0, 0, 0);
  s.rotation = Vec4(1, 0, 0, 0);
  s.scales = Vec2(0.5, 0.5);
  s.opacity = 0.5;
  s.color = Vec3(0.2, 0.4, 0.6);
  s.f_sem = VecX::Zero(3);
  s.f_ins = VecX::Zero(4);
  return s;
}

SceneMap small_scene(int n) {
  SceneMap scene;
  scene.vocabulary = {"a", "b", "c"};
  for (int i = 0; i < n; ++i) scene.surfels.push_back(unit_surfel());
  return scene;
}

bool has_violation(const std::vector<Violation>& v, int idx, const std::string& field) {
  for (const auto& x : v) {
    if (x.surfel_index == idx && x.field == field) return true;
  }
  return false;
}

}  // namespace

TEST_CASE("validate_scene passes a clean scene") {
  SceneMap scene = small_scene(5);
  CHECK(validate_scene(scene).empty());
}

TEST_CASE("validate_scene flags each violation class") {
  SceneMap scene = small_scene(6);
  scene.surfels[1].scales[0] = 0.0;
  scene.surfels[2].opacity = 1.5;
  scene.surfels[3].rotation = Vec4(1, 1, 0, 0);  // norm sqrt(2)
  scene.surfels[4].color[1] = -0.2;
  scene.surfels[5].f_sem = VecX::Zero(7);  // non-uniform dim

  const auto v = validate_scene(scene);
  CHECK(has_violation(v, 1, "scale"));
  CHECK(has_violation(v, 2, "opacity"));
  CHECK(has_violation(v, 3, "rotation"));
  CHECK(has_violation(v, 4, "color"));
  CHECK(has_violation(v, 5, "f_sem"));
  CHECK_FALSE(has_violation(v, 0, "scale"));
}

TEST_CASE("tangent_frame identity quaternion") {
  Surfel s = unit_surfel();
  const TangentFrame f = tangent_frame(s);
  CHECK(f.t_u.isApprox(Vec3(1, 0, 0), 1e-12));
  CHECK(f.t_v.isApprox(Vec3(0, 1, 0), 1e-12));
  CHECK(f.n.isApprox(Vec3(0, 0, 1), 1e-12));
}

TEST_CASE("tangent_frame 90 degrees about z") {
  Surfel s = unit_surfel();
  const double c = std::cos(M_PI / 4), sn = std::sin(M_PI / 4);
  s.rotation = Vec4(c, 0, 0, sn);
  const TangentFrame f = tangent_frame(s);
  CHECK(f.t_u.isApprox(Vec3(0, 1, 0), 1e-12));
  CHECK(f.t_v.isApprox(Vec3(-1, 0, 0), 1e-12));
  CHECK(f.n.isApprox(Vec3(0, 0, 1), 1e-12));
}

TEST_CASE("tangent_frame orthonormal right-handed for random quaternions") {
  Rng rng(11);
  for (int trial = 0; trial < 200; ++trial) {
    Surfel s = unit_surfel();
    s.rotation = rng.unit_quaternion();
    const TangentFrame f = tangent_frame(s);
    CHECK(std::abs(f.t_u.norm() - 1.0) < 1e-10);
    CHECK(std::abs(f.t_v.norm() - 1.0) < 1e-10);
    CHECK(std::abs(f.n.norm() - 1.0) < 1e-10);
    CHECK(std::abs(f.t_u.dot(f.t_v)) < 1e-10);
    CHECK(std::abs(f.t_u.dot(f.n)) < 1e-10);
    CHECK(std::abs(f.t_v.dot(f.n)) < 1e-10);
    CHECK((f.t_u.cross(f.t_v) - f.n).norm() < 1e-10);
    Mat3 m;
    m.col(0) = f.t_u;
    m.col(1) = f.t_v;
    m.col(2) = f.n;
    CHECK(m.determinant() == doctest::Approx(1.0).epsilon(1e-10));
  }
}

TEST_CASE("tangent_frame rejects degenerate quaternions") {
  Surfel s = unit_surfel();
  s.rotation = Vec4(0, 0, 0, 0);
  CHECK_THROWS_AS(tangent_frame(s), std::invalid_argument);
  s.rotation = Vec4(2, 0, 0, 0);  // far from unit
  CHECK_THROWS_AS(tangent_frame(s), std::invalid_argument);
}

TEST_CASE("camera factory validates inputs") {
  CHECK_THROWS_AS(
      Camera::make(Mat3::Identity(), Vec3::Zero(), -1, 1, 0, 0, 10, 10, 0.1, 10.0),
      std::invalid_argument);
  CHECK_THROWS_AS(Camera::make(Mat3::Identity(), Vec3::Zero(), 1, 1, 0, 0, 10, 10, 5.0, 1.0),
                  std::invalid_argument);
  CHECK_THROWS_AS(Camera::make(Mat3::Identity(), Vec3::Zero(), 1, 1, 0, 0, 0, 10, 0.1, 10.0),
                  std::invalid_argument);
  CHECK_NOTHROW(Camera::make(Mat3::Identity(), Vec3::Zero(), 100, 100, 32, 32, 64, 64, 0.1, 50));
}

TEST_CASE("point cloud factory validates lengths and finiteness") {
  CHECK_THROWS_AS(PointCloud::make({Vec3(0, 0, 0)}, {0.5, 0.6}), std::invalid_argument);
  std::vector<Vec3> pts = {Vec3(0, 0, 0), Vec3(1, 0, std::nan(""))};
  CHECK_THROWS_AS(PointCloud::make(pts, {0.1, 0.2}), std::invalid_argument);
  CHECK_NOTHROW(PointCloud::make({Vec3(0, 0, 0)}, {0.5}));
}

TEST_CASE("quaternion rotation round trip") {
  Rng rng(3);
  for (int i = 0; i < 100; ++i) {
    const Vec4 q = rng.unit_quaternion();
    const Mat3 r = rotation_from_quat(q);
    const Vec4 back = quat_from_rotation(r);
    // q and -q encode the same rotation
    const double diff = std::min((back - q).norm(), (back + q).norm());
    CHECK(diff < 1e-9);
  }
}

TEST_CASE("rotation jacobian matches finite differences") {
  Rng rng(17);
  for (int trial = 0; trial < 20; ++trial) {
    Vec4 q = rng.unit_quaternion() * rng.uniform(0.5, 2.0);  // unnormalized on purpose
    Mat3 r;
    std::array<Mat3, 4> dr;
    rotation_from_quat_jacobian(q, r, dr);
    const double h = 1e-6;
    for (int i = 0; i < 4; ++i) {
      Vec4 qp = q, qm = q;
      qp[i] += h;
      qm[i] -= h;
      const Mat3 fd = (rotation_from_quat(qp) - rotation_from_quat(qm)) / (2 * h);
      CHECK((fd - dr[i]).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}
