// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/math_util.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cstdlib>
#include <stdexcept>
#include <thread>

namespace psimap {

namespace {

// Rotation matrix of a unit quaternion n = (w, x, y, z).
Mat3 rotation_unit(const Vec4& n) {
  const double w = n[0], x = n[1], y = n[2], z = n[3];
  Mat3 r;
  r << 1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
       2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
       2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y);
  return r;
}

// dR/dn for a unit quaternion, one matrix per component.
std::array<Mat3, 4> rotation_unit_grads(const Vec4& n) {
  const double w = n[0], x = n[1], y = n[2], z = n[3];
  std::array<Mat3, 4> g;
  g[0] << 0, -2 * z, 2 * y,
          2 * z, 0, -2 * x,
         -2 * y, 2 * x, 0;
  g[1] << 0, 2 * y, 2 * z,
          2 * y, -4 * x, -2 * w,
          2 * z, 2 * w, -4 * x;
  g[2] << -4 * y, 2 * x, 2 * w,
           2 * x, 0, 2 * z,
          -2 * w, 2 * z, -4 * y;
  g[3] << -4 * z, -2 * w, 2 * x,
           2 * w, -4 * z, 2 * y,
           2 * x, 2 * y, 0;
  return g;
}

}  // namespace

Mat3 rotation_from_quat(const Vec4& q) {
  const double norm = q.norm();
  if (!(norm > 1e-12) || !q.allFinite()) {
    throw std::invalid_argument("degenerate quaternion");
  }
  return rotation_unit(q / norm);
}

void rotation_from_quat_jacobian(const Vec4& q, Mat3& r, std::array<Mat3, 4>& dr) {
  const double norm = q.norm();
  if (!(norm > 1e-12) || !q.allFinite()) {
    throw std::invalid_argument("degenerate quaternion");
  }
  const Vec4 n = q / norm;
  r = rotation_unit(n);
  const std::array<Mat3, 4> gn = rotation_unit_grads(n);
  // dn_j/dq_i = (delta_ij - n_i n_j) / |q|
  for (int i = 0; i < 4; ++i) {
    Mat3 acc = Mat3::Zero();
    for (int j = 0; j < 4; ++j) {
      const double dn = ((i == j ? 1.0 : 0.0) - n[i] * n[j]) / norm;
      acc += gn[j] * dn;
    }
    dr[i] = acc;
  }
}

Vec4 quat_from_rotation(const Mat3& r) {
  // Shepperd's method; returns (w, x, y, z) with w >= 0.
  Vec4 q;
  const double tr = r.trace();
  if (tr > 0) {
    double s = std::sqrt(tr + 1.0) * 2;
    q << 0.25 * s, (r(2, 1) - r(1, 2)) / s, (r(0, 2) - r(2, 0)) / s, (r(1, 0) - r(0, 1)) / s;
  } else if (r(0, 0) > r(1, 1) && r(0, 0) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(0, 0) - r(1, 1) - r(2, 2)) * 2;
    q << (r(2, 1) - r(1, 2)) / s, 0.25 * s, (r(0, 1) + r(1, 0)) / s, (r(0, 2) + r(2, 0)) / s;
  } else if (r(1, 1) > r(2, 2)) {
    double s = std::sqrt(1.0 + r(1, 1) - r(0, 0) - r(2, 2)) * 2;
    q << (r(0, 2) - r(2, 0)) / s, (r(0, 1) + r(1, 0)) / s, 0.25 * s, (r(1, 2) + r(2, 1)) / s;
  } else {
    double s = std::sqrt(1.0 + r(2, 2) - r(0, 0) - r(1, 1)) * 2;
    q << (r(1, 0) - r(0, 1)) / s, (r(0, 2) + r(2, 0)) / s, (r(1, 2) + r(2, 1)) / s, 0.25 * s;
  }
  if (q[0] < 0) q = -q;
  return q / q.norm();
}

void eigen_sym3_desc(const Mat3& m, Vec3& vals, Mat3& vecs) {
  Eigen::SelfAdjointEigenSolver<Mat3> solver(m);
  if (solver.info() != Eigen::Success) {
    throw std::runtime_error("eigen decomposition failed");
  }
  // SelfAdjointEigenSolver sorts ascending; flip to descending.
  for (int i = 0; i < 3; ++i) {
    vals[i] = solver.eigenvalues()[2 - i];
    vecs.col(i) = solver.eigenvectors().col(2 - i);
  }
  // Right-handed convention.
  if (vecs.determinant() < 0) vecs.col(2) = -vecs.col(2);
}

Vec6 sym3_to_vec(const Mat3& m) {
  Vec6 v;
  v << m(0, 0), m(0, 1), m(0, 2), m(1, 1), m(1, 2), m(2, 2);
  return v;
}

Mat3 vec_to_sym3(const Vec6& v) {
  Mat3 m;
  m << v[0], v[1], v[2],
       v[1], v[3], v[4],
       v[2], v[4], v[5];
  return m;
}

double sigmoid(double x) {
  if (x >= 0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double logit(double p) {
  p = std::clamp(p, 1e-12, 1.0 - 1e-12);
  return std::log(p / (1.0 - p));
}

int worker_count() {
  if (const char* env = std::getenv("PSIMAP_THREADS")) {
    const int n = std::atoi(env);
    if (n > 0) return n;
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : static_cast<int>(hw);
}

void parallel_chunks(int64_t n, int threads, const std::function<void(int64_t, int64_t)>& fn) {
  if (threads <= 0) threads = worker_count();
  if (n <= 0) return;
  const int used = static_cast<int>(std::min<int64_t>(threads, n));
  if (used <= 1) {
    fn(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(used);
  const int64_t chunk = (n + used - 1) / used;
  for (int t = 0; t < used; ++t) {
    const int64_t begin = t * chunk;
    const int64_t end = std::min<int64_t>(begin + chunk, n);
    if (begin >= end) break;
    pool.emplace_back([&fn, begin, end] { fn(begin, end); });
  }
  for (auto& th : pool) th.join();
}

}  // namespace psimap
