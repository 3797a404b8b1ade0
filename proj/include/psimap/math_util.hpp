// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_MATH_UTIL_HPP
#define PSIMAP_MATH_UTIL_HPP

#include <Eigen/Core>
#include <Eigen/Dense>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

namespace psimap {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec4 = Eigen::Vector4d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

// Deterministic RNG (splitmix64 core). std:: distributions are
// implementation-defined, so all sampling goes through this.
struct Rng {
  uint64_t state;

  explicit Rng(uint64_t seed = 0) : state(seed) {}

  uint64_t next() {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return static_cast<double>(next() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller, one draw per call
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // uniform integer in [0, n)
  uint64_t uniform_int(uint64_t n) { return n == 0 ? 0 : next() % n; }

  Vec3 normal3() { return Vec3(normal(), normal(), normal()); }

  Vec4 unit_quaternion() {
    Vec4 q(normal(), normal(), normal(), normal());
    double n = q.norm();
    if (n < 1e-12) return Vec4(1, 0, 0, 0);
    return q / n;
  }
};

// Rotation matrix from a (w, x, y, z) quaternion; normalizes internally.
// Columns are the rotated basis vectors (t_u, t_v, n).
Mat3 rotation_from_quat(const Vec4& q);

// Rotation matrix plus its partial derivatives w.r.t. the four raw
// quaternion components (normalization chain included).
void rotation_from_quat_jacobian(const Vec4& q, Mat3& r, std::array<Mat3, 4>& dr);

Vec4 quat_from_rotation(const Mat3& r);

// Eigen-decomposition of a symmetric 3x3, eigenvalues sorted descending.
// Columns of `vecs` are the corresponding unit eigenvectors.
void eigen_sym3_desc(const Mat3& m, Vec3& vals, Mat3& vecs);

// Symmetric 3x3 <-> 6 unique entries, order (00, 01, 02, 11, 12, 22).
Vec6 sym3_to_vec(const Mat3& m);
Mat3 vec_to_sym3(const Vec6& v);

double sigmoid(double x);
double logit(double p);

// Worker count: PSIMAP_THREADS when set, else hardware concurrency.
int worker_count();

// Chunked index-range parallel loop. fn(begin, end) runs on [begin, end).
// Chunk boundaries depend only on (n, threads), so any per-chunk output
// placed in disjoint slots is deterministic.
void parallel_chunks(int64_t n, int threads, const std::function<void(int64_t, int64_t)>& fn);

}  // namespace psimap

#endif
