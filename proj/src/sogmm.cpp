// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/sogmm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace psimap {

namespace {

constexpr double kLog2Pi = 1.8378770664093454836;  // log(2*pi)

Mat3 regularized_cov(const Mat3& cov) {
  const double eps = 1e-8 * std::max(cov.trace(), 1e-12);
  return cov + eps * Mat3::Identity();
}

// Gaussian stats of a point subset.
void subset_stats(const PointCloud& cloud, const std::vector<int>& idx, Vec3& mean, Mat3& cov) {
  mean.setZero();
  for (int i : idx) mean += cloud.points[i];
  mean /= static_cast<double>(idx.size());
  cov.setZero();
  for (int i : idx) {
    const Vec3 d = cloud.points[i] - mean;
    cov += d * d.transpose();
  }
  cov /= static_cast<double>(idx.size());
  cov = regularized_cov(cov);
}

void intensity_stats(const PointCloud& cloud, const std::vector<int>& idx, SogmmComponent& comp) {
  if (idx.empty()) {
    comp.intensity_mean = 0;
    comp.intensity_var = 0;
    return;
  }
  double m = 0;
  for (int i : idx) m += cloud.intensities[i];
  m /= static_cast<double>(idx.size());
  double v = 0;
  for (int i : idx) {
    const double d = cloud.intensities[i] - m;
    v += d * d;
  }
  comp.intensity_mean = m;
  comp.intensity_var = v / static_cast<double>(idx.size());
}

struct Node {
  std::vector<int> idx;
  int depth = 0;
};

// Split along v0 at the mean while the planarity ratio exceeds the
// threshold and the point/depth budget permits.
void recursive_split(const PointCloud& cloud, Node node, const SogmmFitConfig& cfg,
                     std::vector<Node>& leaves) {
  Vec3 mean;
  Mat3 cov;
  subset_stats(cloud, node.idx, mean, cov);
  Vec3 vals;
  Mat3 vecs;
  eigen_sym3_desc(cov, vals, vecs);
  const double ratio = vals[0] > 1e-18 ? vals[2] / vals[0] : 0.0;
  const bool oversized = cfg.max_points_per_component > 0 &&
                         static_cast<int>(node.idx.size()) > cfg.max_points_per_component;
  const bool can_split = static_cast<int>(node.idx.size()) >= 2 * cfg.min_points &&
                         node.depth < cfg.max_depth &&
                         (ratio > cfg.planarity_threshold || oversized);
  if (!can_split) {
    leaves.push_back(std::move(node));
    return;
  }
  Node lo, hi;
  lo.depth = hi.depth = node.depth + 1;
  for (int i : node.idx) {
    if ((cloud.points[i] - mean).dot(vecs.col(0)) <= 0) {
      lo.idx.push_back(i);
    } else {
      hi.idx.push_back(i);
    }
  }
  if (lo.idx.empty() || hi.idx.empty()) {
    leaves.push_back(std::move(node));
    return;
  }
  recursive_split(cloud, std::move(lo), cfg, leaves);
  recursive_split(cloud, std::move(hi), cfg, leaves);
}

double log_gauss(const Vec3& p, const Vec3& mean, const Mat3& cov_inv, double log_det) {
  const Vec3 d = p - mean;
  return -0.5 * (3.0 * kLog2Pi + log_det + d.dot(cov_inv * d));
}

struct CompCache {
  Mat3 cov_inv;
  double log_det;
  double log_weight;
};

std::vector<CompCache> cache_components(const std::vector<SogmmComponent>& comps) {
  std::vector<CompCache> out(comps.size());
  for (size_t k = 0; k < comps.size(); ++k) {
    Eigen::LLT<Mat3> llt(comps[k].cov);
    if (llt.info() != Eigen::Success) {
      // fall back to a regularized copy
      Eigen::LLT<Mat3> llt2(regularized_cov(comps[k].cov));
      out[k].cov_inv = llt2.solve(Mat3::Identity());
      const Mat3 l = llt2.matrixL();
      out[k].log_det = 2.0 * l.diagonal().array().log().sum();
    } else {
      out[k].cov_inv = llt.solve(Mat3::Identity());
      const Mat3 l = llt.matrixL();
      out[k].log_det = 2.0 * l.diagonal().array().log().sum();
    }
    out[k].log_weight = std::log(std::max(comps[k].weight, 1e-300));
  }
  return out;
}

// One EM pass; returns the log-likelihood trace (length iters + 1,
// entry 0 evaluated before the first update).
std::vector<double> em_refine(std::vector<SogmmComponent>& comps, const PointCloud& cloud,
                              int iters) {
  const int n = static_cast<int>(cloud.size());
  const int k = static_cast<int>(comps.size());
  std::vector<double> trace;
  std::vector<double> resp(static_cast<size_t>(n) * k);
  for (int it = 0; it <= iters; ++it) {
    const auto cache = cache_components(comps);
    // E step + log-likelihood
    double ll = 0;
    for (int i = 0; i < n; ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (int c = 0; c < k; ++c) {
        const double lg =
            cache[c].log_weight + log_gauss(cloud.points[i], comps[c].mean, cache[c].cov_inv,
                                            cache[c].log_det);
        resp[static_cast<size_t>(i) * k + c] = lg;
        best = std::max(best, lg);
      }
      double sum = 0;
      for (int c = 0; c < k; ++c) sum += std::exp(resp[static_cast<size_t>(i) * k + c] - best);
      const double log_norm = best + std::log(sum);
      ll += log_norm;
      for (int c = 0; c < k; ++c) {
        auto& r = resp[static_cast<size_t>(i) * k + c];
        r = std::exp(r - log_norm);
      }
    }
    trace.push_back(ll);
    if (it == iters) break;
    // M step
    for (int c = 0; c < k; ++c) {
      double mass = 0;
      Vec3 mean = Vec3::Zero();
      for (int i = 0; i < n; ++i) {
        const double r = resp[static_cast<size_t>(i) * k + c];
        mass += r;
        mean += r * cloud.points[i];
      }
      comps[c].weight = mass / n;
      if (mass < 1e-12) continue;  // starved component keeps its shape
      mean /= mass;
      Mat3 cov = Mat3::Zero();
      for (int i = 0; i < n; ++i) {
        const double r = resp[static_cast<size_t>(i) * k + c];
        const Vec3 d = cloud.points[i] - mean;
        cov += r * (d * d.transpose());
      }
      comps[c].mean = mean;
      comps[c].cov = regularized_cov(cov / mass);
    }
    // keep the mixture normalized
    double wsum = 0;
    for (auto& cmp : comps) wsum += cmp.weight;
    for (auto& cmp : comps) cmp.weight /= wsum;
  }
  return trace;
}

// Hard assignment by max responsibility; ties to the lowest index.
std::vector<int> hard_assign(const std::vector<SogmmComponent>& comps, const PointCloud& cloud) {
  const auto cache = cache_components(comps);
  std::vector<int> out(cloud.size());
  for (size_t i = 0; i < cloud.size(); ++i) {
    double best = -std::numeric_limits<double>::infinity();
    int arg = 0;
    for (size_t c = 0; c < comps.size(); ++c) {
      const double lg = cache[c].log_weight +
                        log_gauss(cloud.points[i], comps[c].mean, cache[c].cov_inv,
                                  cache[c].log_det);
      if (lg > best) {
        best = lg;
        arg = static_cast<int>(c);
      }
    }
    out[i] = arg;
  }
  return out;
}

}  // namespace

void eigen_frame(SogmmComponent& comp, const std::optional<Vec3>& camera_centroid) {
  if ((comp.cov - comp.cov.transpose()).cwiseAbs().maxCoeff() > 1e-10 * std::max(1.0, comp.cov.cwiseAbs().maxCoeff())) {
    throw std::invalid_argument("eigen_frame: covariance not symmetric");
  }
  const Mat3 sym = 0.5 * (comp.cov + comp.cov.transpose());
  Vec3 vals;
  Mat3 vecs;
  eigen_sym3_desc(sym, vals, vecs);
  Vec3 n = vecs.col(2);
  if (camera_centroid.has_value()) {
    if ((*camera_centroid - comp.mean).dot(n) < 0) n = -n;
  } else {
    int arg = 0;
    n.cwiseAbs().maxCoeff(&arg);
    if (n[arg] < 0) n = -n;
  }
  vecs.col(2) = n;
  if (vecs.determinant() < 0) vecs.col(1) = -vecs.col(1);
  comp.eigenvalues = vals;
  comp.eigenvectors = vecs;
  comp.normal = n;
}

SogmmModel fit_sogmm(const PointCloud& cloud, const SogmmFitConfig& cfg) {
  const int n = static_cast<int>(cloud.size());
  if (n < cfg.min_points) {
    throw std::invalid_argument("fit_sogmm: cloud smaller than min_points");
  }
  SogmmModel model;
  model.config = cfg;

  Node root;
  root.idx.resize(n);
  std::iota(root.idx.begin(), root.idx.end(), 0);
  std::vector<Node> leaves;
  recursive_split(cloud, std::move(root), cfg, leaves);

  auto make_component = [&](const Node& node) {
    SogmmComponent comp;
    comp.weight = static_cast<double>(node.idx.size()) / n;
    subset_stats(cloud, node.idx, comp.mean, comp.cov);
    comp.point_count = static_cast<int>(node.idx.size());
    comp.depth = node.depth;
    intensity_stats(cloud, node.idx, comp);
    eigen_frame(comp, cfg.camera_centroid);
    return comp;
  };
  for (const Node& node : leaves) model.components.push_back(make_component(node));

  // EM refinement, re-splitting leaves that EM pushed back over the
  // planarity threshold. Each round deepens violators by one split, so
  // the loop is bounded by max_depth.
  for (int round = 0;; ++round) {
    model.em_loglik.push_back(em_refine(model.components, cloud, cfg.em_iters));
    const std::vector<int> assign = hard_assign(model.components, cloud);
    std::vector<std::vector<int>> members(model.components.size());
    for (size_t i = 0; i < assign.size(); ++i) members[assign[i]].push_back(static_cast<int>(i));

    std::vector<SogmmComponent> next;
    bool split_any = false;
    for (size_t c = 0; c < model.components.size(); ++c) {
      SogmmComponent& comp = model.components[c];
      comp.point_count = static_cast<int>(members[c].size());
      intensity_stats(cloud, members[c], comp);
      eigen_frame(comp, cfg.camera_centroid);
      const double ratio =
          comp.eigenvalues[0] > 1e-18 ? comp.eigenvalues[2] / comp.eigenvalues[0] : 0.0;
      const bool splittable = ratio > cfg.planarity_threshold &&
                              comp.point_count >= 2 * cfg.min_points &&
                              comp.depth < cfg.max_depth && round < cfg.max_depth;
      if (!splittable) {
        next.push_back(comp);
        continue;
      }
      Node child;
      child.idx = members[c];
      child.depth = comp.depth;
      std::vector<Node> sub;
      recursive_split(cloud, std::move(child), cfg, sub);
      if (sub.size() <= 1) {
        next.push_back(comp);
        continue;
      }
      split_any = true;
      for (const Node& s : sub) {
        SogmmComponent childc = make_component(s);
        childc.weight = comp.weight * static_cast<double>(s.idx.size()) / comp.point_count;
        next.push_back(childc);
      }
    }
    model.components = std::move(next);
    if (!split_any) break;
  }

  double wsum = 0;
  for (auto& c : model.components) wsum += c.weight;
  for (auto& c : model.components) c.weight /= wsum;
  return model;
}

TangentCoords to_tangent(const SogmmComponent& comp, const Vec3& p, double g) {
  const Vec3 d = p - comp.mean;
  TangentCoords tc;
  tc.u = d.dot(comp.eigenvectors.col(0));
  tc.v = d.dot(comp.eigenvectors.col(1));
  tc.w = d.dot(comp.eigenvectors.col(2));
  tc.g = g;
  return tc;
}

Vec3 from_tangent(const SogmmComponent& comp, const TangentCoords& tc) {
  return comp.mean + tc.u * comp.eigenvectors.col(0) + tc.v * comp.eigenvectors.col(1) +
         tc.w * comp.eigenvectors.col(2);
}

double component_density(const SogmmComponent& comp, const Vec3& p) {
  Eigen::LLT<Mat3> llt(comp.cov);
  const Mat3 cov = llt.info() == Eigen::Success ? comp.cov : regularized_cov(comp.cov);
  Eigen::LLT<Mat3> llt2(cov);
  const Mat3 inv = llt2.solve(Mat3::Identity());
  const Mat3 l = llt2.matrixL();
  const double log_det = 2.0 * l.diagonal().array().log().sum();
  return std::exp(log_gauss(p, comp.mean, inv, log_det));
}

double density(const SogmmModel& model, const Vec3& p) {
  double sum = 0;
  for (const auto& c : model.components) sum += c.weight * component_density(c, p);
  return sum;
}

int nearest_component(const SogmmModel& model, const Vec3& p) {
  const auto cache = cache_components(model.components);
  double best = -std::numeric_limits<double>::infinity();
  int arg = 0;
  for (int c = 0; c < model.k(); ++c) {
    const double lg = cache[c].log_weight +
                      log_gauss(p, model.components[c].mean, cache[c].cov_inv, cache[c].log_det);
    if (lg > best) {
      best = lg;
      arg = c;
    }
  }
  return arg;
}

double plane_distance(const Vec3& mu, const SogmmComponent& comp) {
  return std::abs((mu - comp.mean).dot(comp.normal));
}

std::vector<Surfel> init_surfels(const SogmmModel& model, int samples_per_component, int c_sem,
                                 int c_ins, uint64_t seed) {
  if (samples_per_component <= 0) {
    throw std::invalid_argument("init_surfels: samples_per_component must be positive");
  }
  Rng rng(seed ^ 0x9d2c5680u);
  std::vector<Surfel> out;
  out.reserve(model.components.size() * samples_per_component);
  const double shrink = 1.0 / std::sqrt(static_cast<double>(samples_per_component));
  for (const auto& comp : model.components) {
    const Vec4 q = quat_from_rotation(comp.eigenvectors);
    const double s0 = std::max(std::sqrt(std::max(comp.eigenvalues[0], 0.0)) * shrink, 1e-9);
    const double s1 = std::max(std::sqrt(std::max(comp.eigenvalues[1], 0.0)) * shrink, 1e-9);
    const double gray = std::clamp(comp.intensity_mean, 0.0, 1.0);
    for (int s = 0; s < samples_per_component; ++s) {
      TangentCoords tc;
      tc.u = rng.normal() * std::sqrt(std::max(comp.eigenvalues[0], 0.0));
      tc.v = rng.normal() * std::sqrt(std::max(comp.eigenvalues[1], 0.0));
      tc.w = 0;  // restricted to the tangent plane
      Surfel sf;
      sf.center = from_tangent(comp, tc);
      sf.rotation = q;
      sf.scales = Vec2(s0, s1);
      sf.opacity = 0.5;
      sf.color = Vec3(gray, gray, gray);
      sf.f_sem = VecX::Zero(c_sem);
      sf.f_ins = VecX::Zero(c_ins);
      out.push_back(std::move(sf));
    }
  }
  return out;
}

double log_likelihood(const SogmmModel& model, const PointCloud& cloud) {
  const auto cache = cache_components(model.components);
  double ll = 0;
  for (const auto& p : cloud.points) {
    double best = -std::numeric_limits<double>::infinity();
    std::vector<double> lg(model.k());
    for (int c = 0; c < model.k(); ++c) {
      lg[c] = cache[c].log_weight +
              log_gauss(p, model.components[c].mean, cache[c].cov_inv, cache[c].log_det);
      best = std::max(best, lg[c]);
    }
    double sum = 0;
    for (int c = 0; c < model.k(); ++c) sum += std::exp(lg[c] - best);
    ll += best + std::log(sum);
  }
  return ll;
}

}  // namespace psimap
