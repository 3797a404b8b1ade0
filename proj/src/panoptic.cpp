// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/panoptic.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace psimap {

double feature_similarity(const VecX& f_q, const VecX& f_g) {
  if (f_q.size() != f_g.size()) {
    throw std::invalid_argument("feature_similarity: dimension mismatch");
  }
  return sigmoid(f_q.dot(f_g));
}

double geometric_affinity(const InstanceQuery& query, const Vec3& p_g) {
  const Mat3 cov = 0.5 * (query.cov + query.cov.transpose());
  Eigen::LLT<Mat3> llt(cov);
  Mat3 inv;
  if (llt.info() == Eigen::Success) {
    inv = llt.solve(Mat3::Identity());
  } else {
    const double eps = 1e-8 * std::max(cov.trace(), 1e-12);
    inv = Eigen::LLT<Mat3>(cov + eps * Mat3::Identity()).solve(Mat3::Identity());
  }
  const Vec3 d = p_g - query.mean;
  return std::exp(-0.5 * d.dot(inv * d));
}

double attention_map(const InstanceQuery& query, const VecX& f_q_used, const Surfel& surfel) {
  return feature_similarity(f_q_used, surfel.f_ins) * geometric_affinity(query, surfel.center);
}

LabelAssignment assign_labels(const std::vector<InstanceQuery>& queries, const MatX* features,
                              const SceneMap& scene) {
  const int n_q = static_cast<int>(queries.size());
  const int n_s = static_cast<int>(scene.surfels.size());
  LabelAssignment out;
  out.dist = MatX::Zero(n_q, n_s);
  out.argmax.assign(n_s, -1);

  std::vector<int> alive;
  for (int q = 0; q < n_q; ++q) {
    if (queries[q].alive) alive.push_back(q);
  }
  if (alive.empty()) return out;

  // per-query inverse covariances, computed once
  std::vector<Mat3> inv(alive.size());
  for (size_t a = 0; a < alive.size(); ++a) {
    const Mat3 cov = 0.5 * (queries[alive[a]].cov + queries[alive[a]].cov.transpose());
    Eigen::LLT<Mat3> llt(cov);
    if (llt.info() == Eigen::Success) {
      inv[a] = llt.solve(Mat3::Identity());
    } else {
      const double eps = 1e-8 * std::max(cov.trace(), 1e-12);
      inv[a] = Eigen::LLT<Mat3>(cov + eps * Mat3::Identity()).solve(Mat3::Identity());
    }
  }

  const int c_ins = scene.c_ins();
  MatX fq_used(c_ins, alive.size());
  for (size_t a = 0; a < alive.size(); ++a) {
    fq_used.col(a) = features != nullptr ? features->col(alive[a]) : queries[alive[a]].feature;
  }

  std::vector<double> a_vals(alive.size());
  for (int s = 0; s < n_s; ++s) {
    const Surfel& sf = scene.surfels[s];
    double a_max = -1;
    for (size_t a = 0; a < alive.size(); ++a) {
      const double sim = sigmoid(fq_used.col(a).dot(sf.f_ins));
      const Vec3 d = sf.center - queries[alive[a]].mean;
      const double geo = std::exp(-0.5 * d.dot(inv[a] * d));
      a_vals[a] = sim * geo;
      a_max = std::max(a_max, a_vals[a]);
    }
    double denom = 0;
    for (double v : a_vals) denom += std::exp(v - a_max);
    int best = 0;
    for (size_t a = 0; a < alive.size(); ++a) {
      const double p = std::exp(a_vals[a] - a_max) / denom;
      out.dist(alive[a], s) = p;
      if (a_vals[a] > a_vals[best]) best = static_cast<int>(a);
    }
    out.argmax[s] = alive[best];
  }
  return out;
}

std::vector<int> frustum_select(const SceneMap& scene, const Camera& cam) {
  // plane normals (camera frame) and offsets; inside means n.p + d >= 0
  struct Plane {
    Vec3 n;
    double d;
  };
  std::vector<Plane> planes;
  planes.push_back({Vec3(0, 0, 1), -cam.near_clip});
  planes.push_back({Vec3(0, 0, -1), cam.far_clip});
  auto side = [](Vec3 n) {
    const double len = n.norm();
    return Plane{n / len, 0.0};
  };
  planes.push_back(side(Vec3(cam.fx, 0, cam.cx)));
  planes.push_back(side(Vec3(-cam.fx, 0, cam.width - cam.cx)));
  planes.push_back(side(Vec3(0, cam.fy, cam.cy)));
  planes.push_back(side(Vec3(0, -cam.fy, cam.height - cam.cy)));

  std::vector<int> out;
  for (size_t i = 0; i < scene.surfels.size(); ++i) {
    const Surfel& s = scene.surfels[i];
    const double radius = kConfRadius99 * std::max(s.scales[0], s.scales[1]);
    const Vec3 p = cam.to_camera(s.center);
    bool inside = true;
    for (const Plane& pl : planes) {
      if (pl.n.dot(p) + pl.d < -radius) {
        inside = false;
        break;
      }
    }
    if (inside) out.push_back(static_cast<int>(i));
  }
  return out;
}

PosEncoder PosEncoder::make(const AttentionWeights& w) {
  PosEncoder enc;
  enc.bands = w.pos_enc_bands;
  enc.base_freq = w.pos_enc_base_freq;
  const int c = w.c_ins();
  const int raw = 6 * enc.bands;
  enc.proj = MatX(c, raw);
  Rng rng(w.pos_enc_seed);
  const double scale = 1.0 / std::sqrt(static_cast<double>(raw));
  for (int i = 0; i < c; ++i) {
    for (int j = 0; j < raw; ++j) enc.proj(i, j) = rng.normal() * scale;
  }
  return enc;
}

VecX PosEncoder::encode(const Vec3& p) const {
  VecX raw(6 * bands);
  int at = 0;
  for (int axis = 0; axis < 3; ++axis) {
    double f = base_freq;
    for (int b = 0; b < bands; ++b) {
      raw[at++] = std::sin(f * p[axis]);
      raw[at++] = std::cos(f * p[axis]);
      f *= 2.0;
    }
  }
  return proj * raw;
}

MatX PosEncoder::jacobian(const Vec3& p) const {
  MatX draw = MatX::Zero(6 * bands, 3);
  int at = 0;
  for (int axis = 0; axis < 3; ++axis) {
    double f = base_freq;
    for (int b = 0; b < bands; ++b) {
      draw(at++, axis) = f * std::cos(f * p[axis]);
      draw(at++, axis) = -f * std::sin(f * p[axis]);
      f *= 2.0;
    }
  }
  return proj * draw;
}

KeysValues build_keys_values(const SceneMap& scene, const std::vector<int>& visible,
                             const AttentionWeights& w, const PosEncoder& enc) {
  const int c = w.c_ins();
  KeysValues kv;
  kv.keys = MatX(c, visible.size());
  kv.values = MatX(c, visible.size());
  for (size_t j = 0; j < visible.size(); ++j) {
    const Surfel& s = scene.surfels[visible[j]];
    kv.values.col(j) = s.f_ins;
    kv.keys.col(j) = s.f_ins + enc.encode(s.center);
  }
  return kv;
}

AttentionForward cross_attention_update(const std::vector<InstanceQuery>& queries,
                                        const KeysValues& kv, const AttentionWeights& w) {
  AttentionForward fwd;
  const int n_q = static_cast<int>(queries.size());
  const int n_v = static_cast<int>(kv.keys.cols());
  if (n_v == 0) {
    fwd.refined_valid = false;
    return fwd;
  }
  const int d = w.dim();
  fwd.q_proj = MatX(d, n_q);
  for (int i = 0; i < n_q; ++i) fwd.q_proj.col(i) = w.w_q.transpose() * queries[i].feature;
  fwd.k_proj = w.w_k.transpose() * kv.keys;
  fwd.v_proj = w.w_v.transpose() * kv.values;

  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));
  MatX scores = fwd.k_proj.transpose() * fwd.q_proj * inv_sqrt_d;  // |V| x N_q
  fwd.probs = MatX(n_v, n_q);
  for (int i = 0; i < n_q; ++i) {
    const double m = scores.col(i).maxCoeff();
    VecX e = (scores.col(i).array() - m).exp();
    fwd.probs.col(i) = e / e.sum();
  }
  fwd.refined = fwd.v_proj * fwd.probs;  // d x N_q
  fwd.refined_valid = true;
  return fwd;
}

std::vector<Mask3D> masks_from_argmax(const std::vector<int>& argmax, int n_queries) {
  std::vector<Mask3D> masks(n_queries);
  for (size_t s = 0; s < argmax.size(); ++s) {
    if (argmax[s] >= 0 && argmax[s] < n_queries) masks[argmax[s]].push_back(static_cast<int>(s));
  }
  return masks;
}

std::vector<Mask3D> masks_from_labels(const MatX& dist, double threshold) {
  std::vector<Mask3D> masks(dist.rows());
  for (int s = 0; s < dist.cols(); ++s) {
    for (int q = 0; q < dist.rows(); ++q) {
      if (dist(q, s) > threshold) masks[q].push_back(s);
    }
  }
  return masks;
}

MatX attention_matrix(const std::vector<InstanceQuery>& queries, const SceneMap& scene) {
  const int n_q = static_cast<int>(queries.size());
  const int n_s = static_cast<int>(scene.surfels.size());
  MatX a = MatX::Zero(n_q, n_s);
  for (int q = 0; q < n_q; ++q) {
    if (!queries[q].alive) continue;
    const Mat3 inv = [&] {
      const Mat3 cov = 0.5 * (queries[q].cov + queries[q].cov.transpose());
      Eigen::LLT<Mat3> llt(cov);
      if (llt.info() == Eigen::Success) return Mat3(llt.solve(Mat3::Identity()));
      const double eps = 1e-8 * std::max(cov.trace(), 1e-12);
      return Mat3(Eigen::LLT<Mat3>(cov + eps * Mat3::Identity()).solve(Mat3::Identity()));
    }();
    for (int s = 0; s < n_s; ++s) {
      const Surfel& sf = scene.surfels[s];
      const double sim = sigmoid(queries[q].feature.dot(sf.f_ins));
      const Vec3 d = sf.center - queries[q].mean;
      a(q, s) = sim * std::exp(-0.5 * d.dot(inv * d));
    }
  }
  return a;
}

std::vector<Mask3D> masks_from_attention(const MatX& attention, double rel_threshold) {
  std::vector<Mask3D> masks(attention.rows());
  for (int q = 0; q < attention.rows(); ++q) {
    const double peak = attention.row(q).maxCoeff();
    if (peak <= 0) continue;
    const double bar = rel_threshold * peak;
    for (int s = 0; s < attention.cols(); ++s) {
      if (attention(q, s) >= bar) masks[q].push_back(s);
    }
  }
  return masks;
}

double iom(const Mask3D& m_i, const Mask3D& m_j) {
  if (m_i.empty()) throw std::invalid_argument("iom: M_i is empty");
  size_t a = 0, b = 0, inter = 0;
  while (a < m_i.size() && b < m_j.size()) {
    if (m_i[a] < m_j[b]) {
      ++a;
    } else if (m_j[b] < m_i[a]) {
      ++b;
    } else {
      ++inter;
      ++a;
      ++b;
    }
  }
  return static_cast<double>(inter) / static_cast<double>(m_i.size());
}

std::vector<PruneEvent> prune_useless(std::vector<InstanceQuery>& queries,
                                      const std::vector<int64_t>& window_matches,
                                      int64_t window_frames, double min_assign_rate) {
  std::vector<PruneEvent> events;
  if (window_frames <= 0) return events;
  std::vector<int> candidates;
  for (size_t q = 0; q < queries.size(); ++q) {
    if (!queries[q].alive) continue;
    const double rate = static_cast<double>(window_matches[q]) / window_frames;
    if (rate < min_assign_rate) candidates.push_back(static_cast<int>(q));
  }
  // keep at least one query alive overall
  int alive_after = 0;
  for (const auto& q : queries) {
    if (q.alive) ++alive_after;
  }
  alive_after -= static_cast<int>(candidates.size());
  if (alive_after < 1 && !candidates.empty()) {
    // spare the candidate with the most matches (ties: lowest index)
    int best = candidates[0];
    for (int c : candidates) {
      if (window_matches[c] > window_matches[best]) best = c;
    }
    candidates.erase(std::find(candidates.begin(), candidates.end(), best));
  }
  for (int q : candidates) {
    queries[q].alive = false;
    events.push_back({q, "useless", static_cast<double>(window_matches[q]) / window_frames});
  }
  return events;
}

std::vector<PruneEvent> prune_duplicates(std::vector<InstanceQuery>& queries,
                                         const std::vector<Mask3D>& masks, double tau_iom) {
  struct Pair {
    double iom;
    int i, j;
  };
  std::vector<Pair> pairs;
  const int n = static_cast<int>(queries.size());
  for (int i = 0; i < n; ++i) {
    if (!queries[i].alive || masks[i].empty()) continue;
    for (int j = 0; j < n; ++j) {
      if (j == i || !queries[j].alive) continue;
      const double v = iom(masks[i], masks[j]);
      if (v >= tau_iom) pairs.push_back({v, i, j});
    }
  }
  std::sort(pairs.begin(), pairs.end(), [](const Pair& a, const Pair& b) {
    if (a.iom != b.iom) return a.iom > b.iom;
    if (a.i != b.i) return a.i < b.i;
    return a.j < b.j;
  });
  std::vector<PruneEvent> events;
  for (const Pair& p : pairs) {
    if (!queries[p.i].alive || !queries[p.j].alive) continue;
    // retain the larger coverage; ties kill the higher index
    int victim;
    if (masks[p.i].size() != masks[p.j].size()) {
      victim = masks[p.i].size() < masks[p.j].size() ? p.i : p.j;
    } else {
      victim = std::max(p.i, p.j);
    }
    queries[victim].alive = false;
    events.push_back({victim, "duplicate", p.iom});
  }
  return events;
}

}  // namespace psimap
