// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <stdexcept>
#include <unordered_map>

#include "psimap/panoptic.hpp"

namespace psimap {

namespace {

struct Segment {
  int id = -1;
  int class_id = -1;
  int64_t pixels = 0;
};

// Collect segments (pixels sharing an id) with majority-vote classes,
// skipping pixels that are void on the gt side.
std::map<int, Segment> collect_segments(const IntPlane& ids, const IntPlane& classes,
                                        const std::vector<char>& valid) {
  std::map<int, std::map<int, int64_t>> votes;
  std::map<int, int64_t> sizes;
  for (int i = 0; i < ids.pixel_count(); ++i) {
    if (!valid[i]) continue;
    const int id = ids.data[i];
    if (id < 0) continue;
    ++sizes[id];
    const int cls = classes.data[i];
    if (cls >= 0) ++votes[id][cls];
  }
  std::map<int, Segment> out;
  for (const auto& [id, count] : sizes) {
    Segment seg;
    seg.id = id;
    seg.pixels = count;
    int64_t best = -1;
    for (const auto& [cls, n] : votes[id]) {
      if (n > best) {
        best = n;
        seg.class_id = cls;
      }
    }
    out[id] = seg;
  }
  return out;
}

}  // namespace

PanopticResult panoptic_quality(const IntPlane& pred_ids, const IntPlane& pred_classes,
                                const IntPlane& gt_ids, const IntPlane& gt_classes) {
  if (pred_ids.pixel_count() != gt_ids.pixel_count()) {
    throw std::invalid_argument("panoptic_quality: shape mismatch");
  }
  const int n_px = gt_ids.pixel_count();
  // void where the gt has no id or no class
  std::vector<char> valid(n_px, 1);
  for (int i = 0; i < n_px; ++i) {
    if (gt_ids.data[i] < 0 || gt_classes.data[i] < 0) valid[i] = 0;
  }

  auto pred_segs = collect_segments(pred_ids, pred_classes, valid);
  auto gt_segs = collect_segments(gt_ids, gt_classes, valid);

  // pairwise intersections
  std::map<std::pair<int, int>, int64_t> inter;
  for (int i = 0; i < n_px; ++i) {
    if (!valid[i]) continue;
    const int p = pred_ids.data[i];
    const int g = gt_ids.data[i];
    if (p >= 0 && g >= 0) ++inter[{p, g}];
  }

  PanopticResult res;
  std::map<int, ClassPQ> per_class;
  std::map<int, char> gt_matched, pred_matched;
  for (const auto& [pg, count] : inter) {
    const Segment& ps = pred_segs[pg.first];
    const Segment& gs = gt_segs[pg.second];
    if (ps.class_id != gs.class_id || ps.class_id < 0) continue;
    const double uni = static_cast<double>(ps.pixels + gs.pixels - count);
    const double iou = uni > 0 ? count / uni : 0.0;
    if (iou > 0.5) {  // strict: exactly 0.5 is not a match
      auto& c = per_class[ps.class_id];
      c.class_id = ps.class_id;
      ++c.tp;
      c.iou_sum += iou;
      gt_matched[pg.second] = 1;
      pred_matched[pg.first] = 1;
      res.matches.push_back({pg.first, pg.second, iou});
    }
  }
  for (const auto& [id, seg] : pred_segs) {
    if (seg.class_id < 0) continue;
    auto& c = per_class[seg.class_id];
    c.class_id = seg.class_id;
    if (!pred_matched.count(id)) ++c.fp;
  }
  for (const auto& [id, seg] : gt_segs) {
    if (seg.class_id < 0) continue;
    auto& c = per_class[seg.class_id];
    c.class_id = seg.class_id;
    if (!gt_matched.count(id)) ++c.fn;
  }

  int counted = 0;
  for (auto& [cls, c] : per_class) {
    const double denom = c.tp + 0.5 * c.fp + 0.5 * c.fn;
    if (denom <= 0) continue;
    c.pq = c.iou_sum / denom;
    c.sq = c.tp > 0 ? c.iou_sum / c.tp : 0.0;
    c.rq = c.tp / denom;
    res.per_class.push_back(c);
    res.pq += c.pq;
    res.sq += c.sq;
    res.rq += c.rq;
    ++counted;
  }
  if (counted > 0) {
    res.pq /= counted;
    res.sq /= counted;
    res.rq /= counted;
  }
  res.miou = miou(pred_classes, gt_classes);
  res.macc = macc(pred_classes, gt_classes);
  coverage(pred_ids, gt_ids, res.mcov, res.mwcov);
  return res;
}

double miou(const IntPlane& pred_classes, const IntPlane& gt_classes) {
  std::map<int, int64_t> tp, fp, fn;
  for (int i = 0; i < gt_classes.pixel_count(); ++i) {
    const int g = gt_classes.data[i];
    if (g < 0) continue;
    const int p = pred_classes.data[i];
    if (p == g) {
      ++tp[g];
    } else {
      ++fn[g];
      if (p >= 0) ++fp[p];
    }
  }
  std::map<int, char> classes;
  for (const auto& [c, n] : tp) classes[c] = 1;
  for (const auto& [c, n] : fp) classes[c] = 1;
  for (const auto& [c, n] : fn) classes[c] = 1;
  if (classes.empty()) return 0.0;
  double acc = 0;
  for (const auto& [c, unused] : classes) {
    const double denom = static_cast<double>(tp[c] + fp[c] + fn[c]);
    acc += denom > 0 ? tp[c] / denom : 0.0;
  }
  return acc / static_cast<double>(classes.size());
}

double macc(const IntPlane& pred_classes, const IntPlane& gt_classes) {
  std::map<int, int64_t> tp, total;
  for (int i = 0; i < gt_classes.pixel_count(); ++i) {
    const int g = gt_classes.data[i];
    if (g < 0) continue;
    ++total[g];
    if (pred_classes.data[i] == g) ++tp[g];
  }
  if (total.empty()) return 0.0;
  double acc = 0;
  for (const auto& [c, n] : total) acc += static_cast<double>(tp[c]) / n;
  return acc / static_cast<double>(total.size());
}

void coverage(const IntPlane& pred_ids, const IntPlane& gt_ids, double& mcov, double& mwcov) {
  std::map<int, int64_t> gt_size, pred_size;
  std::map<std::pair<int, int>, int64_t> inter;
  for (int i = 0; i < gt_ids.pixel_count(); ++i) {
    const int g = gt_ids.data[i];
    const int p = pred_ids.data[i];
    if (g >= 0) ++gt_size[g];
    if (p >= 0) ++pred_size[p];
    if (g >= 0 && p >= 0) ++inter[{p, g}];
  }
  mcov = 0;
  mwcov = 0;
  if (gt_size.empty()) return;
  int64_t total_gt = 0;
  for (const auto& [g, n] : gt_size) total_gt += n;
  for (const auto& [g, n] : gt_size) {
    double best = 0;
    for (const auto& [pg, c] : inter) {
      if (pg.second != g) continue;
      const double uni = static_cast<double>(pred_size[pg.first] + n - c);
      best = std::max(best, uni > 0 ? c / uni : 0.0);
    }
    mcov += best;
    mwcov += best * static_cast<double>(n) / static_cast<double>(total_gt);
  }
  mcov /= static_cast<double>(gt_size.size());
}

std::vector<double> nn_distances_brute(const std::vector<Vec3>& queries,
                                       const std::vector<Vec3>& targets) {
  std::vector<double> out(queries.size(), std::numeric_limits<double>::infinity());
  for (size_t i = 0; i < queries.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (const Vec3& t : targets) {
      best = std::min(best, (queries[i] - t).squaredNorm());
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

std::vector<double> nn_distances_grid(const std::vector<Vec3>& queries,
                                      const std::vector<Vec3>& targets) {
  if (targets.empty()) {
    return std::vector<double>(queries.size(), std::numeric_limits<double>::infinity());
  }
  Vec3 lo = targets[0], hi = targets[0];
  for (const Vec3& t : targets) {
    lo = lo.cwiseMin(t);
    hi = hi.cwiseMax(t);
  }
  const double diag = (hi - lo).norm();
  const double cell = std::max(diag / std::cbrt(static_cast<double>(targets.size())), 1e-9);
  auto key_of = [&](const Vec3& p) {
    const int64_t ix = static_cast<int64_t>(std::floor((p[0] - lo[0]) / cell));
    const int64_t iy = static_cast<int64_t>(std::floor((p[1] - lo[1]) / cell));
    const int64_t iz = static_cast<int64_t>(std::floor((p[2] - lo[2]) / cell));
    return (ix * 73856093) ^ (iy * 19349663) ^ (iz * 83492791);
  };
  std::unordered_map<int64_t, std::vector<int>> grid;
  for (size_t i = 0; i < targets.size(); ++i) grid[key_of(targets[i])].push_back(static_cast<int>(i));

  std::vector<double> out(queries.size());
  for (size_t i = 0; i < queries.size(); ++i) {
    const Vec3& q = queries[i];
    double best = std::numeric_limits<double>::infinity();
    const int64_t cx = static_cast<int64_t>(std::floor((q[0] - lo[0]) / cell));
    const int64_t cy = static_cast<int64_t>(std::floor((q[1] - lo[1]) / cell));
    const int64_t cz = static_cast<int64_t>(std::floor((q[2] - lo[2]) / cell));
    // worst case: sweep far enough to reach every occupied cell
    const Vec3 clamped = q.cwiseMax(lo).cwiseMin(hi);
    const int64_t ring_limit =
        static_cast<int64_t>(((q - clamped).norm() + diag) / cell) + 2;
    for (int64_t ring = 0; ring <= ring_limit; ++ring) {
      // any point in a cell at Chebyshev ring r is at least
      // (r - 1) * cell away, so stop once best is within that bound
      if (best < std::numeric_limits<double>::infinity()) {
        const double safe = static_cast<double>(ring - 1) * cell;
        if (safe > 0 && best <= safe * safe) break;
      }
      for (int64_t dx = -ring; dx <= ring; ++dx) {
        for (int64_t dy = -ring; dy <= ring; ++dy) {
          for (int64_t dz = -ring; dz <= ring; ++dz) {
            if (std::max({std::abs(dx), std::abs(dy), std::abs(dz)}) != ring) continue;
            const int64_t key = (((cx + dx) * 73856093) ^ ((cy + dy) * 19349663) ^
                                 ((cz + dz) * 83492791));
            auto it = grid.find(key);
            if (it == grid.end()) continue;
            for (int idx : it->second) {
              best = std::min(best, (q - targets[idx]).squaredNorm());
            }
          }
        }
      }
    }
    out[i] = std::sqrt(best);
  }
  return out;
}

GeomResult geom_metrics(const std::vector<Vec3>& pred, const std::vector<Vec3>& gt, double tau) {
  GeomResult r;
  r.tau = tau;
  if (pred.empty() || gt.empty()) return r;
  const bool brute = pred.size() <= 5000 && gt.size() <= 5000;
  const std::vector<double> d_pred =
      brute ? nn_distances_brute(pred, gt) : nn_distances_grid(pred, gt);
  const std::vector<double> d_gt =
      brute ? nn_distances_brute(gt, pred) : nn_distances_grid(gt, pred);
  double acc = 0, prec_n = 0;
  for (double d : d_pred) {
    acc += d;
    if (d <= tau) prec_n += 1;
  }
  double comp = 0, rec_n = 0;
  for (double d : d_gt) {
    comp += d;
    if (d <= tau) rec_n += 1;
  }
  r.accuracy = acc / static_cast<double>(pred.size());
  r.completeness = comp / static_cast<double>(gt.size());
  r.chamfer_l1 = 0.5 * (r.accuracy + r.completeness);
  r.precision = prec_n / static_cast<double>(pred.size());
  r.recall = rec_n / static_cast<double>(gt.size());
  r.fscore = (r.precision + r.recall) > 0
                 ? 2.0 * r.precision * r.recall / (r.precision + r.recall)
                 : 0.0;
  return r;
}

std::vector<Vec3> sample_surfel_points(const SceneMap& scene, int total_points, uint64_t seed) {
  std::vector<Vec3> out;
  if (scene.surfels.empty() || total_points <= 0) return out;
  std::vector<double> area(scene.surfels.size());
  double total_area = 0;
  for (size_t i = 0; i < scene.surfels.size(); ++i) {
    area[i] = scene.surfels[i].scales[0] * scene.surfels[i].scales[1];
    total_area += area[i];
  }
  if (total_area <= 0) return out;
  Rng rng(seed ^ 0xa5a5a5a5ull);
  out.reserve(total_points);
  // systematic allocation proportional to area, then uniform in the
  // 1-sigma ellipse of each disc
  double carry = 0;
  for (size_t i = 0; i < scene.surfels.size(); ++i) {
    carry += area[i] / total_area * total_points;
    int n_i = static_cast<int>(std::floor(carry));
    carry -= n_i;
    const Surfel& s = scene.surfels[i];
    const Mat3 r = rotation_from_quat(s.rotation);
    for (int k = 0; k < n_i; ++k) {
      const double rad = std::sqrt(rng.uniform());
      const double theta = rng.uniform(0, 2 * M_PI);
      const double u = rad * std::cos(theta) * s.scales[0];
      const double v = rad * std::sin(theta) * s.scales[1];
      out.push_back(s.center + u * r.col(0) + v * r.col(1));
    }
  }
  return out;
}

PanopticRender render_panoptic(const SceneMap& scene, const Camera& cam,
                               const RasterConfig& cfg) {
  const LabelAssignment labels = assign_labels(scene.queries, nullptr, scene);
  const MatX* dist = scene.queries.empty() ? nullptr : &labels.dist;
  const RenderTargets targets = render(scene, dist, cam, cfg);

  PanopticRender out;
  out.ids = IntPlane(cam.width, cam.height, 1, -1);
  out.classes = IntPlane(cam.width, cam.height, 1, -1);
  out.sem_classes = IntPlane(cam.width, cam.height, 1, -1);
  const int c_sem = scene.c_sem();
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      if (targets.alpha_acc.at(x, y) < 0.5) continue;
      const int id = targets.ins_argmax.at(x, y);
      out.ids.at(x, y) = id;
      if (id >= 0 && id < static_cast<int>(scene.queries.size())) {
        out.classes.at(x, y) = scene.queries[id].class_id;
      }
      if (c_sem > 0) {
        const double* f = targets.sem_feat.pixel(x, y);
        int arg = 0;
        for (int c = 1; c < c_sem; ++c) {
          if (f[c] > f[arg]) arg = c;
        }
        out.sem_classes.at(x, y) = arg;
      }
    }
  }
  return out;
}

}  // namespace psimap
