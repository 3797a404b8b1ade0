// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace psimap {

namespace {

constexpr double kCovFloor = 1e-6;
constexpr double kLogitGuard = 1e-6;

double adam_delta(double& m, double& v, double g, double lr, const TrainConfig& cfg, int64_t t) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
  const double mhat = m / (1.0 - std::pow(cfg.beta1, static_cast<double>(t)));
  const double vhat = v / (1.0 - std::pow(cfg.beta2, static_cast<double>(t)));
  return lr * mhat / (std::sqrt(vhat) + cfg.adam_eps);
}

// majority semantic class under a binary mask; -1 when nothing labeled
int mask_majority_class(const Image& mask, const IntPlane& sem_gt, int n_classes) {
  std::vector<int64_t> votes(n_classes, 0);
  for (int i = 0; i < sem_gt.pixel_count(); ++i) {
    if (mask.data[i] <= 0.5) continue;
    const int cls = sem_gt.data[i];
    if (cls >= 0 && cls < n_classes) ++votes[cls];
  }
  int best = -1;
  int64_t best_n = 0;
  for (int c = 0; c < n_classes; ++c) {
    if (votes[c] > best_n) {
      best_n = votes[c];
      best = c;
    }
  }
  return best;
}

void finalize_epoch_votes(SceneMap& scene) {
  for (auto& q : scene.queries) {
    int64_t best_n = 0;
    int best = q.class_id;
    for (size_t c = 0; c < q.class_votes.size(); ++c) {
      if (q.class_votes[c] > best_n) {
        best_n = q.class_votes[c];
        best = static_cast<int>(c);
      }
    }
    if (best_n > 0) q.class_id = best;
    std::fill(q.class_votes.begin(), q.class_votes.end(), 0);
  }
}

// drop surfels whose opacity fell below the render floor (1/255):
// alpha = o * d_sigma can never clear alpha_min again, so they are
// invisible everywhere and only pollute the map
void compact_surfels(TrainState& state) {
  constexpr double kOpacityFloor = 1.0 / 255.0;
  std::vector<int> keep;
  for (size_t s = 0; s < state.scene.surfels.size(); ++s) {
    if (state.scene.surfels[s].opacity >= kOpacityFloor) keep.push_back(static_cast<int>(s));
  }
  if (keep.size() == state.scene.surfels.size()) return;

  const int c_sem = state.scene.c_sem();
  const int c_ins = state.scene.c_ins();
  std::vector<Surfel> surfels;
  surfels.reserve(keep.size());
  for (Gradients* g : {&state.adam.m, &state.adam.v}) {
    std::vector<Vec3> center, color;
    std::vector<Vec4> rotation;
    std::vector<Vec2> scales;
    std::vector<double> opacity;
    MatX f_sem = MatX::Zero(c_sem, keep.size());
    MatX f_ins = MatX::Zero(c_ins, keep.size());
    for (size_t i = 0; i < keep.size(); ++i) {
      const int s = keep[i];
      center.push_back(g->center[s]);
      rotation.push_back(g->rotation[s]);
      scales.push_back(g->scales[s]);
      opacity.push_back(g->opacity[s]);
      color.push_back(g->color[s]);
      f_sem.col(i) = g->f_sem.col(s);
      f_ins.col(i) = g->f_ins.col(s);
    }
    g->center = std::move(center);
    g->rotation = std::move(rotation);
    g->scales = std::move(scales);
    g->opacity = std::move(opacity);
    g->color = std::move(color);
    g->f_sem = std::move(f_sem);
    g->f_ins = std::move(f_ins);
  }
  for (int s : keep) surfels.push_back(state.scene.surfels[s]);
  state.scene.surfels = std::move(surfels);
}

// drop dead queries, remapping optimizer state and window counters
void compact_queries(TrainState& state) {
  std::vector<int> keep;
  for (size_t q = 0; q < state.scene.queries.size(); ++q) {
    if (state.scene.queries[q].alive) keep.push_back(static_cast<int>(q));
  }
  if (keep.size() == state.scene.queries.size()) return;

  std::vector<InstanceQuery> queries;
  std::vector<int64_t> matches;
  const int c_ins = state.scene.c_ins();
  MatX m_feat = MatX::Zero(c_ins, keep.size());
  MatX v_feat = MatX::Zero(c_ins, keep.size());
  std::vector<Vec3> m_mean, v_mean;
  std::vector<Vec6> m_cov, v_cov;
  for (size_t i = 0; i < keep.size(); ++i) {
    const int q = keep[i];
    queries.push_back(state.scene.queries[q]);
    matches.push_back(state.window_matches[q]);
    m_feat.col(i) = state.adam.m.query_feature.col(q);
    v_feat.col(i) = state.adam.v.query_feature.col(q);
    m_mean.push_back(state.adam.m.query_mean[q]);
    v_mean.push_back(state.adam.v.query_mean[q]);
    m_cov.push_back(state.adam.m.query_cov[q]);
    v_cov.push_back(state.adam.v.query_cov[q]);
  }
  state.scene.queries = std::move(queries);
  state.window_matches = std::move(matches);
  state.adam.m.query_feature = std::move(m_feat);
  state.adam.v.query_feature = std::move(v_feat);
  state.adam.m.query_mean = std::move(m_mean);
  state.adam.v.query_mean = std::move(v_mean);
  state.adam.m.query_cov = std::move(m_cov);
  state.adam.v.query_cov = std::move(v_cov);
}

}  // namespace

TrainState TrainState::init(SceneMap scene, SogmmModel sogmm, const TrainConfig& cfg) {
  TrainState st;
  st.scene = std::move(scene);
  st.sogmm = std::move(sogmm);
  st.rng = Rng(cfg.seed);
  // keep logit-space parameters away from the boundary
  for (auto& s : st.scene.surfels) {
    s.opacity = std::clamp(s.opacity, kLogitGuard, 1.0 - kLogitGuard);
    for (int c = 0; c < 3; ++c) s.color[c] = std::clamp(s.color[c], kLogitGuard, 1.0 - kLogitGuard);
  }
  if (st.scene.attn.w_q.size() == 0 && st.scene.c_ins() > 0) {
    st.scene.attn = AttentionWeights::init(st.scene.c_ins(), st.scene.c_ins(), cfg.seed);
  }
  for (auto& q : st.scene.queries) {
    if (q.class_votes.size() != st.scene.vocabulary.size()) {
      q.class_votes.assign(st.scene.vocabulary.size(), 0);
    }
  }
  st.adam.m = Gradients::zero(st.scene);
  st.adam.v = Gradients::zero(st.scene);
  st.adam.t = 0;
  st.window_matches.assign(st.scene.queries.size(), 0);
  st.window_frames = 0;
  return st;
}

void init_queries(SceneMap& scene, int n_queries, int c_ins, uint64_t seed) {
  if (scene.surfels.empty() || n_queries <= 0) return;
  Rng rng(seed ^ 0x51ed270bull);
  Vec3 lo = scene.surfels[0].center, hi = lo;
  for (const auto& s : scene.surfels) {
    lo = lo.cwiseMin(s.center);
    hi = hi.cwiseMax(s.center);
  }
  const double radius = std::max((hi - lo).norm() / 10.0, 1e-3);

  // farthest-point seeding spreads anchor queries across the scene;
  // the remaining queries double up on the anchors (jittered), so an
  // oversubscribed init starts as overlapping pairs that the IoM-based
  // duplicate pruning can later merge
  const int n_anchors = (n_queries + 1) / 2;
  std::vector<Vec3> seeds;
  seeds.push_back(scene.surfels[rng.uniform_int(scene.surfels.size())].center);
  std::vector<double> dist(scene.surfels.size(), std::numeric_limits<double>::infinity());
  while (static_cast<int>(seeds.size()) < n_anchors) {
    int far = 0;
    double far_d = -1;
    for (size_t i = 0; i < scene.surfels.size(); ++i) {
      dist[i] = std::min(dist[i], (scene.surfels[i].center - seeds.back()).squaredNorm());
      if (dist[i] > far_d) {
        far_d = dist[i];
        far = static_cast<int>(i);
      }
    }
    seeds.push_back(scene.surfels[far].center);
  }
  while (static_cast<int>(seeds.size()) < n_queries) {
    const Vec3 base = seeds[seeds.size() - n_anchors];
    seeds.push_back(base + 0.1 * radius * rng.normal3());
  }

  scene.queries.clear();
  for (int q = 0; q < n_queries; ++q) {
    InstanceQuery iq;
    iq.mean = seeds[q];
    iq.cov = radius * radius * Mat3::Identity();
    iq.feature = VecX(c_ins);
    for (int c = 0; c < c_ins; ++c) iq.feature[c] = 0.3 * rng.normal();
    iq.class_votes.assign(scene.vocabulary.size(), 0);
    scene.queries.push_back(std::move(iq));
  }
}

void init_queries_from_frame(SceneMap& scene, const FrameBundle& frame,
                             double queries_per_instance, int c_ins, uint64_t seed) {
  if (scene.surfels.empty() || frame.instance_gt.empty()) {
    init_queries(scene, std::max<int>(1, static_cast<int>(std::ceil(queries_per_instance))),
                 c_ins, seed);
    return;
  }
  Rng rng(seed ^ 0x7b2ca1d3ull);
  const Camera& cam = frame.camera;

  // surfel centers projected into the frame
  std::vector<Vec2> px(scene.surfels.size(), Vec2(-1, -1));
  for (size_t s = 0; s < scene.surfels.size(); ++s) {
    const Vec3 p = cam.to_camera(scene.surfels[s].center);
    if (p[2] <= cam.near_clip) continue;
    px[s] = Vec2(cam.fx * p[0] / p[2] + cam.cx, cam.fy * p[1] / p[2] + cam.cy);
  }

  scene.queries.clear();
  const int per_mask = std::max(1, static_cast<int>(std::llround(queries_per_instance)));
  for (const Image& mask : frame.instance_gt) {
    Vec3 centroid = Vec3::Zero();
    int count = 0;
    for (size_t s = 0; s < scene.surfels.size(); ++s) {
      const int ix = static_cast<int>(px[s][0]);
      const int iy = static_cast<int>(px[s][1]);
      if (ix < 0 || ix >= mask.width || iy < 0 || iy >= mask.height) continue;
      if (mask.at(ix, iy) > 0.5) {
        centroid += scene.surfels[s].center;
        ++count;
      }
    }
    if (count == 0) continue;
    centroid /= count;
    Mat3 cov = Mat3::Zero();
    for (size_t s = 0; s < scene.surfels.size(); ++s) {
      const int ix = static_cast<int>(px[s][0]);
      const int iy = static_cast<int>(px[s][1]);
      if (ix < 0 || ix >= mask.width || iy < 0 || iy >= mask.height) continue;
      if (mask.at(ix, iy) > 0.5) {
        const Vec3 d = scene.surfels[s].center - centroid;
        cov += d * d.transpose();
      }
    }
    cov /= count;
    // keep the spatial prior well conditioned
    Vec3 vals;
    Mat3 vecs;
    eigen_sym3_desc(0.5 * (cov + cov.transpose()), vals, vecs);
    for (int i = 0; i < 3; ++i) vals[i] = std::clamp(vals[i], 1e-3, 25.0);
    cov = vecs * vals.asDiagonal() * vecs.transpose();

    const double jitter = 0.05 * std::sqrt(vals[0]);
    for (int k = 0; k < per_mask; ++k) {
      InstanceQuery iq;
      iq.mean = centroid + (k == 0 ? Vec3::Zero() : Vec3(jitter * rng.normal3()));
      iq.cov = cov;
      iq.feature = VecX(c_ins);
      for (int c = 0; c < c_ins; ++c) iq.feature[c] = 0.3 * rng.normal();
      iq.class_votes.assign(scene.vocabulary.size(), 0);
      scene.queries.push_back(std::move(iq));
    }
  }
  if (scene.queries.empty()) init_queries(scene, per_mask, c_ins, seed);
}

StepLog train_step(TrainState& state, const FrameBundle& frame, const TrainConfig& cfg,
                   int frame_index) {
  SceneMap& scene = state.scene;
  BackwardResult bw =
      pipeline_backward(scene, state.sogmm.k() > 0 ? &state.sogmm : nullptr, frame, cfg.pipeline);
  if (auto bad = bw.grads.find_non_finite()) {
    throw std::runtime_error("NaN gradient in parameter class: " + *bad);
  }

  ++state.adam.t;
  const int64_t t = state.adam.t;
  Gradients& m = state.adam.m;
  Gradients& v = state.adam.v;

  for (size_t s = 0; s < scene.surfels.size(); ++s) {
    Surfel& sf = scene.surfels[s];
    for (int c = 0; c < 3; ++c) {
      sf.center[c] -= adam_delta(m.center[s][c], v.center[s][c], bw.grads.center[s][c],
                                 cfg.lr_position, cfg, t);
    }
    for (int c = 0; c < 4; ++c) {
      sf.rotation[c] -= adam_delta(m.rotation[s][c], v.rotation[s][c], bw.grads.rotation[s][c],
                                   cfg.lr_rotation, cfg, t);
    }
    sf.rotation.normalize();
    for (int c = 0; c < 2; ++c) {
      // log-space scale update keeps s positive
      const double g_log = bw.grads.scales[s][c] * sf.scales[c];
      double theta = std::log(sf.scales[c]);
      theta -= adam_delta(m.scales[s][c], v.scales[s][c], g_log, cfg.lr_scale, cfg, t);
      sf.scales[c] = std::exp(theta);
    }
    {
      const double o = sf.opacity;
      const double g_logit = bw.grads.opacity[s] * o * (1.0 - o);
      double theta = logit(o);
      theta -= adam_delta(m.opacity[s], v.opacity[s], g_logit, cfg.lr_opacity, cfg, t);
      sf.opacity = sigmoid(theta);
    }
    for (int c = 0; c < 3; ++c) {
      const double col = sf.color[c];
      const double g_logit = bw.grads.color[s][c] * col * (1.0 - col);
      double theta = logit(col);
      theta -= adam_delta(m.color[s][c], v.color[s][c], g_logit, cfg.lr_color, cfg, t);
      sf.color[c] = sigmoid(theta);
    }
    for (int c = 0; c < scene.c_sem(); ++c) {
      sf.f_sem[c] -= adam_delta(m.f_sem(c, s), v.f_sem(c, s), bw.grads.f_sem(c, s),
                                cfg.lr_features, cfg, t);
    }
    for (int c = 0; c < scene.c_ins(); ++c) {
      sf.f_ins[c] -= adam_delta(m.f_ins(c, s), v.f_ins(c, s), bw.grads.f_ins(c, s),
                                cfg.lr_features, cfg, t);
    }
  }

  for (size_t q = 0; q < scene.queries.size(); ++q) {
    InstanceQuery& iq = scene.queries[q];
    if (!iq.alive) continue;
    for (int c = 0; c < scene.c_ins(); ++c) {
      iq.feature[c] -= adam_delta(m.query_feature(c, q), v.query_feature(c, q),
                                  bw.grads.query_feature(c, q), cfg.lr_queries, cfg, t);
    }
    for (int c = 0; c < 3; ++c) {
      iq.mean[c] -= adam_delta(m.query_mean[q][c], v.query_mean[q][c],
                               bw.grads.query_mean[q][c], cfg.lr_queries, cfg, t);
    }
    Vec6 cov_v = sym3_to_vec(iq.cov);
    for (int c = 0; c < 6; ++c) {
      cov_v[c] -= adam_delta(m.query_cov[q][c], v.query_cov[q][c], bw.grads.query_cov[q][c],
                             cfg.lr_queries, cfg, t);
    }
    // re-symmetrize with an eigenvalue floor
    Mat3 cov = vec_to_sym3(cov_v);
    Vec3 vals;
    Mat3 vecs;
    eigen_sym3_desc(cov, vals, vecs);
    for (int c = 0; c < 3; ++c) vals[c] = std::max(vals[c], kCovFloor);
    iq.cov = vecs * vals.asDiagonal() * vecs.transpose();
  }

  for (int i = 0; i < scene.attn.w_q.rows(); ++i) {
    for (int j = 0; j < scene.attn.w_q.cols(); ++j) {
      scene.attn.w_q(i, j) -=
          adam_delta(m.w_q(i, j), v.w_q(i, j), bw.grads.w_q(i, j), cfg.lr_attention, cfg, t);
      scene.attn.w_k(i, j) -=
          adam_delta(m.w_k(i, j), v.w_k(i, j), bw.grads.w_k(i, j), cfg.lr_attention, cfg, t);
      scene.attn.w_v(i, j) -=
          adam_delta(m.w_v(i, j), v.w_v(i, j), bw.grads.w_v(i, j), cfg.lr_attention, cfg, t);
    }
  }

  // class votes + prune window bookkeeping
  const int n_classes = static_cast<int>(scene.vocabulary.size());
  for (const auto& [q, g] : bw.report.matches) {
    if (q >= 0 && q < static_cast<int>(state.window_matches.size())) ++state.window_matches[q];
    ++scene.queries[q].assign_count;
    if (n_classes > 0 && g >= 0 && g < static_cast<int>(frame.instance_gt.size())) {
      const int cls = mask_majority_class(frame.instance_gt[g], frame.sem_gt, n_classes);
      if (cls >= 0) ++scene.queries[q].class_votes[cls];
    }
  }
  ++state.window_frames;
  ++state.step;

  StepLog log;
  log.step = state.step;
  log.frame = frame_index;
  log.report = bw.report;
  log.alive_queries = scene.alive_query_count();
  return log;
}

std::vector<StepLog> train(TrainState& state, const std::vector<FrameBundle>& frames,
                           const TrainConfig& cfg,
                           const std::function<void(const TrainState&, const StepLog&)>& on_step) {
  std::vector<StepLog> logs;
  if (frames.empty() || cfg.steps <= 0) return logs;
  const int n_frames = static_cast<int>(frames.size());
  std::vector<int> order(n_frames);
  std::iota(order.begin(), order.end(), 0);

  for (int step = 0; step < cfg.steps; ++step) {
    const int pos = step % n_frames;
    if (pos == 0 && cfg.frame_order == TrainConfig::FrameOrder::Shuffled) {
      for (int i = n_frames - 1; i > 0; --i) {
        std::swap(order[i], order[static_cast<int>(state.rng.uniform_int(i + 1))]);
      }
    }
    const int frame_idx = order[pos];
    StepLog log = train_step(state, frames[frame_idx], cfg, frame_idx);

    // scheduled query adjustment
    if (cfg.prune_interval > 0 && step >= cfg.prune_start &&
        (step - cfg.prune_start) % cfg.prune_interval == 0) {
      // duplicates first: a starving copy of a covered object should be
      // merged away rather than counted as useless. Masks come from the
      // raw attention map (peak-relative), which overlaps when queries
      // share an object; the softmax partition never would.
      const MatX attn = attention_matrix(state.scene.queries, state.scene);
      const auto masks = masks_from_attention(attn, 0.5);
      auto dups = prune_duplicates(state.scene.queries, masks, cfg.tau_iom);
      auto useless = prune_useless(state.scene.queries, state.window_matches, state.window_frames,
                                   cfg.min_assign_rate);
      log.prunes.insert(log.prunes.end(), dups.begin(), dups.end());
      log.prunes.insert(log.prunes.end(), useless.begin(), useless.end());
      std::fill(state.window_matches.begin(), state.window_matches.end(), 0);
      state.window_frames = 0;
      log.alive_queries = state.scene.alive_query_count();
    }

    // epoch boundary: re-vote classes, drop dead queries and surfels
    if (pos == n_frames - 1) {
      finalize_epoch_votes(state.scene);
      compact_queries(state);
      compact_surfels(state);
    }

    if (on_step) on_step(state, log);
    logs.push_back(std::move(log));
  }
  finalize_epoch_votes(state.scene);
  compact_queries(state);
  return logs;
}

}  // namespace psimap
