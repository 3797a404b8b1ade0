// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace psimap {

namespace {

constexpr double kProbClamp = 1e-7;
constexpr int kGradChunks = 16;  // fixed chunk count keeps reductions
                                 // bitwise identical across thread counts

std::vector<int> alive_indices(const SceneMap& scene) {
  std::vector<int> alive;
  for (size_t q = 0; q < scene.queries.size(); ++q) {
    if (scene.queries[q].alive) alive.push_back(static_cast<int>(q));
  }
  return alive;
}

std::vector<double> mask_from_channel(const Image& plane, int channel) {
  std::vector<double> mask(static_cast<size_t>(plane.width) * plane.height);
  for (int y = 0; y < plane.height; ++y) {
    for (int x = 0; x < plane.width; ++x) {
      mask[static_cast<size_t>(y) * plane.width + x] = plane.at(x, y, channel);
    }
  }
  return mask;
}

std::vector<double> mask_from_image(const Image& img) {
  std::vector<double> mask(static_cast<size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x) {
      mask[static_cast<size_t>(y) * img.width + x] = img.at(x, y, 0);
    }
  }
  return mask;
}

Mat3 spd_inverse(const Mat3& cov_in) {
  const Mat3 cov = 0.5 * (cov_in + cov_in.transpose());
  Eigen::LLT<Mat3> llt(cov);
  if (llt.info() == Eigen::Success) return llt.solve(Mat3::Identity());
  const double eps = 1e-8 * std::max(cov.trace(), 1e-12);
  return Eigen::LLT<Mat3>(cov + eps * Mat3::Identity()).solve(Mat3::Identity());
}

}  // namespace

PipelineConfig PipelineConfig::smooth() {
  PipelineConfig cfg;
  cfg.raster.alpha_min = 0;
  cfg.raster.t_min = 0;
  cfg.raster.support_cutoff = false;
  cfg.raster.chi2 = 1e8;  // bins cover the footprint of every surfel
  cfg.raster.blending = Blending::Full;
  return cfg;
}

PipelineForward pipeline_forward(const SceneMap& scene, const SogmmModel* model,
                                 const FrameBundle& frame, const PipelineConfig& cfg,
                                 bool want_cache) {
  PipelineForward f;
  f.visible = frustum_select(scene, frame.camera);

  const int n_q = static_cast<int>(scene.queries.size());
  const int c_ins = scene.c_ins();
  if (n_q > 0 && c_ins > 0) {
    const PosEncoder enc = PosEncoder::make(scene.attn);
    f.kv = build_keys_values(scene, f.visible, scene.attn, enc);
    f.attn = cross_attention_update(scene.queries, f.kv, scene.attn);
    if (f.attn.refined_valid) {
      if (scene.attn.dim() != c_ins) {
        throw std::invalid_argument("pipeline: attention head dim must equal C_ins");
      }
      f.features_used = f.attn.refined;
      f.used_refined = true;
    } else {
      f.features_used = MatX(c_ins, n_q);
      for (int q = 0; q < n_q; ++q) f.features_used.col(q) = scene.queries[q].feature;
      f.used_refined = false;
    }
    f.labels = assign_labels(scene.queries, &f.features_used, scene);
  }

  const MatX* labels = n_q > 0 ? &f.labels.dist : nullptr;
  f.targets = render(scene, labels, frame.camera, cfg.raster, want_cache ? &f.rcache : nullptr);

  const double rgb = loss_rgb(f.targets.color, frame.rgb, cfg.weights.lambda_s);
  const double geo =
      model != nullptr ? loss_geo(scene, *model, cfg.weights.lambda_n, &f.geo_assign) : 0.0;
  const double iso = loss_iso(scene);
  const double sem =
      scene.c_sem() > 0 && frame.sem_gt.width > 0 ? loss_sem(f.targets.sem_feat, frame.sem_gt) : 0.0;

  double ins = 0;
  f.alive = alive_indices(scene);
  if (!f.alive.empty() && n_q > 0) {
    std::vector<std::vector<double>> pred(f.alive.size());
    for (size_t k = 0; k < f.alive.size(); ++k) {
      pred[k] = mask_from_channel(f.targets.ins_dist, f.alive[k]);
    }
    std::vector<std::vector<double>> gt(frame.instance_gt.size());
    for (size_t g = 0; g < frame.instance_gt.size(); ++g) {
      gt[g] = mask_from_image(frame.instance_gt[g]);
    }
    if (!gt.empty()) {
      MatX cost(f.alive.size(), gt.size());
      for (size_t k = 0; k < pred.size(); ++k) {
        for (size_t g = 0; g < gt.size(); ++g) {
          cost(k, g) = dice_bce(pred[k], gt[g]);
        }
      }
      f.assignment = hungarian_match(cost, cfg.no_match_cost);
    } else {
      f.assignment.assign(f.alive.size(), -1);
    }
    ins = loss_ins(pred, gt, f.assignment);
  }

  f.report = total_loss(rgb, geo, ins, sem, iso, cfg.weights);
  for (size_t k = 0; k < f.assignment.size(); ++k) {
    if (f.assignment[k] >= 0) f.report.matches.push_back({f.alive[k], f.assignment[k]});
  }
  return f;
}

double pipeline_loss(const SceneMap& scene, const SogmmModel* model, const FrameBundle& frame,
                     const PipelineConfig& cfg) {
  return pipeline_forward(scene, model, frame, cfg, false).report.total;
}

const char* param_class_name(ParamClass c) {
  switch (c) {
    case ParamClass::Center: return "position";
    case ParamClass::Rotation: return "rotation";
    case ParamClass::Scale: return "scale";
    case ParamClass::Opacity: return "opacity";
    case ParamClass::Color: return "color";
    case ParamClass::SemFeature: return "semantic-feature";
    case ParamClass::InsFeature: return "instance-feature";
    case ParamClass::QueryFeature: return "query-feature";
    case ParamClass::QueryMean: return "query-mean";
    case ParamClass::QueryCov: return "query-covariance";
    case ParamClass::AttnWq: return "attention-wq";
    case ParamClass::AttnWk: return "attention-wk";
    case ParamClass::AttnWv: return "attention-wv";
  }
  return "?";
}

Gradients Gradients::zero(const SceneMap& scene) {
  const int n_s = static_cast<int>(scene.surfels.size());
  const int n_q = static_cast<int>(scene.queries.size());
  Gradients g;
  g.center.assign(n_s, Vec3::Zero());
  g.rotation.assign(n_s, Vec4::Zero());
  g.scales.assign(n_s, Vec2::Zero());
  g.opacity.assign(n_s, 0.0);
  g.color.assign(n_s, Vec3::Zero());
  g.f_sem = MatX::Zero(scene.c_sem(), n_s);
  g.f_ins = MatX::Zero(scene.c_ins(), n_s);
  g.query_feature = MatX::Zero(scene.c_ins(), n_q);
  g.query_mean.assign(n_q, Vec3::Zero());
  g.query_cov.assign(n_q, Vec6::Zero());
  const int c = scene.attn.c_ins();
  const int d = scene.attn.dim();
  g.w_q = MatX::Zero(c, d);
  g.w_k = MatX::Zero(c, d);
  g.w_v = MatX::Zero(c, d);
  return g;
}

void Gradients::accumulate(const Gradients& other, double scale) {
  for (size_t i = 0; i < center.size(); ++i) {
    center[i] += scale * other.center[i];
    rotation[i] += scale * other.rotation[i];
    scales[i] += scale * other.scales[i];
    opacity[i] += scale * other.opacity[i];
    color[i] += scale * other.color[i];
  }
  f_sem += scale * other.f_sem;
  f_ins += scale * other.f_ins;
  query_feature += scale * other.query_feature;
  for (size_t i = 0; i < query_mean.size(); ++i) {
    query_mean[i] += scale * other.query_mean[i];
    query_cov[i] += scale * other.query_cov[i];
  }
  w_q += scale * other.w_q;
  w_k += scale * other.w_k;
  w_v += scale * other.w_v;
}

std::optional<std::string> Gradients::find_non_finite() const {
  for (const auto& v : center) {
    if (!v.allFinite()) return param_class_name(ParamClass::Center);
  }
  for (const auto& v : rotation) {
    if (!v.allFinite()) return param_class_name(ParamClass::Rotation);
  }
  for (const auto& v : scales) {
    if (!v.allFinite()) return param_class_name(ParamClass::Scale);
  }
  for (double v : opacity) {
    if (!std::isfinite(v)) return param_class_name(ParamClass::Opacity);
  }
  for (const auto& v : color) {
    if (!v.allFinite()) return param_class_name(ParamClass::Color);
  }
  if (!f_sem.allFinite()) return param_class_name(ParamClass::SemFeature);
  if (!f_ins.allFinite()) return param_class_name(ParamClass::InsFeature);
  if (!query_feature.allFinite()) return param_class_name(ParamClass::QueryFeature);
  for (const auto& v : query_mean) {
    if (!v.allFinite()) return param_class_name(ParamClass::QueryMean);
  }
  for (const auto& v : query_cov) {
    if (!v.allFinite()) return param_class_name(ParamClass::QueryCov);
  }
  if (!w_q.allFinite()) return param_class_name(ParamClass::AttnWq);
  if (!w_k.allFinite()) return param_class_name(ParamClass::AttnWk);
  if (!w_v.allFinite()) return param_class_name(ParamClass::AttnWv);
  return std::nullopt;
}

namespace {

// Per-chunk accumulation buffers for the pixel-parallel blending
// backward; merged in chunk order.
struct ChunkGrads {
  std::vector<Mat3> g_hinv;         // per projected surfel
  std::vector<double> g_opacity;    // per scene surfel
  std::vector<Vec3> g_color;        // per scene surfel
  MatX g_fsem;                      // C_sem x N_s
  MatX g_lins;                      // N_q x N_s

  void init(int n_proj, int n_s, int c_sem, int n_q) {
    g_hinv.assign(n_proj, Mat3::Zero());
    g_opacity.assign(n_s, 0.0);
    g_color.assign(n_s, Vec3::Zero());
    g_fsem = MatX::Zero(c_sem, n_s);
    g_lins = MatX::Zero(n_q, n_s);
  }
};

}  // namespace

BackwardResult pipeline_backward(const SceneMap& scene, const SogmmModel* model,
                                 const FrameBundle& frame, const PipelineConfig& cfg) {
  PipelineForward fwd = pipeline_forward(scene, model, frame, cfg, true);
  const Camera& cam = frame.camera;
  const int w = cam.width, h = cam.height;
  const int n_s = static_cast<int>(scene.surfels.size());
  const int n_q = static_cast<int>(scene.queries.size());
  const int c_sem = scene.c_sem();
  const LossWeights& lw = cfg.weights;

  Gradients G = Gradients::zero(scene);

  // ---------- plane gradients ----------
  Image g_color_plane = loss_rgb_backward(fwd.targets.color, frame.rgb, lw.lambda_s, lw.l_rgb);

  Image g_sem_plane(w, h, c_sem);
  if (c_sem > 0 && frame.sem_gt.width > 0) {
    int64_t labeled = 0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (frame.sem_gt.at(x, y) >= 0) ++labeled;
      }
    }
    if (labeled > 0) {
      const double scale = lw.l_sem / static_cast<double>(labeled);
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const int cls = frame.sem_gt.at(x, y);
          if (cls < 0) continue;
          const double* f = fwd.targets.sem_feat.pixel(x, y);
          double m = f[0];
          for (int i = 1; i < c_sem; ++i) m = std::max(m, f[i]);
          double denom = 0;
          for (int i = 0; i < c_sem; ++i) denom += std::exp(f[i] - m);
          const double p_cls = std::exp(f[cls] - m) / denom;
          // clamped CE has zero slope when the probability saturates
          if (p_cls < kProbClamp || p_cls > 1.0 - kProbClamp) continue;
          for (int i = 0; i < c_sem; ++i) {
            const double p_i = std::exp(f[i] - m) / denom;
            g_sem_plane.at(x, y, i) = scale * (p_i - (i == cls ? 1.0 : 0.0));
          }
        }
      }
    }
  }

  Image g_ins_plane(w, h, n_q);
  if (!fwd.alive.empty()) {
    const double n_pix = static_cast<double>(w) * h;
    for (size_t k = 0; k < fwd.alive.size(); ++k) {
      const int ch = fwd.alive[k];
      const int gt_idx = k < fwd.assignment.size() ? fwd.assignment[k] : -1;
      if (gt_idx >= 0) {
        const Image& gt = frame.instance_gt[gt_idx];
        double inter = 0, sum_p = 0, sum_g = 0;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const double m = fwd.targets.ins_dist.at(x, y, ch);
            const double g = gt.at(x, y, 0);
            inter += m * g;
            sum_p += m;
            sum_g += g;
          }
        }
        const double denom = sum_p + sum_g;
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const double m = fwd.targets.ins_dist.at(x, y, ch);
            const double g = gt.at(x, y, 0);
            double grad = 0;
            if (denom > 0) {
              grad += -2.0 * g / denom + 2.0 * inter / (denom * denom);
            }
            if (m > kProbClamp && m < 1.0 - kProbClamp) {
              grad += (-g / m + (1.0 - g) / (1.0 - m)) / n_pix;
            }
            g_ins_plane.at(x, y, ch) = lw.l_ins * grad;
          }
        }
      } else {
        for (int y = 0; y < h; ++y) {
          for (int x = 0; x < w; ++x) {
            const double m = fwd.targets.ins_dist.at(x, y, ch);
            double grad = 0;
            if (m > kProbClamp && m < 1.0 - kProbClamp) {
              grad += (1.0 / (1.0 - m)) / n_pix;
            }
            g_ins_plane.at(x, y, ch) = lw.l_ins * grad;
          }
        }
      }
    }
  }

  // ---------- blending backward over pixels ----------
  const auto& projected = fwd.rcache.projected;
  const int n_proj = static_cast<int>(projected.size());
  const bool topk = cfg.raster.blending == Blending::TopK;
  const int k_sel = std::max(cfg.raster.top_k, 1);
  const MatX& labels = fwd.labels.dist;
  const bool have_labels = n_q > 0;

  std::vector<ChunkGrads> chunks(kGradChunks);
  const int64_t total_px = static_cast<int64_t>(w) * h;
  parallel_chunks(kGradChunks, cfg.raster.threads, [&](int64_t cb, int64_t ce) {
    std::vector<double> t_chain;     // transmittance prefix
    std::vector<double> weights_buf;
    std::vector<WeightKey> keys, best;
    std::vector<char> selected;
    for (int64_t c = cb; c < ce; ++c) {
      ChunkGrads& buf = chunks[c];
      buf.init(n_proj, n_s, c_sem, n_q);
      const int64_t px_begin = total_px * c / kGradChunks;
      const int64_t px_end = total_px * (c + 1) / kGradChunks;
      for (int64_t p = px_begin; p < px_end; ++p) {
        const auto& contribs = fwd.rcache.pixels[p];
        const int m = static_cast<int>(contribs.size());
        if (m == 0) continue;
        const int x = static_cast<int>(p % w);
        const int y = static_cast<int>(p / w);
        const double px_c = x + 0.5, py_c = y + 0.5;
        const Vec3 ray((px_c - cam.cx) / cam.fx, (py_c - cam.cy) / cam.fy, 1.0);

        t_chain.assign(m + 1, 1.0);
        weights_buf.assign(m, 0.0);
        for (int j = 0; j < m; ++j) {
          weights_buf[j] = contribs[j].alpha * t_chain[j];
          t_chain[j + 1] = t_chain[j] * (1.0 - contribs[j].alpha);
        }

        // replicate the forward's Top-K selection
        if (topk && m > k_sel) {
          keys.resize(m);
          for (int i = 0; i < m; ++i) keys[i] = {weights_buf[i], contribs[i].proj, i};
          topk_select(keys.data(), m, k_sel, best, selected);
        } else {
          selected.assign(m, 1);
        }

        const double* gc = g_color_plane.pixel(x, y);
        const double* gf = c_sem > 0 ? g_sem_plane.pixel(x, y) : nullptr;
        const double* gi = have_labels ? g_ins_plane.pixel(x, y) : nullptr;

        // suffix of sum_i w_i * <grad, value_i>, seeded with the
        // background color term (weight = final transmittance)
        double suffix = t_chain[m] * (gc[0] * cfg.raster.background[0] +
                                      gc[1] * cfg.raster.background[1] +
                                      gc[2] * cfg.raster.background[2]);
        for (int j = m - 1; j >= 0; --j) {
          const auto& e = contribs[j];
          const int src = projected[e.proj].source;
          const Surfel& sf = scene.surfels[src];
          const double w_j = weights_buf[j];

          double direct = gc[0] * sf.color[0] + gc[1] * sf.color[1] + gc[2] * sf.color[2];
          buf.g_color[src] += w_j * Vec3(gc[0], gc[1], gc[2]);
          if (selected[j]) {
            if (gf != nullptr) {
              double dot = 0;
              for (int i = 0; i < c_sem; ++i) {
                dot += gf[i] * sf.f_sem[i];
                buf.g_fsem(i, src) += w_j * gf[i];
              }
              direct += dot;
            }
            if (gi != nullptr) {
              double dot = 0;
              for (int i = 0; i < n_q; ++i) {
                dot += gi[i] * labels(i, src);
                buf.g_lins(i, src) += w_j * gi[i];
              }
              direct += dot;
            }
          }

          const double one_minus = 1.0 - e.alpha;
          const double g_alpha =
              t_chain[j] * direct - (one_minus > 0 ? suffix / one_minus : 0.0);
          suffix += w_j * direct;

          // alpha = opacity * exp(-(u^2 + v^2) / 2)
          const double d_sigma = std::exp(-0.5 * (e.u * e.u + e.v * e.v));
          buf.g_opacity[src] += d_sigma * g_alpha;
          const double g_dsigma = sf.opacity * g_alpha;
          const double g_u = -e.u * d_sigma * g_dsigma;
          const double g_v = -e.v * d_sigma * g_dsigma;

          const Vec3 wv = projected[e.proj].h_inv * ray;
          const double w2 = wv[2];
          const Vec3 g_w(g_u / w2, g_v / w2, -(e.u * g_u + e.v * g_v) / w2);
          buf.g_hinv[e.proj] += g_w * ray.transpose();
        }
      }
    }
  });

  // deterministic ordered merge
  MatX g_lins_total = MatX::Zero(n_q, n_s);
  std::vector<Mat3> g_hinv_total(n_proj, Mat3::Zero());
  for (const ChunkGrads& buf : chunks) {
    for (int i = 0; i < n_proj; ++i) g_hinv_total[i] += buf.g_hinv[i];
    for (int s = 0; s < n_s; ++s) {
      G.opacity[s] += buf.g_opacity[s];
      G.color[s] += buf.g_color[s];
    }
    G.f_sem += buf.g_fsem;
    g_lins_total += buf.g_lins;
  }

  // geometry chain of the alpha gradients
  for (int i = 0; i < n_proj; ++i) {
    const SurfelGeomGrads gg =
        project_surfel_backward(scene.surfels[projected[i].source], cam, projected[i],
                                g_hinv_total[i]);
    const int src = projected[i].source;
    G.center[src] += gg.d_center;
    G.rotation[src] += gg.d_rotation;
    G.scales[src] += gg.d_scales;
  }

  // ---------- label softmax backward ----------
  MatX g_fq_used;
  if (!fwd.alive.empty() && n_q > 0) {
    const int n_alive = static_cast<int>(fwd.alive.size());
    g_fq_used = MatX::Zero(fwd.features_used.rows(), n_q);
    std::vector<Mat3> cov_inv(n_alive);
    std::vector<Mat3> g_cov_inv(n_alive, Mat3::Zero());
    for (int a = 0; a < n_alive; ++a) cov_inv[a] = spd_inverse(scene.queries[fwd.alive[a]].cov);

    std::vector<double> sim(n_alive), geo_aff(n_alive), g_arow(n_alive);
    for (int s = 0; s < n_s; ++s) {
      const Surfel& sf = scene.surfels[s];
      // recompute S and D per alive query
      for (int a = 0; a < n_alive; ++a) {
        const int q = fwd.alive[a];
        sim[a] = sigmoid(fwd.features_used.col(q).dot(sf.f_ins));
        const Vec3 d = sf.center - scene.queries[q].mean;
        geo_aff[a] = std::exp(-0.5 * d.dot(cov_inv[a] * d));
      }
      // softmax backward: l = softmax(A), g_A = l * (g_l - <l, g_l>)
      double dot = 0;
      for (int a = 0; a < n_alive; ++a) {
        dot += labels(fwd.alive[a], s) * g_lins_total(fwd.alive[a], s);
      }
      bool any = false;
      for (int a = 0; a < n_alive; ++a) {
        g_arow[a] = labels(fwd.alive[a], s) * (g_lins_total(fwd.alive[a], s) - dot);
        if (g_arow[a] != 0.0) any = true;
      }
      if (!any) continue;
      for (int a = 0; a < n_alive; ++a) {
        const int q = fwd.alive[a];
        const double g_s_sim = g_arow[a] * geo_aff[a];
        const double g_d_aff = g_arow[a] * sim[a];
        // S = sigmoid(fq . f_ins)
        const double g_dot = sim[a] * (1.0 - sim[a]) * g_s_sim;
        g_fq_used.col(q) += g_dot * sf.f_ins;
        G.f_ins.col(s) += g_dot * fwd.features_used.col(q);
        // D = exp(-0.5 delta^T inv delta)
        const Vec3 delta = sf.center - scene.queries[q].mean;
        const Vec3 g_delta = -geo_aff[a] * g_d_aff * (cov_inv[a] * delta);
        G.center[s] += g_delta;
        G.query_mean[q] -= g_delta;
        g_cov_inv[a] += (-0.5 * geo_aff[a] * g_d_aff) * (delta * delta.transpose());
      }
    }
    // d L / d cov = -inv * (d L / d inv) * inv, mapped to unique entries
    for (int a = 0; a < n_alive; ++a) {
      const int q = fwd.alive[a];
      const Mat3 g_cov = -cov_inv[a] * g_cov_inv[a] * cov_inv[a];
      Vec6 v;
      v << g_cov(0, 0), 2 * g_cov(0, 1), 2 * g_cov(0, 2), g_cov(1, 1), 2 * g_cov(1, 2),
          g_cov(2, 2);
      G.query_cov[q] += v;
    }
  }

  // ---------- attention backward ----------
  if (g_fq_used.size() > 0) {
    if (fwd.used_refined) {
      const AttentionForward& att = fwd.attn;
      const int d = scene.attn.dim();
      const int n_v = static_cast<int>(fwd.visible.size());
      const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(d));

      MatX f_q_raw(scene.c_ins(), n_q);
      for (int q = 0; q < n_q; ++q) f_q_raw.col(q) = scene.queries[q].feature;

      const MatX& g_refined = g_fq_used;                 // d x N_q
      MatX g_vproj = g_refined * att.probs.transpose();  // d x |V|
      MatX g_probs = att.v_proj.transpose() * g_refined; // |V| x N_q
      MatX g_scores(n_v, n_q);
      for (int i = 0; i < n_q; ++i) {
        const double dot = att.probs.col(i).dot(g_probs.col(i));
        g_scores.col(i) = (att.probs.col(i).array() * (g_probs.col(i).array() - dot)).matrix();
      }
      MatX g_qproj = att.k_proj * g_scores * inv_sqrt_d;              // d x N_q
      MatX g_kproj = att.q_proj * g_scores.transpose() * inv_sqrt_d;  // d x |V|

      G.w_q += f_q_raw * g_qproj.transpose();
      G.query_feature += scene.attn.w_q * g_qproj;
      G.w_k += fwd.kv.keys * g_kproj.transpose();
      G.w_v += fwd.kv.values * g_vproj.transpose();
      const MatX g_keys = scene.attn.w_k * g_kproj;    // C x |V|
      const MatX g_values = scene.attn.w_v * g_vproj;  // C x |V|
      const PosEncoder enc = PosEncoder::make(scene.attn);
      for (int j = 0; j < n_v; ++j) {
        const int s = fwd.visible[j];
        G.f_ins.col(s) += g_keys.col(j) + g_values.col(j);
        G.center[s] += enc.jacobian(scene.surfels[s].center).transpose() * g_keys.col(j);
      }
    } else {
      G.query_feature += g_fq_used;
    }
  }

  // ---------- geometric prior backward ----------
  if (model != nullptr && n_s > 0 && model->k() > 0) {
    const double scale = lw.l_geo / static_cast<double>(n_s);
    for (int s = 0; s < n_s; ++s) {
      const SogmmComponent& comp = model->components[fwd.geo_assign[s]];
      const Surfel& sf = scene.surfels[s];
      const double d = (sf.center - comp.mean).dot(comp.normal);
      const double sgn = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
      G.center[s] += scale * sgn * comp.normal;

      Mat3 r;
      std::array<Mat3, 4> dr;
      rotation_from_quat_jacobian(sf.rotation, r, dr);
      const double ndot = r.col(2).dot(comp.normal);
      const double nsgn = ndot > 0 ? 1.0 : (ndot < 0 ? -1.0 : 0.0);
      const Vec3 g_n = -scale * lw.lambda_n * nsgn * comp.normal;
      for (int i = 0; i < 4; ++i) G.rotation[s][i] += g_n.dot(dr[i].col(2));
    }
  }

  // ---------- isotropy backward ----------
  if (n_s > 0) {
    const double scale = lw.l_iso / static_cast<double>(n_s);
    for (int s = 0; s < n_s; ++s) {
      const double d = scene.surfels[s].scales[0] - scene.surfels[s].scales[1];
      G.scales[s][0] += scale * 2.0 * d;
      G.scales[s][1] -= scale * 2.0 * d;
    }
  }

  return {fwd.report, std::move(G)};
}

std::vector<ParamRef> enumerate_params(const SceneMap& scene) {
  std::vector<ParamRef> refs;
  const int n_s = static_cast<int>(scene.surfels.size());
  const int c_sem = scene.c_sem();
  const int c_ins = scene.c_ins();
  for (int s = 0; s < n_s; ++s) {
    for (int i = 0; i < 3; ++i) refs.push_back({ParamClass::Center, s, i});
    for (int i = 0; i < 4; ++i) refs.push_back({ParamClass::Rotation, s, i});
    for (int i = 0; i < 2; ++i) refs.push_back({ParamClass::Scale, s, i});
    refs.push_back({ParamClass::Opacity, s, 0});
    for (int i = 0; i < 3; ++i) refs.push_back({ParamClass::Color, s, i});
    for (int i = 0; i < c_sem; ++i) refs.push_back({ParamClass::SemFeature, s, i});
    for (int i = 0; i < c_ins; ++i) refs.push_back({ParamClass::InsFeature, s, i});
  }
  for (size_t q = 0; q < scene.queries.size(); ++q) {
    if (!scene.queries[q].alive) continue;
    const int qi = static_cast<int>(q);
    for (int i = 0; i < c_ins; ++i) refs.push_back({ParamClass::QueryFeature, qi, i});
    for (int i = 0; i < 3; ++i) refs.push_back({ParamClass::QueryMean, qi, i});
    for (int i = 0; i < 6; ++i) refs.push_back({ParamClass::QueryCov, qi, i});
  }
  const int c = scene.attn.c_ins();
  const int d = scene.attn.dim();
  for (int i = 0; i < c * d; ++i) {
    refs.push_back({ParamClass::AttnWq, 0, i});
    refs.push_back({ParamClass::AttnWk, 0, i});
    refs.push_back({ParamClass::AttnWv, 0, i});
  }
  return refs;
}

double get_param(const SceneMap& scene, const ParamRef& ref) {
  switch (ref.cls) {
    case ParamClass::Center: return scene.surfels[ref.entity].center[ref.comp];
    case ParamClass::Rotation: return scene.surfels[ref.entity].rotation[ref.comp];
    case ParamClass::Scale: return scene.surfels[ref.entity].scales[ref.comp];
    case ParamClass::Opacity: return scene.surfels[ref.entity].opacity;
    case ParamClass::Color: return scene.surfels[ref.entity].color[ref.comp];
    case ParamClass::SemFeature: return scene.surfels[ref.entity].f_sem[ref.comp];
    case ParamClass::InsFeature: return scene.surfels[ref.entity].f_ins[ref.comp];
    case ParamClass::QueryFeature: return scene.queries[ref.entity].feature[ref.comp];
    case ParamClass::QueryMean: return scene.queries[ref.entity].mean[ref.comp];
    case ParamClass::QueryCov: return sym3_to_vec(scene.queries[ref.entity].cov)[ref.comp];
    case ParamClass::AttnWq: return scene.attn.w_q(ref.comp / scene.attn.dim(), ref.comp % scene.attn.dim());
    case ParamClass::AttnWk: return scene.attn.w_k(ref.comp / scene.attn.dim(), ref.comp % scene.attn.dim());
    case ParamClass::AttnWv: return scene.attn.w_v(ref.comp / scene.attn.dim(), ref.comp % scene.attn.dim());
  }
  return 0;
}

void set_param(SceneMap& scene, const ParamRef& ref, double value) {
  switch (ref.cls) {
    case ParamClass::Center: scene.surfels[ref.entity].center[ref.comp] = value; return;
    case ParamClass::Rotation: scene.surfels[ref.entity].rotation[ref.comp] = value; return;
    case ParamClass::Scale: scene.surfels[ref.entity].scales[ref.comp] = value; return;
    case ParamClass::Opacity: scene.surfels[ref.entity].opacity = value; return;
    case ParamClass::Color: scene.surfels[ref.entity].color[ref.comp] = value; return;
    case ParamClass::SemFeature: scene.surfels[ref.entity].f_sem[ref.comp] = value; return;
    case ParamClass::InsFeature: scene.surfels[ref.entity].f_ins[ref.comp] = value; return;
    case ParamClass::QueryFeature: scene.queries[ref.entity].feature[ref.comp] = value; return;
    case ParamClass::QueryMean: scene.queries[ref.entity].mean[ref.comp] = value; return;
    case ParamClass::QueryCov: {
      Vec6 v = sym3_to_vec(scene.queries[ref.entity].cov);
      v[ref.comp] = value;
      scene.queries[ref.entity].cov = vec_to_sym3(v);
      return;
    }
    case ParamClass::AttnWq:
      scene.attn.w_q(ref.comp / scene.attn.dim(), ref.comp % scene.attn.dim()) = value;
      return;
    case ParamClass::AttnWk:
      scene.attn.w_k(ref.comp / scene.attn.dim(), ref.comp % scene.attn.dim()) = value;
      return;
    case ParamClass::AttnWv:
      scene.attn.w_v(ref.comp / scene.attn.dim(), ref.comp % scene.attn.dim()) = value;
      return;
  }
}

double grad_entry(const Gradients& g, const ParamRef& ref) {
  switch (ref.cls) {
    case ParamClass::Center: return g.center[ref.entity][ref.comp];
    case ParamClass::Rotation: return g.rotation[ref.entity][ref.comp];
    case ParamClass::Scale: return g.scales[ref.entity][ref.comp];
    case ParamClass::Opacity: return g.opacity[ref.entity];
    case ParamClass::Color: return g.color[ref.entity][ref.comp];
    case ParamClass::SemFeature: return g.f_sem(ref.comp, ref.entity);
    case ParamClass::InsFeature: return g.f_ins(ref.comp, ref.entity);
    case ParamClass::QueryFeature: return g.query_feature(ref.comp, ref.entity);
    case ParamClass::QueryMean: return g.query_mean[ref.entity][ref.comp];
    case ParamClass::QueryCov: return g.query_cov[ref.entity][ref.comp];
    case ParamClass::AttnWq: return g.w_q(ref.comp / g.w_q.cols(), ref.comp % g.w_q.cols());
    case ParamClass::AttnWk: return g.w_k(ref.comp / g.w_k.cols(), ref.comp % g.w_k.cols());
    case ParamClass::AttnWv: return g.w_v(ref.comp / g.w_v.cols(), ref.comp % g.w_v.cols());
  }
  return 0;
}

FiniteDiffReport finite_diff_check(const SceneMap& scene, const SogmmModel* model,
                                   const FrameBundle& frame, const PipelineConfig& cfg, double h,
                                   int min_coords, uint64_t seed) {
  const BackwardResult bw = pipeline_backward(scene, model, frame, cfg);
  std::vector<ParamRef> all = enumerate_params(scene);

  // stratified subsample: a fair share of every class, topped up at random
  std::map<std::string, std::vector<size_t>> by_class;
  for (size_t i = 0; i < all.size(); ++i) by_class[param_class_name(all[i].cls)].push_back(i);
  Rng rng(seed);
  std::vector<size_t> chosen;
  const size_t quota =
      std::max<size_t>(1, static_cast<size_t>(min_coords) / std::max<size_t>(by_class.size(), 1));
  std::vector<char> taken(all.size(), 0);
  for (auto& [name, idxs] : by_class) {
    for (size_t k = 0; k < std::min(quota, idxs.size()); ++k) {
      // sample without replacement inside the class
      size_t pick = k + rng.uniform_int(idxs.size() - k);
      std::swap(idxs[k], idxs[pick]);
      chosen.push_back(idxs[k]);
      taken[idxs[k]] = 1;
    }
  }
  while (chosen.size() < static_cast<size_t>(min_coords) && chosen.size() < all.size()) {
    const size_t pick = rng.uniform_int(all.size());
    if (taken[pick]) continue;
    taken[pick] = 1;
    chosen.push_back(pick);
  }

  SceneMap probe = scene;
  FiniteDiffReport report;
  for (size_t idx : chosen) {
    const ParamRef& ref = all[idx];
    const double saved = get_param(probe, ref);
    set_param(probe, ref, saved + h);
    const double lp = pipeline_loss(probe, model, frame, cfg);
    set_param(probe, ref, saved - h);
    const double lm = pipeline_loss(probe, model, frame, cfg);
    set_param(probe, ref, saved);
    const double numeric = (lp - lm) / (2.0 * h);
    const double analytic = grad_entry(bw.grads, ref);
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic - numeric) / denom;
    auto& cls_max = report.per_class_max[param_class_name(ref.cls)];
    cls_max = std::max(cls_max, rel);
    if (rel > report.max_rel_err) {
      report.max_rel_err = rel;
      report.worst = ref;
      report.worst_analytic = analytic;
      report.worst_numeric = numeric;
    }
    ++report.coords_checked;
  }
  return report;
}

}  // namespace psimap
