// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#include "psimap/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace psimap {

namespace {

constexpr double kSsimC1 = 0.01 * 0.01;  // (k1 * L)^2, L = 1
constexpr double kSsimC2 = 0.03 * 0.03;
constexpr double kProbClamp = 1e-7;

double clamp_prob(double p) { return std::clamp(p, kProbClamp, 1.0 - kProbClamp); }

}  // namespace

SsimWindow::SsimWindow() {
  const double sigma = 1.5;
  double sum = 0;
  for (int i = -kRadius; i <= kRadius; ++i) {
    kernel[i + kRadius] = std::exp(-0.5 * i * i / (sigma * sigma));
    sum += kernel[i + kRadius];
  }
  for (auto& k : kernel) k /= sum;
}

Image SsimWindow::convolve(const Image& in) const {
  // separable zero-pad convolution
  Image tmp(in.width, in.height, in.channels);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        double acc = 0;
        for (int k = -kRadius; k <= kRadius; ++k) {
          const int xx = x + k;
          if (xx < 0 || xx >= in.width) continue;
          acc += kernel[k + kRadius] * in.at(xx, y, c);
        }
        tmp.at(x, y, c) = acc;
      }
    }
  }
  Image out(in.width, in.height, in.channels);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) {
        double acc = 0;
        for (int k = -kRadius; k <= kRadius; ++k) {
          const int yy = y + k;
          if (yy < 0 || yy >= in.height) continue;
          acc += kernel[k + kRadius] * tmp.at(x, yy, c);
        }
        out.at(x, y, c) = acc;
      }
    }
  }
  return out;
}

Image SsimWindow::norm_map(int w, int h) const {
  // separable sum of in-bounds kernel weights
  std::vector<double> nx(w), ny(h);
  for (int x = 0; x < w; ++x) {
    double acc = 0;
    for (int k = -kRadius; k <= kRadius; ++k) {
      if (x + k >= 0 && x + k < w) acc += kernel[k + kRadius];
    }
    nx[x] = acc;
  }
  for (int y = 0; y < h; ++y) {
    double acc = 0;
    for (int k = -kRadius; k <= kRadius; ++k) {
      if (y + k >= 0 && y + k < h) acc += kernel[k + kRadius];
    }
    ny[y] = acc;
  }
  Image norm(w, h, 1);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) norm.at(x, y) = nx[x] * ny[y];
  }
  return norm;
}

Image SsimWindow::filter(const Image& in) const {
  Image out = convolve(in);
  const Image norm = norm_map(in.width, in.height);
  for (int y = 0; y < in.height; ++y) {
    for (int x = 0; x < in.width; ++x) {
      for (int c = 0; c < in.channels; ++c) out.at(x, y, c) /= norm.at(x, y);
    }
  }
  return out;
}

Image SsimWindow::filter_adjoint(const Image& gout) const {
  Image scaled = gout;
  const Image norm = norm_map(gout.width, gout.height);
  for (int y = 0; y < gout.height; ++y) {
    for (int x = 0; x < gout.width; ++x) {
      for (int c = 0; c < gout.channels; ++c) scaled.at(x, y, c) /= norm.at(x, y);
    }
  }
  return convolve(scaled);
}

namespace {

struct SsimParts {
  Image ux, uy, vx, vy, cxy;
};

SsimParts ssim_parts(const SsimWindow& win, const Image& x, const Image& y) {
  SsimParts p;
  p.ux = win.filter(x);
  p.uy = win.filter(y);
  Image xx = x, yy = y, xy = x;
  for (size_t i = 0; i < x.data.size(); ++i) {
    xx.data[i] = x.data[i] * x.data[i];
    yy.data[i] = y.data[i] * y.data[i];
    xy.data[i] = x.data[i] * y.data[i];
  }
  p.vx = win.filter(xx);
  p.vy = win.filter(yy);
  p.cxy = win.filter(xy);
  for (size_t i = 0; i < x.data.size(); ++i) {
    p.vx.data[i] -= p.ux.data[i] * p.ux.data[i];
    p.vy.data[i] -= p.uy.data[i] * p.uy.data[i];
    p.cxy.data[i] -= p.ux.data[i] * p.uy.data[i];
  }
  return p;
}

}  // namespace

double ssim_value(const Image& x, const Image& y) {
  if (!x.same_shape(y)) throw std::invalid_argument("ssim: shape mismatch");
  SsimWindow win;
  const SsimParts p = ssim_parts(win, x, y);
  double acc = 0;
  for (size_t i = 0; i < x.data.size(); ++i) {
    const double a1 = 2 * p.ux.data[i] * p.uy.data[i] + kSsimC1;
    const double a2 = 2 * p.cxy.data[i] + kSsimC2;
    const double b1 = p.ux.data[i] * p.ux.data[i] + p.uy.data[i] * p.uy.data[i] + kSsimC1;
    const double b2 = p.vx.data[i] + p.vy.data[i] + kSsimC2;
    acc += (a1 * a2) / (b1 * b2);
  }
  return acc / static_cast<double>(x.data.size());
}

double loss_rgb(const Image& rendered, const Image& gt, double lambda_s) {
  if (!rendered.same_shape(gt)) throw std::invalid_argument("loss_rgb: shape mismatch");
  double l1 = 0;
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    l1 += std::abs(rendered.data[i] - gt.data[i]);
  }
  l1 /= static_cast<double>(rendered.data.size());
  if (lambda_s == 0.0) return l1;
  return (1.0 - lambda_s) * l1 + lambda_s * (1.0 - ssim_value(rendered, gt));
}

Image loss_rgb_backward(const Image& rendered, const Image& gt, double lambda_s, double scale) {
  const double n = static_cast<double>(rendered.data.size());
  Image grad(rendered.width, rendered.height, rendered.channels);
  const double l1_scale = scale * (1.0 - lambda_s) / n;
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    const double d = rendered.data[i] - gt.data[i];
    grad.data[i] = l1_scale * (d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0));
  }
  if (lambda_s == 0.0) return grad;

  SsimWindow win;
  const SsimParts p = ssim_parts(win, rendered, gt);
  // d(1 - mean ssim)/d(parts): upstream per-pixel factor
  const double g_s = -scale * lambda_s / n;
  Image g_ux(rendered.width, rendered.height, rendered.channels);
  Image g_sxx(rendered.width, rendered.height, rendered.channels);
  Image g_sxy(rendered.width, rendered.height, rendered.channels);
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    const double ux = p.ux.data[i], uy = p.uy.data[i];
    const double a1 = 2 * ux * uy + kSsimC1;
    const double a2 = 2 * p.cxy.data[i] + kSsimC2;
    const double b1 = ux * ux + uy * uy + kSsimC1;
    const double b2 = p.vx.data[i] + p.vy.data[i] + kSsimC2;
    const double da1 = g_s * a2 / (b1 * b2);
    const double da2 = g_s * a1 / (b1 * b2);
    const double db1 = -g_s * a1 * a2 / (b1 * b1 * b2);
    const double db2 = -g_s * a1 * a2 / (b1 * b2 * b2);
    // vx = sxx - ux^2, cxy = sxy - ux uy
    const double g_vx = db2;
    const double g_cxy = 2 * da2;
    g_sxx.data[i] = g_vx;
    g_sxy.data[i] = g_cxy;
    g_ux.data[i] = 2 * uy * da1 + 2 * ux * db1 - 2 * ux * g_vx - uy * g_cxy;
  }
  const Image t_ux = win.filter_adjoint(g_ux);
  const Image t_sxx = win.filter_adjoint(g_sxx);
  const Image t_sxy = win.filter_adjoint(g_sxy);
  for (size_t i = 0; i < rendered.data.size(); ++i) {
    grad.data[i] += t_ux.data[i] + 2 * rendered.data[i] * t_sxx.data[i] + gt.data[i] * t_sxy.data[i];
  }
  return grad;
}

double loss_geo(const SceneMap& scene, const SogmmModel& model, double lambda_n,
                std::vector<int>* assignment) {
  if (scene.surfels.empty() || model.k() == 0) return 0.0;
  if (assignment != nullptr) assignment->assign(scene.surfels.size(), -1);
  double acc = 0;
  for (size_t i = 0; i < scene.surfels.size(); ++i) {
    const Surfel& s = scene.surfels[i];
    const int k = nearest_component(model, s.center);
    if (assignment != nullptr) (*assignment)[i] = k;
    const SogmmComponent& comp = model.components[k];
    const Vec3 n_i = rotation_from_quat(s.rotation).col(2);
    acc += plane_distance(s.center, comp) + lambda_n * (1.0 - std::abs(n_i.dot(comp.normal)));
  }
  return acc / static_cast<double>(scene.surfels.size());
}

double loss_iso(const SceneMap& scene) {
  if (scene.surfels.empty()) return 0.0;
  double acc = 0;
  for (const Surfel& s : scene.surfels) {
    const double d = s.scales[0] - s.scales[1];
    acc += d * d;
  }
  return acc / static_cast<double>(scene.surfels.size());
}

std::vector<int> hungarian_match(const MatX& cost, double no_match_cost) {
  const int n = static_cast<int>(cost.rows());
  const int m = static_cast<int>(cost.cols());
  if (!cost.allFinite()) throw std::invalid_argument("hungarian_match: non-finite cost");
  if (n == 0) return {};
  constexpr double kBig = 1e15;

  // square padding: every row and column gets a private no-match slot
  const int size = n + m;
  MatX a(size, size);
  a.setConstant(kBig);
  a.block(0, 0, n, m) = cost;
  for (int i = 0; i < n; ++i) a(i, m + i) = no_match_cost;
  for (int j = 0; j < m; ++j) a(n + j, j) = no_match_cost;
  a.block(n, m, m, n).setZero();

  // potentials + augmenting path assignment, O(size^3)
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(size + 1, 0), v(size + 1, 0);
  std::vector<int> p(size + 1, 0), way(size + 1, 0);
  for (int i = 1; i <= size; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(size + 1, inf);
    std::vector<char> used(size + 1, 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      int j1 = -1;
      double delta = inf;
      for (int j = 1; j <= size; ++j) {
        if (used[j]) continue;
        const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= size; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }

  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= size; ++j) {
    const int row = p[j] - 1;
    if (row >= 0 && row < n && j - 1 < m) row_to_col[row] = j - 1;
  }
  return row_to_col;
}

double dice_bce(const std::vector<double>& pred, const std::vector<double>& gt) {
  if (pred.size() != gt.size()) throw std::invalid_argument("dice_bce: size mismatch");
  const double n = static_cast<double>(pred.size());
  double inter = 0, sum_p = 0, sum_g = 0, bce = 0;
  for (size_t i = 0; i < pred.size(); ++i) {
    inter += pred[i] * gt[i];
    sum_p += pred[i];
    sum_g += gt[i];
    const double p = clamp_prob(pred[i]);
    bce -= gt[i] * std::log(p) + (1.0 - gt[i]) * std::log(1.0 - p);
  }
  const double denom = sum_p + sum_g;
  const double dice = denom > 0 ? 1.0 - 2.0 * inter / denom : 0.0;
  return dice + bce / n;
}

double loss_ins(const std::vector<std::vector<double>>& pred,
                const std::vector<std::vector<double>>& gt, const std::vector<int>& assignment) {
  double acc = 0;
  const std::vector<double> empty;
  for (size_t k = 0; k < pred.size(); ++k) {
    const int g = assignment[k];
    if (g >= 0) {
      acc += dice_bce(pred[k], gt[g]);
    } else {
      // unmatched prediction against an empty mask: BCE only
      const double n = static_cast<double>(pred[k].size());
      double bce = 0;
      for (double p : pred[k]) bce -= std::log(1.0 - clamp_prob(p));
      acc += bce / n;
    }
  }
  return acc;
}

double loss_sem(const Image& sem_feat, const IntPlane& gt) {
  if (sem_feat.width != gt.width || sem_feat.height != gt.height) {
    throw std::invalid_argument("loss_sem: shape mismatch");
  }
  const int c = sem_feat.channels;
  double acc = 0;
  int64_t labeled = 0;
  for (int y = 0; y < gt.height; ++y) {
    for (int x = 0; x < gt.width; ++x) {
      const int cls = gt.at(x, y);
      if (cls < 0) continue;
      if (cls >= c) throw std::invalid_argument("loss_sem: class id outside feature channels");
      const double* f = sem_feat.pixel(x, y);
      double m = f[0];
      for (int i = 1; i < c; ++i) m = std::max(m, f[i]);
      double denom = 0;
      for (int i = 0; i < c; ++i) denom += std::exp(f[i] - m);
      const double p = clamp_prob(std::exp(f[cls] - m) / denom);
      acc -= std::log(p);
      ++labeled;
    }
  }
  return labeled > 0 ? acc / static_cast<double>(labeled) : 0.0;
}

LossReport total_loss(double rgb, double geo, double ins, double sem, double iso,
                      const LossWeights& w) {
  LossReport r;
  r.rgb = rgb;
  r.geo = geo;
  r.ins = ins;
  r.sem = sem;
  r.iso = iso;
  r.total = w.l_rgb * rgb + w.l_geo * geo + w.l_ins * ins + w.l_sem * sem + w.l_iso * iso;
  return r;
}

}  // namespace psimap
