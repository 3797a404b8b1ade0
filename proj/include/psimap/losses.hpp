// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_LOSSES_HPP
#define PSIMAP_LOSSES_HPP

#include <utility>
#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/image.hpp"
#include "psimap/math_util.hpp"
#include "psimap/sogmm.hpp"

namespace psimap {

struct LossWeights {
  double lambda_s = 0.2;  // SSIM mix inside L_rgb
  double lambda_n = 0.1;  // normal alignment inside L_geo
  double l_rgb = 1.0;
  double l_geo = 0.5;
  double l_ins = 1.0;
  double l_sem = 0.5;
  double l_iso = 0.01;
};

struct LossReport {
  double rgb = 0, geo = 0, ins = 0, sem = 0, iso = 0;
  double total = 0;
  // matched (alive-query index, gt-mask index) pairs used for L_ins
  std::vector<std::pair<int, int>> matches;
};

// 11x11 Gaussian window (sigma 1.5) with per-pixel renormalization at
// the borders; filter and its exact adjoint.
struct SsimWindow {
  static constexpr int kRadius = 5;
  std::array<double, 2 * kRadius + 1> kernel;

  SsimWindow();
  Image filter(const Image& in) const;
  Image filter_adjoint(const Image& gout) const;

private:
  Image convolve(const Image& in) const;
  Image norm_map(int w, int h) const;
};

// Mean SSIM over pixels and channels, dynamic range 1, k1/k2 = 0.01/0.03.
double ssim_value(const Image& x, const Image& y);

// (1 - lambda_s) * mean-|diff| + lambda_s * (1 - SSIM)
double loss_rgb(const Image& rendered, const Image& gt, double lambda_s);
// d loss_rgb / d rendered, scaled by `scale`.
Image loss_rgb_backward(const Image& rendered, const Image& gt, double lambda_s, double scale);

// Mean over surfels of plane distance to the nearest component plus
// lambda_n * (1 - |n_i . n_hat|). `assignment` (optional out) receives
// the per-surfel component index.
double loss_geo(const SceneMap& scene, const SogmmModel& model, double lambda_n,
                std::vector<int>* assignment = nullptr);

// Mean over surfels of (s1 - s2)^2.
double loss_iso(const SceneMap& scene);

// Minimum-cost one-to-one partial assignment of rows to columns,
// padded to square with `no_match_cost` per unmatched row/column.
// Returns the column matched to each row, -1 for unmatched.
// Throws std::invalid_argument on non-finite costs.
std::vector<int> hungarian_match(const MatX& cost, double no_match_cost = 1.0);

// Per-pair Dice + BCE given soft masks in [0,1]; probabilities clamped
// to [1e-7, 1 - 1e-7] inside the logs.
double dice_bce(const std::vector<double>& pred, const std::vector<double>& gt);

// Sum over matched pairs of Dice + mean BCE; unmatched predictions pay
// BCE against an empty mask. `pred` holds one soft mask per alive
// query; `assignment` maps pred index -> gt index or -1.
double loss_ins(const std::vector<std::vector<double>>& pred,
                const std::vector<std::vector<double>>& gt, const std::vector<int>& assignment);

// Per-pixel cross-entropy of softmaxed semantic features against class
// ids; gt id -1 is ignored; mean over labeled pixels.
double loss_sem(const Image& sem_feat, const IntPlane& gt);

LossReport total_loss(double rgb, double geo, double ins, double sem, double iso,
                      const LossWeights& w);

}  // namespace psimap

#endif
