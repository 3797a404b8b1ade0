// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_TRAINER_HPP
#define PSIMAP_TRAINER_HPP

#include <functional>
#include <vector>

#include "psimap/pipeline.hpp"

namespace psimap {

struct TrainConfig {
  int steps = 2000;
  double lr_position = 1.6e-4;
  double lr_rotation = 1e-3;
  double lr_scale = 5e-3;
  double lr_opacity = 5e-2;
  double lr_color = 2.5e-3;
  double lr_features = 2.5e-3;
  double lr_queries = 1e-3;
  double lr_attention = 1e-3;
  double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;

  int prune_start = 400;
  int prune_interval = 200;
  double min_assign_rate = 0.05;
  double tau_iom = 0.8;

  uint64_t seed = 1;
  enum class FrameOrder { Sequential, Shuffled } frame_order = FrameOrder::Sequential;
  PipelineConfig pipeline;
};

// First-order moment-adaptive update state. Scales live in log space,
// opacity and color in logit space; the moment buffers share the
// Gradients layout.
struct AdamState {
  Gradients m, v;
  int64_t t = 0;
};

struct TrainState {
  SceneMap scene;
  SogmmModel sogmm;  // frozen geometric prior
  AdamState adam;
  int64_t step = 0;
  std::vector<int64_t> window_matches;  // per query, trailing prune window
  int64_t window_frames = 0;
  Rng rng{1};

  static TrainState init(SceneMap scene, SogmmModel sogmm, const TrainConfig& cfg);
};

struct StepLog {
  int64_t step = 0;
  int frame = -1;
  LossReport report;
  std::vector<PruneEvent> prunes;
  int alive_queries = 0;
};

// Place n queries at random surfel centers with isotropic covariance
// derived from the scene extent.
void init_queries(SceneMap& scene, int n_queries, int c_ins, uint64_t seed);

// Seed queries from a frame's (pseudo-GT) instance masks: each mask
// gets round(queries_per_instance) queries at the centroid/spread of
// the surfels projecting into it. Oversubscribed masks start as
// near-coincident groups that duplicate pruning can merge later.
void init_queries_from_frame(SceneMap& scene, const FrameBundle& frame,
                             double queries_per_instance, int c_ins, uint64_t seed);

// One optimization step on one frame: attention-refined labels, render,
// losses, backward, moment-adaptive update, invariant repair.
// Throws std::runtime_error naming the parameter class on NaN gradients.
StepLog train_step(TrainState& state, const FrameBundle& frame, const TrainConfig& cfg,
                   int frame_index = -1);

// Full loop with scheduled pruning and per-epoch class voting.
// on_step (optional) observes every step log.
std::vector<StepLog> train(TrainState& state, const std::vector<FrameBundle>& frames,
                           const TrainConfig& cfg,
                           const std::function<void(const TrainState&, const StepLog&)>& on_step = {});

}  // namespace psimap

#endif
