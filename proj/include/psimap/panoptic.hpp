// psimap - panoptic surfel mapping
// SPDX-License-Identifier: Apache-2.0
#ifndef PSIMAP_PANOPTIC_HPP
#define PSIMAP_PANOPTIC_HPP

#include <vector>

#include "psimap/core_types.hpp"
#include "psimap/math_util.hpp"

namespace psimap {

// sqrt of the chi-square(2) 0.99 quantile: world-space confidence
// radius multiplier for frustum selection.
inline const double kConfRadius99 = std::sqrt(-2.0 * std::log(0.01));

// Eq-style feature similarity: sigmoid(f_q . f_g).
double feature_similarity(const VecX& f_q, const VecX& f_g);

// Density ratio phi(p_g) / phi(mu_k) of the query's spatial Gaussian;
// in (0, 1] with value 1 at the query center.
double geometric_affinity(const InstanceQuery& query, const Vec3& p_g);

// Fused attention map A = S * D.
double attention_map(const InstanceQuery& query, const VecX& f_q_used, const Surfel& surfel);

// Per-surfel instance label distributions.
struct LabelAssignment {
  MatX dist;                // N_queries x N_surfels, columns sum to 1
  std::vector<int> argmax;  // ties to the lowest query index
};

// Softmax over alive queries of the attention maps. `features` are the
// query features to use (e.g. attention-refined), one column per query;
// pass nullptr to use the stored query features. Dead queries get zero
// rows and never win the argmax.
LabelAssignment assign_labels(const std::vector<InstanceQuery>& queries, const MatX* features,
                              const SceneMap& scene);

// Indices of surfels whose 99% confidence discs reach the camera
// frustum (center tested against the frustum expanded by the
// world-space confidence radius). Monotone under frustum growth.
std::vector<int> frustum_select(const SceneMap& scene, const Camera& cam);

// Sinusoidal positional encoding projected to C_ins dims by a fixed
// random map derived from the attention config seed.
struct PosEncoder {
  int bands = 6;
  double base_freq = 0.5;
  MatX proj;  // C_ins x (6 * bands)

  static PosEncoder make(const AttentionWeights& w);
  VecX encode(const Vec3& p) const;
  // d encode / d p, C_ins x 3
  MatX jacobian(const Vec3& p) const;
};

struct KeysValues {
  MatX keys;    // C_ins x |V|, K_j = f_j + psi(mu_j)
  MatX values;  // C_ins x |V|, V_j = f_j
};
KeysValues build_keys_values(const SceneMap& scene, const std::vector<int>& visible,
                             const AttentionWeights& w, const PosEncoder& enc);

// Full forward state of the local cross-attention, kept for backward.
struct AttentionForward {
  bool refined_valid = false;  // false when the visible set was empty
  MatX q_proj;   // d x N_q
  MatX k_proj;   // d x |V|
  MatX v_proj;   // d x |V|
  MatX probs;    // |V| x N_q, softmax over the visible set
  MatX refined;  // d x N_q
};

// e_ij = (W_Q^T f_qi) . (W_K^T K_j) / sqrt(d); Q'_i = sum_j softmax_j * W_V^T V_j.
// Empty visible set -> refined_valid = false (callers fall back to the
// stored features).
AttentionForward cross_attention_update(const std::vector<InstanceQuery>& queries,
                                        const KeysValues& kv, const AttentionWeights& w);

// Set of surfel indices claimed by one query.
using Mask3D = std::vector<int>;  // sorted ascending

// Hard partition by the argmax label.
std::vector<Mask3D> masks_from_argmax(const std::vector<int>& argmax, int n_queries);

// Membership masks for duplicate detection: surfels whose assigned
// probability for the query exceeds the threshold. Unlike the argmax
// partition, these can overlap, which is what IoM needs to see when
// several queries share one object.
std::vector<Mask3D> masks_from_labels(const MatX& dist, double threshold);

// Raw attention-map matrix A(q, s) = S * D over all queries (dead rows
// zero), before the softmax competition.
MatX attention_matrix(const std::vector<InstanceQuery>& queries, const SceneMap& scene);

// Peak-relative membership: surfel s belongs to query q when
// A(q, s) >= rel_threshold * max_s' A(q, s'). Queries sharing an
// object produce overlapping masks here even though the softmax
// assignment splits it.
std::vector<Mask3D> masks_from_attention(const MatX& attention, double rel_threshold);

// Intersection over Mask: |M_i intersect M_j| / |M_i|. Asymmetric.
// Throws std::invalid_argument when M_i is empty.
double iom(const Mask3D& m_i, const Mask3D& m_j);

struct PruneEvent {
  int query;
  std::string reason;  // "useless" | "duplicate"
  double value;        // match rate or IoM
};

// Kill queries whose match rate over the trailing window is below
// min_assign_rate; at least one query always survives.
std::vector<PruneEvent> prune_useless(std::vector<InstanceQuery>& queries,
                                      const std::vector<int64_t>& window_matches,
                                      int64_t window_frames, double min_assign_rate);

// Kill the smaller-coverage query of every pair with IoM >= tau,
// processing pairs in descending IoM. Idempotent for fixed masks.
std::vector<PruneEvent> prune_duplicates(std::vector<InstanceQuery>& queries,
                                         const std::vector<Mask3D>& masks, double tau_iom);

}  // namespace psimap

#endif
