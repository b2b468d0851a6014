#pragma once

#include <type_traits>
#include <vector>

#include "pasta/trigger.hpp"
#include "pasta/vit.hpp"

namespace pasta {

// alpha1 weighs the visual term and alpha2 the attention-disparity term, the
// way the alternating trainer applies them. A run can swap the readings by
// supplying different weights per phase.
struct LossWeights {
  double alpha1 = 1.0;
  double alpha2 = 0.005;

  void validate() const;
};

template <typename S>
struct LossReport {
  S clean = 0;
  S backdoor = 0;
  S visual = 0;
  S attention = 0;
  S aggregate = 0;
};

enum class AttentionCompare {
  kFullMap,   // whole (n+1) x (n+1) composed map
  kClassRow,  // class-token row only
};

enum class Insertion { kSuperimpose, kReplace };

// Coefficients of each term in one aggregate, and which variables receive a
// gradient.
struct ObjectiveTerms {
  double clean = 0;
  double backdoor = 1;
  double visual = 0;
  double attention = 0;
  bool grad_params = false;
  bool grad_trigger = false;
};

struct AttentionSpec {
  int layer = 0;  // 0 selects the deepest layer
  AttentionCompare compare = AttentionCompare::kFullMap;
};

template <typename S>
struct ObjectiveResult {
  LossReport<S> report;
  Vec<S> grad_params;   // empty unless requested
  Vec<S> grad_trigger;  // empty unless requested
  std::vector<PatchIndex> locations;  // one sampled location per poisoned sample
};

// Shared engine behind every objective. Each poisoned sample draws one location
// from `policy` (in batch order) and that location is used by every term.
// With Insertion::kReplace the trigger values are pasted instead of added and
// no trigger gradient exists.
template <typename S>
ObjectiveResult<S> evaluate_objective(const ViTParams<S>& params,
                                      std::type_identity_t<const ImageBatch<S>*> clean,
                                      const ImageBatch<S>* poison, const Trigger<S>& trigger,
                                      const LocationPolicy& policy, int target_label,
                                      const ObjectiveTerms& terms, AttentionSpec attention,
                                      Rng& rng, Insertion insertion = Insertion::kSuperimpose);

// Mean cross-entropy on clean data.
template <typename S>
S loss_clean(const ViTParams<S>& params, const ImageBatch<S>& batch);

// Mean cross-entropy of poisoned samples against the target label.
template <typename S>
S loss_backdoor(const ViTParams<S>& params, const ImageBatch<S>& batch, const Trigger<S>& trigger,
                const LocationPolicy& policy, int target_label, Rng& rng,
                std::vector<PatchIndex>* locations = nullptr);

// Mean pixel-space l2 distance between poisoned and clean images.
template <typename S>
S loss_visual(const ImageBatch<S>& batch, const Trigger<S>& trigger, const LocationPolicy& policy,
              const ImageGeometry& geom, Rng& rng);

// Mean Frobenius distance between composed attention maps of poisoned and
// clean images.
template <typename S>
S loss_attention(const ViTParams<S>& params, const ImageBatch<S>& batch, const Trigger<S>& trigger,
                 const LocationPolicy& policy, AttentionSpec attention, Rng& rng);

// L_bd + alpha1 L_vis + alpha2 L_attn, differentiated w.r.t. the trigger only.
template <typename S>
ObjectiveResult<S> trigger_objective(const ViTParams<S>& params, const ImageBatch<S>& batch,
                                     const Trigger<S>& trigger, const LossWeights& weights,
                                     const LocationPolicy& policy, int target_label,
                                     AttentionSpec attention, Rng& rng);

// L_c + L_bd + alpha2 L_attn, differentiated w.r.t. the parameters only.
template <typename S>
ObjectiveResult<S> model_objective(const ViTParams<S>& params, const ImageBatch<S>& clean_batch,
                                   const ImageBatch<S>& poison_batch, const Trigger<S>& trigger,
                                   const LossWeights& weights, const LocationPolicy& policy,
                                   int target_label, AttentionSpec attention, Rng& rng);

// Joint objective L_c + L_bd + alpha1 L_vis + alpha2 L_attn with gradients for
// both the parameters and the trigger. Ablation baseline only.
template <typename S>
ObjectiveResult<S> single_level_objective(const ViTParams<S>& params,
                                          const ImageBatch<S>& clean_batch,
                                          const ImageBatch<S>& poison_batch,
                                          const Trigger<S>& trigger, const LossWeights& weights,
                                          const LocationPolicy& policy, int target_label,
                                          AttentionSpec attention, Rng& rng);

}  // namespace pasta
