#include "pasta/objectives.hpp"

#include <cmath>

#include <fmt/format.h>

namespace pasta {

void LossWeights::validate() const {
  if (!(alpha1 >= 0.0) || !(alpha2 >= 0.0) || !std::isfinite(alpha1) || !std::isfinite(alpha2)) {
    throw ConfigError(fmt::format("loss weights must be finite and non-negative (got {}, {})",
                                  alpha1, alpha2));
  }
}

namespace {

template <typename S>
Mat<S> composed(const AttentionStack<S>& attn, int layers, AttentionCompare compare) {
  Mat<S> m = attention_map(attn, layers);
  if (compare == AttentionCompare::kClassRow) return m.topRows(1);
  return m;
}

// Pulls d(loss)/d(map) back onto the per-head probabilities of layers [0, layers).
template <typename S>
AttentionStack<S> map_backward(const AttentionStack<S>& attn, int layers, const Mat<S>& dmap,
                               AttentionCompare compare) {
  const int t = attn.tokens;
  Mat<S> dfull = Mat<S>::Zero(t, t);
  if (compare == AttentionCompare::kClassRow) {
    dfull.topRows(1) = dmap;
  } else {
    dfull = dmap;
  }

  std::vector<Mat<S>> means(layers);
  for (int k = 0; k < layers; ++k) means[k] = attn.head_mean(k);

  // prefix[k] = A_{k-1} ... A_0
  std::vector<Mat<S>> prefix(layers);
  prefix[0] = Mat<S>::Identity(t, t);
  for (int k = 1; k < layers; ++k) prefix[k] = means[k - 1] * prefix[k - 1];

  AttentionStack<S> out;
  out.heads = attn.heads;
  out.tokens = t;
  out.layers.resize(attn.depth());
  Mat<S> upstream = dfull;  // (A_{l-1} ... A_{k+1})^T dM
  for (int k = layers - 1; k >= 0; --k) {
    const Mat<S> da = upstream * prefix[k].transpose();
    Mat<S>& g = out.layers[k];
    g.resize(attn.heads * t, t);
    for (int h = 0; h < attn.heads; ++h) g.middleRows(h * t, t) = da / S(attn.heads);
    upstream = means[k].transpose() * upstream;
  }
  return out;
}

template <typename S>
void accumulate(Vec<S>& total, const Vec<S>& part) {
  if (part.size() == 0) return;
  if (total.size() == 0) {
    total = part;
  } else {
    total += part;
  }
}

}  // namespace

template <typename S>
ObjectiveResult<S> evaluate_objective(const ViTParams<S>& params,
                                      std::type_identity_t<const ImageBatch<S>*> clean,
                                      const ImageBatch<S>* poison, const Trigger<S>& trigger,
                                      const LocationPolicy& policy, int target_label,
                                      const ObjectiveTerms& terms, AttentionSpec attention,
                                      Rng& rng, Insertion insertion) {
  const ModelConfig& cfg = params.config;
  const ImageGeometry geom = geometry_of(cfg);
  if (target_label < 0 || target_label >= cfg.num_classes) {
    throw ConfigError(fmt::format("target label {} outside [0, {})", target_label, cfg.num_classes));
  }
  if (trigger.values.size() != geom.patch_dim()) {
    throw DimensionError(fmt::format("trigger has {} values, patches have {}",
                                     trigger.values.size(), geom.patch_dim()));
  }
  const int layers = attention.layer == 0 ? cfg.depth : attention.layer;
  if (layers < 1 || layers > cfg.depth) {
    throw std::out_of_range(fmt::format("attention layer {} outside [1, {}]", layers, cfg.depth));
  }
  if (terms.grad_trigger && insertion == Insertion::kReplace) {
    throw ConfigError("replacement insertion has no trigger gradient");
  }

  ObjectiveResult<S> res;
  LossReport<S>& rep = res.report;
  const bool want_params = terms.grad_params;
  if (want_params) res.grad_params = Vec<S>::Zero(params.data.size());
  if (terms.grad_trigger) res.grad_trigger = Vec<S>::Zero(trigger.values.size());

  if (clean != nullptr && clean->size() > 0) {
    const bool grad = want_params && terms.clean != 0.0;
    auto fwd = forward(params, clean->images, {.keep_attention = grad, .keep_cache = grad});
    Mat<S> dlogits;
    rep.clean = cross_entropy(fwd.logits, clean->labels, grad ? &dlogits : nullptr);
    if (grad) {
      dlogits *= S(terms.clean);
      accumulate(res.grad_params, backward(params, fwd, dlogits, {.params = true}).params);
    }
  }

  const int bp = poison == nullptr ? 0 : poison->size();
  if (bp > 0) {
    if (poison->images.cols() != cfg.image_dim()) {
      throw DimensionError("poison batch width does not match the model");
    }
    Mat<S> poisoned = poison->images;
    res.locations.reserve(bp);
    for (int b = 0; b < bp; ++b) {
      const PatchIndex loc = policy.sample(rng);
      res.locations.push_back(loc);
      if (insertion == Insertion::kSuperimpose) {
        insert_sup_inplace(poisoned.row(b).data(), trigger.values.data(), loc, geom);
      } else {
        insert_rep_inplace(poisoned.row(b).data(), trigger.values.data(), loc, geom);
      }
    }

    // visual term: per-sample pixel distance, which is differentiable in t only
    S vis = 0;
    for (int b = 0; b < bp; ++b) {
      const S d = (poisoned.row(b) - poison->images.row(b)).norm();
      vis += d;
      if (terms.grad_trigger && terms.visual != 0.0 && d > S(0)) {
        res.grad_trigger += S(terms.visual / bp) * trigger.values / d;
      }
    }
    rep.visual = vis / S(bp);

    const bool need_grad = want_params || terms.grad_trigger;
    const bool attn_grad = need_grad && terms.attention != 0.0;
    const bool bd_grad = need_grad && terms.backdoor != 0.0;

    auto fwd_p = forward(params, poisoned, {.keep_attention = true, .keep_cache = need_grad});
    auto fwd_c = forward(params, poison->images,
                         {.keep_attention = true, .keep_cache = attn_grad && want_params});

    const std::vector<int> target(bp, target_label);
    Mat<S> dlogits;
    rep.backdoor = cross_entropy(fwd_p.logits, target, bd_grad ? &dlogits : nullptr);
    if (bd_grad) {
      dlogits *= S(terms.backdoor);
    } else {
      dlogits = Mat<S>::Zero(bp, cfg.num_classes);
    }

    std::vector<AttentionStack<S>> dattn_p, dattn_c;
    if (attn_grad) {
      dattn_p.resize(bp);
      dattn_c.resize(bp);
    }
    S disparity = 0;
    for (int b = 0; b < bp; ++b) {
      const Mat<S> diff = composed(fwd_p.attention[b], layers, attention.compare) -
                          composed(fwd_c.attention[b], layers, attention.compare);
      const S norm = diff.norm();
      disparity += norm;
      if (!attn_grad) continue;
      const Mat<S> dmap = norm > S(0) ? Mat<S>(diff * (S(terms.attention / bp) / norm))
                                      : Mat<S>::Zero(diff.rows(), diff.cols());
      dattn_p[b] = map_backward(fwd_p.attention[b], layers, dmap, attention.compare);
      if (want_params) {
        dattn_c[b] = map_backward(fwd_c.attention[b], layers, Mat<S>(-dmap), attention.compare);
      }
    }
    rep.attention = disparity / S(bp);

    if (bd_grad || attn_grad) {
      const auto g = backward(params, fwd_p, dlogits, attn_grad ? &dattn_p : nullptr,
                              {.params = want_params, .inputs = terms.grad_trigger});
      if (want_params) accumulate(res.grad_params, g.params);
      if (terms.grad_trigger) {
        for (int b = 0; b < bp; ++b) {
          res.grad_trigger += extract_patch(g.images.row(b).data(), res.locations[b], geom);
        }
      }
    }
    if (attn_grad && want_params) {
      const Mat<S> zero = Mat<S>::Zero(bp, cfg.num_classes);
      accumulate(res.grad_params, backward(params, fwd_c, zero, &dattn_c, {.params = true}).params);
    }
  }

  rep.aggregate = S(terms.clean) * rep.clean + S(terms.backdoor) * rep.backdoor +
                  S(terms.visual) * rep.visual + S(terms.attention) * rep.attention;
  return res;
}

template <typename S>
S loss_clean(const ViTParams<S>& params, const ImageBatch<S>& batch) {
  if (batch.images.cols() != params.config.image_dim()) {
    throw DimensionError("clean batch width does not match the model");
  }
  const auto fwd = forward(params, batch.images, {.keep_attention = false});
  return cross_entropy<S>(fwd.logits, batch.labels, nullptr);
}

template <typename S>
S loss_backdoor(const ViTParams<S>& params, const ImageBatch<S>& batch, const Trigger<S>& trigger,
                const LocationPolicy& policy, int target_label, Rng& rng,
                std::vector<PatchIndex>* locations) {
  ObjectiveTerms terms;
  terms.backdoor = 1;
  auto res = evaluate_objective(params, nullptr, &batch, trigger, policy, target_label, terms, {},
                                rng);
  if (locations != nullptr) *locations = std::move(res.locations);
  return res.report.backdoor;
}

template <typename S>
S loss_visual(const ImageBatch<S>& batch, const Trigger<S>& trigger, const LocationPolicy& policy,
              const ImageGeometry& geom, Rng& rng) {
  if (batch.size() == 0) return S(0);
  if (batch.images.cols() != geom.image_dim()) throw DimensionError("batch width mismatch");
  S total = 0;
  for (int b = 0; b < batch.size(); ++b) {
    const Vec<S> x = batch.images.row(b).transpose();
    total += (insert_sup(x, trigger, policy.sample(rng), geom) - x).norm();
  }
  return total / S(batch.size());
}

template <typename S>
S loss_attention(const ViTParams<S>& params, const ImageBatch<S>& batch, const Trigger<S>& trigger,
                 const LocationPolicy& policy, AttentionSpec attention, Rng& rng) {
  ObjectiveTerms terms;
  terms.backdoor = 0;
  terms.attention = 1;
  return evaluate_objective(params, nullptr, &batch, trigger, policy, 0, terms, attention, rng)
      .report.attention;
}

template <typename S>
ObjectiveResult<S> trigger_objective(const ViTParams<S>& params, const ImageBatch<S>& batch,
                                     const Trigger<S>& trigger, const LossWeights& weights,
                                     const LocationPolicy& policy, int target_label,
                                     AttentionSpec attention, Rng& rng) {
  weights.validate();
  ObjectiveTerms terms;
  terms.backdoor = 1;
  terms.visual = weights.alpha1;
  terms.attention = weights.alpha2;
  terms.grad_trigger = true;
  return evaluate_objective(params, nullptr, &batch, trigger, policy, target_label, terms,
                            attention, rng);
}

template <typename S>
ObjectiveResult<S> model_objective(const ViTParams<S>& params, const ImageBatch<S>& clean_batch,
                                   const ImageBatch<S>& poison_batch, const Trigger<S>& trigger,
                                   const LossWeights& weights, const LocationPolicy& policy,
                                   int target_label, AttentionSpec attention, Rng& rng) {
  weights.validate();
  ObjectiveTerms terms;
  terms.clean = 1;
  terms.backdoor = 1;
  terms.attention = weights.alpha2;
  terms.grad_params = true;
  return evaluate_objective(params, &clean_batch, &poison_batch, trigger, policy, target_label,
                            terms, attention, rng);
}

template <typename S>
ObjectiveResult<S> single_level_objective(const ViTParams<S>& params,
                                          const ImageBatch<S>& clean_batch,
                                          const ImageBatch<S>& poison_batch,
                                          const Trigger<S>& trigger, const LossWeights& weights,
                                          const LocationPolicy& policy, int target_label,
                                          AttentionSpec attention, Rng& rng) {
  weights.validate();
  ObjectiveTerms terms;
  terms.clean = 1;
  terms.backdoor = 1;
  terms.visual = weights.alpha1;
  terms.attention = weights.alpha2;
  terms.grad_params = true;
  terms.grad_trigger = true;
  return evaluate_objective(params, &clean_batch, &poison_batch, trigger, policy, target_label,
                            terms, attention, rng);
}

#define PASTA_INSTANTIATE_OBJECTIVES(S)                                                        \
  template ObjectiveResult<S> evaluate_objective<S>(                                          \
      const ViTParams<S>&, std::type_identity_t<const ImageBatch<S>*>, const ImageBatch<S>*,  \
      const Trigger<S>&,                                                                      \
      const LocationPolicy&, int, const ObjectiveTerms&, AttentionSpec, Rng&, Insertion);     \
  template S loss_clean<S>(const ViTParams<S>&, const ImageBatch<S>&);                        \
  template S loss_backdoor<S>(const ViTParams<S>&, const ImageBatch<S>&, const Trigger<S>&,   \
                              const LocationPolicy&, int, Rng&, std::vector<PatchIndex>*);    \
  template S loss_visual<S>(const ImageBatch<S>&, const Trigger<S>&, const LocationPolicy&,   \
                            const ImageGeometry&, Rng&);                                      \
  template S loss_attention<S>(const ViTParams<S>&, const ImageBatch<S>&, const Trigger<S>&,  \
                               const LocationPolicy&, AttentionSpec, Rng&);                   \
  template ObjectiveResult<S> trigger_objective<S>(const ViTParams<S>&, const ImageBatch<S>&, \
                                                   const Trigger<S>&, const LossWeights&,     \
                                                   const LocationPolicy&, int, AttentionSpec, \
                                                   Rng&);                                     \
  template ObjectiveResult<S> model_objective<S>(                                             \
      const ViTParams<S>&, const ImageBatch<S>&, const ImageBatch<S>&, const Trigger<S>&,     \
      const LossWeights&, const LocationPolicy&, int, AttentionSpec, Rng&);                   \
  template ObjectiveResult<S> single_level_objective<S>(                                      \
      const ViTParams<S>&, const ImageBatch<S>&, const ImageBatch<S>&, const Trigger<S>&,     \
      const LossWeights&, const LocationPolicy&, int, AttentionSpec, Rng&);

PASTA_INSTANTIATE_OBJECTIVES(float)
PASTA_INSTANTIATE_OBJECTIVES(double)

}  // namespace pasta
