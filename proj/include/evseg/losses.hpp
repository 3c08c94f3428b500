#pragma once

// Training objectives: temperature-scaled cosine similarities and the
// multi-frame cross-batch contrastive loss, Hungarian-matched segmentation
// and motion-classification loss with weighted focal+dice mask terms, and
// supervised / photometric flow losses. Everything is built from tensor-op
// primitives so gradients come off the tape.

#include <iostream>
#include <vector>

#include "evseg/hungarian.hpp"
#include "evseg/tensor.hpp"

namespace evseg {

struct LossWeights {
  double lambda_contrastive = 1.0;  // weight on the contrastive term
  double lambda_flow = 2.0;         // weight on the flow term
  double focal_weight = 20.0;       // inside the mask loss
  double dice_weight = 1.0;
  double focal_gamma = 2.0;
  double focal_alpha = 0.25;
  double prob_clamp = 1e-6;  // probability clamp before logs
};

struct FlowLossParams {
  double eps = 0.01;  // robust penalty (|x| + eps)^q
  double q = 0.4;
};

// [batch][frame] feature tensors of identical shape.
template <class S>
using FeatureGrid = std::vector<std::vector<Tensor<S>>>;

// ---------------------------------------------------------------------------
// Contrastive feature terms.

template <class S>
Tensor<S> cosine(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.size() != b.size()) throw ValidationError("cosine: size mismatch");
  Tensor<S> af = reshape(a, {a.size()});
  Tensor<S> bf = reshape(b, {b.size()});
  Tensor<S> dot = sum(mul(af, bf));
  // the 1e-24 keeps the sqrt differentiable at zero; the 1e-8 is the
  // denominator guard (all-zero inputs give cosine 0)
  Tensor<S> na = power(add_scalar(sum(mul(af, af)), S(1e-24)), S(0.5));
  Tensor<S> nb = power(add_scalar(sum(mul(bf, bf)), S(1e-24)), S(0.5));
  return div(dot, add_scalar(mul(na, nb), S(1e-8)));
}

// s(a,b) = exp(cos(a,b) / alpha), alpha a positive scalar tensor.
template <class S>
Tensor<S> similarity(const Tensor<S>& a, const Tensor<S>& b, const Tensor<S>& alpha) {
  bool a_zero = true, b_zero = true;
  for (std::size_t i = 0; i < a.size() && a_zero; ++i) a_zero = a.data()[i] == S(0);
  for (std::size_t i = 0; i < b.size() && b_zero; ++i) b_zero = b.data()[i] == S(0);
#ifndef NDEBUG
  if (a_zero && b_zero) std::cerr << "similarity: both inputs are all-zero; cosine defined as 0\n";
#endif
  return exp(div(cosine(a, b), alpha));
}

// Sum of s over ordered frame pairs k1 != k2 for one batch item and one
// modality; both (k1,k2) and (k2,k1) are counted.
template <class S>
Tensor<S> frame_consistency(const std::vector<Tensor<S>>& frames, const Tensor<S>& alpha) {
  if (frames.size() < 2) throw ValidationError("frame_consistency: needs at least two frames");
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (std::size_t k1 = 0; k1 < frames.size(); ++k1)
    for (std::size_t k2 = 0; k2 < frames.size(); ++k2) {
      if (k1 == k2) continue;
      acc = add(acc, similarity(frames[k1], frames[k2], alpha));
    }
  return acc;
}

template <class S>
struct BatchSimilarities {
  Tensor<S> ss_t, ss_m, cs;
};

namespace detail {

// Value-ordered reduction: per-item sums then do not depend on how the batch
// happens to be ordered, so permuting the batch permutes the results exactly.
template <class S>
Tensor<S> sum_terms(std::vector<Tensor<S>> terms) {
  std::stable_sort(terms.begin(), terms.end(),
                   [](const Tensor<S>& a, const Tensor<S>& b) { return a.value() < b.value(); });
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (const auto& t : terms) acc = add(acc, t);
  return acc;
}

}  // namespace detail

// Per-item self-similarities (same modality, same frame, other batch items)
// and cross-similarity (texture vs motion over all frame pairs). The cross
// term sums over every batch item including the own one unless
// cs_excludes_own_batch is set.
template <class S>
std::vector<BatchSimilarities<S>> batch_similarities(const FeatureGrid<S>& f_t, const FeatureGrid<S>& f_m,
                                                     const Tensor<S>& alpha, bool cs_excludes_own_batch = false) {
  const std::size_t B = f_t.size();
  if (B == 0 || f_m.size() != B) throw ValidationError("batch_similarities: empty or mismatched batch");
  const std::size_t K = f_t[0].size();
  std::vector<BatchSimilarities<S>> out;
  out.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    std::vector<Tensor<S>> ss_t, ss_m, cs;
    for (std::size_t k = 0; k < K; ++k)
      for (std::size_t b2 = 0; b2 < B; ++b2) {
        if (b2 == b) continue;
        ss_t.push_back(similarity(f_t[b][k], f_t[b2][k], alpha));
        ss_m.push_back(similarity(f_m[b][k], f_m[b2][k], alpha));
      }
    for (std::size_t k1 = 0; k1 < K; ++k1)
      for (std::size_t k2 = 0; k2 < K; ++k2)
        for (std::size_t b2 = 0; b2 < B; ++b2) {
          if (cs_excludes_own_batch && b2 == b) continue;
          cs.push_back(similarity(f_t[b][k1], f_m[b2][k2], alpha));
        }
    out.push_back(BatchSimilarities<S>{detail::sum_terms(std::move(ss_t)), detail::sum_terms(std::move(ss_m)),
                                       detail::sum_terms(std::move(cs))});
  }
  return out;
}

// L = -(1/B) sum_b log[(FC_T + FC_M) / (SS_T + SS_M + CS)]
template <class S>
Tensor<S> contrastive_loss_from_terms(const std::vector<Tensor<S>>& fc_per_item,
                                      const std::vector<BatchSimilarities<S>>& sims) {
  const std::size_t B = fc_per_item.size();
  if (B == 0 || sims.size() != B) throw ValidationError("contrastive_loss: term count mismatch");
  std::vector<Tensor<S>> ratios;
  for (std::size_t b = 0; b < B; ++b) {
    Tensor<S> den = add(add(sims[b].ss_t, sims[b].ss_m), sims[b].cs);
    ratios.push_back(log(div(fc_per_item[b], den)));
  }
  return scale(detail::sum_terms(std::move(ratios)), S(-1) / static_cast<S>(B));
}

template <class S>
Tensor<S> contrastive_loss(const FeatureGrid<S>& f_t, const FeatureGrid<S>& f_m, const Tensor<S>& alpha,
                           bool cs_excludes_own_batch = false) {
  const std::size_t B = f_t.size();
  std::vector<Tensor<S>> fc;
  fc.reserve(B);
  for (std::size_t b = 0; b < B; ++b)
    fc.push_back(add(frame_consistency(f_t[b], alpha), frame_consistency(f_m[b], alpha)));
  return contrastive_loss_from_terms(fc, batch_similarities(f_t, f_m, alpha, cs_excludes_own_batch));
}

// ---------------------------------------------------------------------------
// Mask terms. `prob` must lie in [0,1] (sigmoid applied upstream), gt binary.

namespace detail {

template <class S>
void check_mask_domain(const Tensor<S>& prob, const Tensor<S>& gt, const char* op) {
  if (prob.shape() != gt.shape()) throw ValidationError(std::string(op) + ": shape mismatch");
  for (std::size_t i = 0; i < prob.size(); ++i)
    if (prob.data()[i] < S(0) || prob.data()[i] > S(1))
      throw ValidationError(std::string(op) + ": probabilities must lie in [0,1]");
  for (std::size_t i = 0; i < gt.size(); ++i)
    if (gt.data()[i] != S(0) && gt.data()[i] != S(1))
      throw ValidationError(std::string(op) + ": ground truth must be binary");
}

}  // namespace detail

template <class S>
Tensor<S> focal_loss(const Tensor<S>& prob, const Tensor<S>& gt, const LossWeights& w = {}) {
  detail::check_mask_domain(prob, gt, "focal_loss");
  const S a = static_cast<S>(w.focal_alpha);
  const S clampv = static_cast<S>(w.prob_clamp);
  Tensor<S> one_minus_gt = add_scalar(neg(gt), S(1));
  // p_t = p*g + (1-p)*(1-g), alpha_t = a*g + (1-a)*(1-g)
  Tensor<S> pt = add(mul(prob, gt), mul(add_scalar(neg(prob), S(1)), one_minus_gt));
  pt = clamp(pt, clampv, S(1) - clampv);
  Tensor<S> at = add(scale(gt, a), scale(one_minus_gt, S(1) - a));
  Tensor<S> term = neg(mul(mul(at, power(add_scalar(neg(pt), S(1)), static_cast<S>(w.focal_gamma))), log(pt)));
  return mean(term);
}

// 1 - (2*sum(p*g) + 1) / (sum(p) + sum(g) + 1)
template <class S>
Tensor<S> dice_loss(const Tensor<S>& prob, const Tensor<S>& gt) {
  detail::check_mask_domain(prob, gt, "dice_loss");
  Tensor<S> num = add_scalar(scale(sum(mul(prob, gt)), S(2)), S(1));
  Tensor<S> den = add_scalar(add(sum(prob), sum(gt)), S(1));
  return add_scalar(neg(div(num, den)), S(1));
}

// Two-class cross entropy on a logits column of shape {2}; class 1 = moving.
template <class S>
Tensor<S> binary_ce_from_logits(const Tensor<S>& logits2, int target_class, const LossWeights& w = {}) {
  if (logits2.size() != 2) throw ValidationError("binary_ce_from_logits: expected 2 logits");
  if (target_class != 0 && target_class != 1) throw ValidationError("binary_ce_from_logits: bad class");
  const S clampv = static_cast<S>(w.prob_clamp);
  Tensor<S> probs = softmax(reshape(logits2, {2}), 0);
  Tensor<S> p = select(probs, 0, static_cast<std::size_t>(target_class));
  return neg(log(clamp(p, clampv, S(1) - clampv)));
}

// ---------------------------------------------------------------------------
// Hungarian matching cost and the matched segmentation/motion loss.

// cost(i,j) = CE(ms(:,j), c_i) + 1[c_i=1] * (focal_w*focal + dice_w*dice)
// evaluated on detached values; rows are GT objects, columns embeddings.
template <class S>
std::vector<double> match_cost(const Tensor<S>& ms_mov, const Tensor<S>& s_all_logits,
                               const std::vector<Tensor<S>>& gt_masks, const std::vector<int>& gt_moving,
                               const LossWeights& w = {}) {
  if (ms_mov.rank() != 2 || ms_mov.dim(0) != 2) throw ValidationError("match_cost: ms_mov must be 2xn");
  if (s_all_logits.rank() != 3) throw ValidationError("match_cost: s_all must be nxhxw");
  const std::size_t n = ms_mov.dim(1);
  if (s_all_logits.dim(0) != n) throw ValidationError("match_cost: embedding count mismatch");
  const std::size_t m = gt_masks.size();
  if (gt_moving.size() != m) throw ValidationError("match_cost: flags/masks mismatch");
  Tensor<S> ms = ms_mov.detach();
  Tensor<S> sa = s_all_logits.detach();
  std::vector<double> cost(m * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    Tensor<S> col = select(ms, 1, j);
    Tensor<S> prob = sigmoid(select(sa, 0, j));
    for (std::size_t i = 0; i < m; ++i) {
      double c = static_cast<double>(binary_ce_from_logits(col, gt_moving[i], w).value());
      if (gt_moving[i] == 1) {
        c += w.focal_weight * static_cast<double>(focal_loss(prob, gt_masks[i], w).value());
        c += w.dice_weight * static_cast<double>(dice_loss(prob, gt_masks[i]).value());
      }
      cost[i * n + j] = c;
    }
  }
  return cost;
}

// Matched terms per GT object plus a static-class CE push on every unmatched
// embedding. The assignment is treated as a constant of the current step.
template <class S>
Tensor<S> mos_loss(const Tensor<S>& ms_mov, const Tensor<S>& s_all_logits,
                   const std::vector<Tensor<S>>& gt_masks, const std::vector<int>& gt_moving,
                   const Assignment& rho, const LossWeights& w = {}) {
  const std::size_t n = ms_mov.dim(1);
  const std::size_t m = gt_masks.size();
  if (rho.row_to_col.size() != m) throw ValidationError("mos_loss: assignment size mismatch");
  std::vector<char> matched(n, 0);
  for (std::size_t col : rho.row_to_col) {
    if (col >= n) throw ValidationError("mos_loss: assignment column out of range");
    if (matched[col]) throw ValidationError("mos_loss: assignment is not injective");
    matched[col] = 1;
  }
  Tensor<S> acc = Tensor<S>::scalar(S(0));
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = rho.row_to_col[i];
    acc = add(acc, binary_ce_from_logits(select(ms_mov, 1, j), gt_moving[i], w));
    if (gt_moving[i] == 1) {
      Tensor<S> prob = sigmoid(select(s_all_logits, 0, j));
      Tensor<S> lmask = add(scale(focal_loss(prob, gt_masks[i], w), static_cast<S>(w.focal_weight)),
                            scale(dice_loss(prob, gt_masks[i]), static_cast<S>(w.dice_weight)));
      acc = add(acc, lmask);
    }
  }
  for (std::size_t j = 0; j < n; ++j)
    if (!matched[j]) acc = add(acc, binary_ce_from_logits(select(ms_mov, 1, j), 0, w));
  return acc;
}

// ---------------------------------------------------------------------------
// Flow losses.

// Mean Euclidean norm of pred-gt over pixels where valid == 1.
template <class S>
Tensor<S> flow_supervised(const Tensor<S>& pred, const Tensor<S>& gt, const Tensor<S>& valid) {
  if (pred.shape() != gt.shape() || pred.rank() != 3 || pred.dim(0) != 2)
    throw ValidationError("flow_supervised: expected matching 2xHxW fields");
  if (valid.size() != pred.dim(1) * pred.dim(2)) throw ValidationError("flow_supervised: bad valid mask");
  double count = 0;
  for (std::size_t i = 0; i < valid.size(); ++i) count += static_cast<double>(valid.data()[i]);
  if (count == 0) {
    std::cerr << "flow_supervised: empty valid set, loss is 0\n";
    return Tensor<S>::scalar(S(0));
  }
  Tensor<S> diff = sub(pred, gt);
  Tensor<S> du = select(diff, 0, 0);
  Tensor<S> dv = select(diff, 0, 1);
  Tensor<S> mag = power(add_scalar(add(mul(du, du), mul(dv, dv)), S(1e-24)), S(0.5));
  Tensor<S> vm = reshape(valid.detach(), {pred.dim(1), pred.dim(2)});
  return scale(sum(mul(mag, vm)), S(1) / static_cast<S>(count));
}

// Mean robust photometric penalty of warping img_next by the predicted flow:
// mean_x (|I_t(x) - I_next(x + F(x))| + eps)^q.
template <class S>
Tensor<S> flow_photometric(const Tensor<S>& img_t, const Tensor<S>& img_next, const Tensor<S>& flow_pred,
                           const FlowLossParams& p = {}) {
  if (img_t.shape() != img_next.shape() || img_t.rank() != 3)
    throw ValidationError("flow_photometric: expected matching CxHxW images");
  if (flow_pred.rank() != 3 || flow_pred.dim(0) != 2 || flow_pred.dim(1) != img_t.dim(1) ||
      flow_pred.dim(2) != img_t.dim(2))
    throw ValidationError("flow_photometric: flow must be 2xHxW matching the images");
  const std::size_t H = img_t.dim(1), W = img_t.dim(2);
  std::vector<S> base(2 * H * W);
  for (std::size_t y = 0; y < H; ++y)
    for (std::size_t x = 0; x < W; ++x) {
      base[y * W + x] = static_cast<S>(x);
      base[H * W + y * W + x] = static_cast<S>(y);
    }
  Tensor<S> coords = add(Tensor<S>::from_vector({2, H, W}, std::move(base)), flow_pred);
  Tensor<S> warped = bilinear_sample(img_next, coords);
  Tensor<S> resid = sub(img_t, warped);
  return mean(power(add_scalar(absval(resid), static_cast<S>(p.eps)), static_cast<S>(p.q)));
}

// L = L_mos + lambda1 * L_cl + lambda2 * L_f
template <class S>
Tensor<S> total_loss(const Tensor<S>& l_mos, const Tensor<S>& l_cl, const Tensor<S>& l_f,
                     const LossWeights& w = {}) {
  return add(l_mos, add(scale(l_cl, static_cast<S>(w.lambda_contrastive)),
                        scale(l_f, static_cast<S>(w.lambda_flow))));
}

}  // namespace evseg
