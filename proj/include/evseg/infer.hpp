#pragma once

// Inference-time fusion: contract motion embeddings with the mask embedding
// map to get per-embedding mask logits, upsample to full resolution, and keep
// the embeddings whose moving-class probability clears the threshold.

#include <vector>

#include "evseg/tensor.hpp"

namespace evseg {

// S_all = me_mov^T . me_mask, contracting the channel axis: (c x n)^T by
// (c x h x w) gives n x h x w.
template <class S>
Tensor<S> fuse_embeddings(const Tensor<S>& me_mov, const Tensor<S>& me_mask) {
  if (me_mov.rank() != 2 || me_mask.rank() != 3 || me_mov.dim(0) != me_mask.dim(0))
    throw ValidationError("fuse_embeddings: channel dims disagree " + shape_str(me_mov.shape()) + " vs " +
                          shape_str(me_mask.shape()));
  const std::size_t c = me_mov.dim(0), n = me_mov.dim(1);
  const std::size_t h = me_mask.dim(1), w = me_mask.dim(2);
  Tensor<S> flat = matmul(transpose(me_mov), reshape(me_mask, {c, h * w}));
  return reshape(flat, {n, h, w});
}

template <class S>
struct SegOutput {
  struct Instance {
    std::size_t embedding = 0;            // index into the n embeddings
    double moving_prob = 0;               // softmax moving-class probability
    std::vector<std::uint8_t> mask;       // H*W binary, sigmoid(logit) > 0.5
  };
  Tensor<S> s_all;                        // n x h x w logits
  Tensor<S> s_full;                       // n x H x W upsampled logits
  std::vector<Instance> instances;        // the m selected embeddings
};

// Upsample-then-binarize; keep embeddings with moving probability > theta.
// Instances may overlap.
template <class S>
SegOutput<S> select_instances(const Tensor<S>& s_all, const Tensor<S>& ms_mov, double theta, std::size_t H,
                              std::size_t W) {
  if (theta < 0.0 || theta > 1.0) throw ValidationError("select_instances: theta must lie in [0,1]");
  if (ms_mov.rank() != 2 || ms_mov.dim(0) != 2) throw ValidationError("select_instances: ms_mov must be 2xn");
  if (s_all.rank() != 3 || s_all.dim(0) != ms_mov.dim(1))
    throw ValidationError("select_instances: embedding counts disagree");
  const std::size_t n = s_all.dim(0);
  SegOutput<S> out;
  out.s_all = s_all.detach();
  out.s_full = upsample_bilinear(out.s_all, H, W);
  Tensor<S> probs = softmax(ms_mov.detach(), 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double p = static_cast<double>(probs.data()[1 * n + i]);  // class 1 = moving
    if (!(p > theta)) continue;
    typename SegOutput<S>::Instance inst;
    inst.embedding = i;
    inst.moving_prob = p;
    inst.mask.resize(H * W);
    const S* plane = out.s_full.data() + i * H * W;
    for (std::size_t q = 0; q < H * W; ++q) inst.mask[q] = plane[q] > S(0) ? 1 : 0;
    out.instances.push_back(std::move(inst));
  }
  return out;
}

}  // namespace evseg
