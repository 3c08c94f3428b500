#pragma once

// Evaluation suite: mask IoU with the empty-empty = 1 convention, Hungarian
// instance mIoU, foreground mIoU, COCO-protocol mAP (10 IoU thresholds,
// 101-point interpolation, single "moving" category), flow end-point error
// and sub-pixel ratio, and foreground F-measure.

#include <cstdint>
#include <string>
#include <vector>

#include "evseg/image_io.hpp"

namespace evseg {

using Mask = std::vector<std::uint8_t>;

struct ScoredMask {
  Mask mask;
  double score = 0;
};

// |a & b| / |a | b|; 1 when both empty, 0 when exactly one is empty.
double iou(const Mask& a, const Mask& b);

// Hungarian matching maximizing total IoU; unmatched GT objects score 0;
// returns the mean over GT objects (1 when there are none).
double miou_instances(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

// Foreground IoU of the unions.
double miou_foreground(const std::vector<Mask>& preds, const std::vector<Mask>& gts);

// Dataset mAP: per sample greedy score-ordered matching at each threshold
// 0.50:0.05:0.95, pooled PR, 101-point interpolated AP, averaged over
// thresholds. With no GT anywhere: 1 if there are no predictions, else 0.
double map_coco(const std::vector<std::vector<ScoredMask>>& preds_per_sample,
                const std::vector<std::vector<Mask>>& gts_per_sample);
double average_precision_at(const std::vector<std::vector<ScoredMask>>& preds_per_sample,
                            const std::vector<std::vector<Mask>>& gts_per_sample, double iou_threshold);

// Mean end-point error / fraction of valid pixels with error < 1 px.
// valid may be empty (all pixels count) or hold one 0/1 per pixel.
double epe(const FlowField& pred, const FlowField& gt, const Mask& valid = {});
double ratio_1px(const FlowField& pred, const FlowField& gt, const Mask& valid = {});

// 2PR/(P+R) over binary foregrounds; 0 when P+R is 0.
double f_measure(const Mask& pred_fg, const Mask& gt_fg);

struct SampleEval {
  std::string id;
  double miou_ins = 0;
  double miou_01 = 0;
  double f_measure = 0;
  bool has_moving_gt = false;
  bool has_flow = false;
  double epe = 0;
  double ratio_1px = 0;
};

struct EvalReport {
  double map = 0;
  double miou_ins = 0;   // mean over samples with at least one moving GT
  double miou_01 = 0;    // mean over all samples
  double f_measure = 0;  // from TP/FP/FN pooled over the dataset
  bool has_flow = false;
  double epe = 0;
  double ratio_1px = 0;
  std::vector<SampleEval> samples;
};

struct SampleData {
  std::string id;
  std::vector<ScoredMask> preds;
  std::vector<Mask> gt_moving;
  bool has_flow = false;
  FlowField flow_pred, flow_gt;
};

EvalReport evaluate_dataset(const std::vector<SampleData>& samples);

}  // namespace evseg
