#include "evseg/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "evseg/common.hpp"
#include "evseg/hungarian.hpp"

namespace evseg {

double iou(const Mask& a, const Mask& b) {
  if (a.size() != b.size()) throw ValidationError("iou: mask sizes differ");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const bool av = a[i] != 0, bv = b[i] != 0;
    inter += av && bv;
    uni += av || bv;
  }
  if (uni == 0) return 1.0;
  return static_cast<double>(inter) / static_cast<double>(uni);
}

double miou_instances(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  if (gts.empty()) return 1.0;
  if (preds.empty()) return 0.0;
  const std::size_t m = gts.size(), n = preds.size();
  // maximize total IoU == minimize total (1 - IoU); pad when preds < gts
  const std::size_t cols = std::max(m, n);
  std::vector<double> cost(m * cols, 1.0);  // unmatched column costs 1 (IoU 0)
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) cost[i * cols + j] = 1.0 - iou(gts[i], preds[j]);
  Assignment a = hungarian_match(cost, m, cols);
  double total = 0;
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = a.row_to_col[i];
    if (j < n) total += iou(gts[i], preds[j]);
  }
  return total / static_cast<double>(m);
}

namespace {

Mask union_of(const std::vector<Mask>& masks) {
  Mask u;
  for (const auto& m : masks) {
    if (u.empty()) u.assign(m.size(), 0);
    if (m.size() != u.size()) throw ValidationError("mask union: sizes differ");
    for (std::size_t i = 0; i < m.size(); ++i) u[i] |= (m[i] != 0);
  }
  return u;
}

}  // namespace

double miou_foreground(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  Mask pu = union_of(preds), gu = union_of(gts);
  if (pu.empty() && gu.empty()) return 1.0;
  if (pu.empty()) pu.assign(gu.size(), 0);
  if (gu.empty()) gu.assign(pu.size(), 0);
  return iou(pu, gu);
}

double average_precision_at(const std::vector<std::vector<ScoredMask>>& preds_per_sample,
                            const std::vector<std::vector<Mask>>& gts_per_sample, double iou_threshold) {
  if (preds_per_sample.size() != gts_per_sample.size())
    throw ValidationError("average_precision: sample counts differ");
  std::size_t total_gt = 0;
  for (const auto& g : gts_per_sample) total_gt += g.size();

  struct Det {
    double score;
    bool tp;
  };
  std::vector<Det> dets;
  for (std::size_t s = 0; s < preds_per_sample.size(); ++s) {
    const auto& gts = gts_per_sample[s];
    // score-ordered greedy matching within the sample
    std::vector<std::size_t> order(preds_per_sample[s].size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return preds_per_sample[s][a].score > preds_per_sample[s][b].score;
    });
    std::vector<char> taken(gts.size(), 0);
    for (std::size_t oi : order) {
      const auto& det = preds_per_sample[s][oi];
      double best = 0;
      std::ptrdiff_t best_gt = -1;
      for (std::size_t g = 0; g < gts.size(); ++g) {
        if (taken[g]) continue;
        const double v = iou(det.mask, gts[g]);
        if (v >= iou_threshold && v > best) {
          best = v;
          best_gt = static_cast<std::ptrdiff_t>(g);
        }
      }
      if (best_gt >= 0) taken[static_cast<std::size_t>(best_gt)] = 1;
      dets.push_back({det.score, best_gt >= 0});
    }
  }
  if (total_gt == 0) return dets.empty() ? 1.0 : 0.0;
  std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.score > b.score; });

  // precision envelope over the 101 recall points
  std::vector<double> precision(dets.size()), recall(dets.size());
  std::size_t tp = 0;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    tp += dets[i].tp;
    precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
    recall[i] = static_cast<double>(tp) / static_cast<double>(total_gt);
  }
  for (std::size_t i = dets.size(); i-- > 1;) precision[i - 1] = std::max(precision[i - 1], precision[i]);
  double ap = 0;
  for (int r = 0; r <= 100; ++r) {
    const double target = r / 100.0;
    // first detection index reaching this recall
    double p = 0;
    for (std::size_t i = 0; i < dets.size(); ++i)
      if (recall[i] >= target - 1e-12) {
        p = precision[i];
        break;
      }
    ap += p;
  }
  return ap / 101.0;
}

double map_coco(const std::vector<std::vector<ScoredMask>>& preds_per_sample,
                const std::vector<std::vector<Mask>>& gts_per_sample) {
  double acc = 0;
  int count = 0;
  for (int t = 0; t < 10; ++t) {
    acc += average_precision_at(preds_per_sample, gts_per_sample, 0.5 + 0.05 * t);
    ++count;
  }
  return acc / count;
}

namespace {

double flow_err(const FlowField& pred, const FlowField& gt, const Mask& valid, bool count_below_1px) {
  if (pred.width != gt.width || pred.height != gt.height) throw ValidationError("flow metrics: sizes differ");
  const std::size_t n = pred.width * pred.height;
  if (!valid.empty() && valid.size() != n) throw ValidationError("flow metrics: bad valid mask");
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!valid.empty() && valid[i] == 0) continue;
    const double du = static_cast<double>(pred.uv[2 * i]) - gt.uv[2 * i];
    const double dv = static_cast<double>(pred.uv[2 * i + 1]) - gt.uv[2 * i + 1];
    const double e = std::hypot(du, dv);
    acc += count_below_1px ? (e < 1.0 ? 1.0 : 0.0) : e;
    ++count;
  }
  if (count == 0) throw ValidationError("flow metrics: empty valid set");
  return acc / static_cast<double>(count);
}

}  // namespace

double epe(const FlowField& pred, const FlowField& gt, const Mask& valid) {
  return flow_err(pred, gt, valid, false);
}

double ratio_1px(const FlowField& pred, const FlowField& gt, const Mask& valid) {
  return flow_err(pred, gt, valid, true);
}

double f_measure(const Mask& pred_fg, const Mask& gt_fg) {
  if (pred_fg.size() != gt_fg.size()) throw ValidationError("f_measure: sizes differ");
  std::size_t tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < pred_fg.size(); ++i) {
    const bool p = pred_fg[i] != 0, g = gt_fg[i] != 0;
    tp += p && g;
    fp += p && !g;
    fn += !p && g;
  }
  if (tp == 0) return 0.0;
  const double prec = static_cast<double>(tp) / static_cast<double>(tp + fp);
  const double rec = static_cast<double>(tp) / static_cast<double>(tp + fn);
  return 2 * prec * rec / (prec + rec);
}

EvalReport evaluate_dataset(const std::vector<SampleData>& samples) {
  EvalReport report;
  std::vector<std::vector<ScoredMask>> preds;
  std::vector<std::vector<Mask>> gts;
  double miou_ins_acc = 0, miou01_acc = 0, epe_acc = 0, r1_acc = 0;
  std::size_t moving_samples = 0, flow_samples = 0;
  std::size_t tp = 0, fp = 0, fn = 0;
  for (const auto& s : samples) {
    SampleEval ev;
    ev.id = s.id;
    std::vector<Mask> pred_masks;
    for (const auto& p : s.preds) pred_masks.push_back(p.mask);
    ev.miou_ins = miou_instances(pred_masks, s.gt_moving);
    ev.miou_01 = miou_foreground(pred_masks, s.gt_moving);
    ev.has_moving_gt = !s.gt_moving.empty();
    Mask pu = union_of(pred_masks), gu = union_of(s.gt_moving);
    if (pu.empty() && !gu.empty()) pu.assign(gu.size(), 0);
    if (gu.empty() && !pu.empty()) gu.assign(pu.size(), 0);
    ev.f_measure = (pu.empty() && gu.empty()) ? 1.0 : f_measure(pu, gu);
    for (std::size_t i = 0; i < pu.size(); ++i) {
      tp += pu[i] && gu[i];
      fp += pu[i] && !gu[i];
      fn += !pu[i] && gu[i];
    }
    if (s.has_flow) {
      ev.has_flow = true;
      ev.epe = epe(s.flow_pred, s.flow_gt);
      ev.ratio_1px = ratio_1px(s.flow_pred, s.flow_gt);
      epe_acc += ev.epe;
      r1_acc += ev.ratio_1px;
      ++flow_samples;
    }
    if (ev.has_moving_gt) {
      miou_ins_acc += ev.miou_ins;
      ++moving_samples;
    }
    miou01_acc += ev.miou_01;
    report.samples.push_back(std::move(ev));
    preds.push_back(s.preds);
    gts.push_back(s.gt_moving);
  }
  report.map = map_coco(preds, gts);
  report.miou_ins = moving_samples ? miou_ins_acc / static_cast<double>(moving_samples) : 1.0;
  report.miou_01 = samples.empty() ? 1.0 : miou01_acc / static_cast<double>(samples.size());
  if (tp == 0) {
    report.f_measure = (fp == 0 && fn == 0) ? 1.0 : 0.0;
  } else {
    const double prec = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double rec = static_cast<double>(tp) / static_cast<double>(tp + fn);
    report.f_measure = 2 * prec * rec / (prec + rec);
  }
  if (flow_samples) {
    report.has_flow = true;
    report.epe = epe_acc / static_cast<double>(flow_samples);
    report.ratio_1px = r1_acc / static_cast<double>(flow_samples);
  }
  return report;
}

}  // namespace evseg
