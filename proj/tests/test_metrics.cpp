#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <numeric>

#include "evseg/common.hpp"
#include "evseg/metrics.hpp"

using namespace evseg;

namespace {

Mask from_bits(std::initializer_list<int> bits) {
  Mask m;
  for (int b : bits) m.push_back(static_cast<std::uint8_t>(b));
  return m;
}

// exhaustive max-total-IoU matching: every GT picks a distinct prediction or
// stays unmatched (contributing zero)
double brute_miou_rec(const std::vector<Mask>& preds, const std::vector<Mask>& gts, std::size_t gi,
                      std::vector<char>& used) {
  if (gi == gts.size()) return 0.0;
  double best = brute_miou_rec(preds, gts, gi + 1, used);  // leave gi unmatched
  for (std::size_t j = 0; j < preds.size(); ++j) {
    if (used[j]) continue;
    used[j] = 1;
    best = std::max(best, iou(gts[gi], preds[j]) + brute_miou_rec(preds, gts, gi + 1, used));
    used[j] = 0;
  }
  return best;
}

double brute_miou(const std::vector<Mask>& preds, const std::vector<Mask>& gts) {
  if (gts.empty()) return 1.0;
  if (preds.empty()) return 0.0;
  std::vector<char> used(preds.size(), 0);
  return brute_miou_rec(preds, gts, 0, used) / static_cast<double>(gts.size());
}

}  // namespace

TEST_CASE("iou fixtures") {
  Mask a = from_bits({1, 1, 0, 0});
  CHECK(iou(a, a) == 1.0);
  CHECK(iou(a, from_bits({0, 0, 1, 1})) == 0.0);
  // half-overlapping equal-size masks: |a&b|=1, |a|b|=3
  CHECK(iou(a, from_bits({0, 1, 1, 0})) == doctest::Approx(1.0 / 3.0));
  CHECK(iou(from_bits({0, 0}), from_bits({0, 0})) == 1.0);
  CHECK(iou(from_bits({0, 1}), from_bits({0, 0})) == 0.0);
  CHECK_THROWS_AS(iou(a, from_bits({1})), ValidationError);
}

TEST_CASE("instance mIoU fixtures") {
  Mask g1 = from_bits({1, 1, 0, 0, 0, 0});
  Mask g2 = from_bits({0, 0, 0, 1, 1, 0});
  CHECK(miou_instances({g1, g2}, {g1, g2}) == 1.0);
  CHECK(miou_instances({}, {g1, g2}) == 0.0);
  CHECK(miou_instances({g1}, {g1, g2}) == doctest::Approx(0.5));  // (1 + 0) / 2
  CHECK(miou_instances({g1}, {}) == 1.0);
}

TEST_CASE("instance mIoU equals exhaustive matching on random sets") {
  Rng rng(401);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t npred = static_cast<std::size_t>(rng.integer(0, 5));
    const std::size_t ngt = static_cast<std::size_t>(rng.integer(1, 5));
    auto rand_mask = [&] {
      Mask m(16);
      for (auto& v : m) v = rng.uniform() < 0.4 ? 1 : 0;
      return m;
    };
    std::vector<Mask> preds, gts;
    for (std::size_t i = 0; i < npred; ++i) preds.push_back(rand_mask());
    for (std::size_t i = 0; i < ngt; ++i) gts.push_back(rand_mask());
    CHECK(miou_instances(preds, gts) == doctest::Approx(brute_miou(preds, gts)).epsilon(1e-9));
  }
}

TEST_CASE("foreground mIoU fixtures") {
  Mask g1 = from_bits({1, 1, 0, 0});
  Mask g2 = from_bits({0, 0, 1, 0});
  CHECK(miou_foreground({g1, g2}, {g1, g2}) == 1.0);
  // prediction covers everything, GT covers half
  CHECK(miou_foreground({from_bits({1, 1, 1, 1})}, {from_bits({1, 1, 0, 0})}) == doctest::Approx(0.5));
  CHECK(miou_foreground({}, {}) == 1.0);
}

TEST_CASE("mAP fixtures") {
  Mask gt = from_bits({1, 1, 1, 0, 0, 0});
  // one perfect prediction
  CHECK(map_coco({{{gt, 0.9}}}, {{gt}}) == doctest::Approx(1.0));
  // no predictions, nonzero GT
  CHECK(map_coco({{}}, {{gt}}) == doctest::Approx(0.0));
  // higher-scored disjoint FP plus lower-scored perfect TP: AP@0.5 = 0.5
  ScoredMask fp{from_bits({0, 0, 0, 1, 1, 1}), 0.9};
  ScoredMask tp{gt, 0.4};
  CHECK(average_precision_at({{fp, tp}}, {{gt}}, 0.5) == doctest::Approx(0.5).epsilon(1e-6));
  CHECK(map_coco({{fp, tp}}, {{gt}}) == doctest::Approx(0.5).epsilon(1e-6));
}

TEST_CASE("mAP: tail FP at recall 1 keeps the interpolated AP") {
  Mask gt = from_bits({1, 1, 1, 0, 0, 0});
  ScoredMask tp{gt, 0.9};
  ScoredMask tail_fp{from_bits({0, 0, 0, 0, 1, 1}), 0.05};
  const double base = average_precision_at({{tp}}, {{gt}}, 0.5);
  const double with_tail = average_precision_at({{tp, tail_fp}}, {{gt}}, 0.5);
  CHECK(base == doctest::Approx(1.0));
  CHECK(with_tail == doctest::Approx(base));  // envelope keeps precision at the TP
}

TEST_CASE("mAP matches a hand PR computation on a two-sample set") {
  // sample 0: 2 GT, one matched by a high-score pred; sample 1: 1 GT, missed
  Mask a = from_bits({1, 1, 0, 0});
  Mask b = from_bits({0, 0, 1, 1});
  std::vector<std::vector<Mask>> gts = {{a, b}, {a}};
  std::vector<std::vector<ScoredMask>> preds = {{{a, 0.8}}, {{b, 0.6}}};
  // dets sorted: (0.8, TP), (0.6, FP since sample-1 GT is `a`), total_gt = 3
  // PR points: (r=1/3, p=1), (r=1/3, p=1/2); envelope: p=1 for r <= 1/3
  // AP = (34 points at p=1) / 101
  const double expect = 34.0 / 101.0;
  CHECK(average_precision_at(preds, gts, 0.5) == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("metrics are invariant to instance relabeling") {
  Rng rng(402);
  std::vector<Mask> gts, preds;
  for (int i = 0; i < 3; ++i) {
    Mask m(25, 0), p(25, 0);
    for (std::size_t q = 0; q < 25; ++q) {
      m[q] = rng.uniform() < 0.3;
      p[q] = rng.uniform() < 0.3;
    }
    gts.push_back(m);
    preds.push_back(p);
  }
  const double base = miou_instances(preds, gts);
  std::vector<Mask> preds_shuffled = {preds[2], preds[0], preds[1]};
  std::vector<Mask> gts_shuffled = {gts[1], gts[2], gts[0]};
  CHECK(miou_instances(preds_shuffled, gts_shuffled) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("flow metrics fixtures") {
  FlowField f;
  f.width = 4;
  f.height = 3;
  f.uv.assign(24, 0.5f);
  CHECK(epe(f, f) == 0.0);
  CHECK(ratio_1px(f, f) == 1.0);

  FlowField off = f;
  for (std::size_t i = 0; i < 12; ++i) off.uv[2 * i] += 1.0f;  // offset (1,0)
  CHECK(epe(off, f) == doctest::Approx(1.0));
  CHECK(ratio_1px(off, f) == 0.0);  // strict <

  FlowField half = f;
  for (std::size_t i = 0; i < 12; ++i) half.uv[2 * i] += 0.5f;
  CHECK(ratio_1px(half, f) == 1.0);

  // EPE is invariant when the same offset shifts both fields
  FlowField p2 = off, g2 = f;
  for (std::size_t i = 0; i < 24; ++i) {
    p2.uv[i] += 3.0f;
    g2.uv[i] += 3.0f;
  }
  CHECK(epe(p2, g2) == doctest::Approx(epe(off, f)));

  Mask valid(12, 0);
  CHECK_THROWS_AS(epe(off, f, valid), ValidationError);
}

TEST_CASE("f-measure fixtures") {
  Mask g = from_bits({1, 1, 0, 0});
  CHECK(f_measure(g, g) == 1.0);
  CHECK(f_measure(from_bits({0, 0, 0, 0}), g) == 0.0);
  // TP=1, FP=1, FN=1 -> P=R=0.5 -> F=0.5
  CHECK(f_measure(from_bits({1, 0, 1, 0}), from_bits({1, 1, 0, 0})) == doctest::Approx(0.5));
}

TEST_CASE("dataset evaluation aggregates per spec") {
  Mask g1 = from_bits({1, 1, 0, 0});
  SampleData s0;
  s0.id = "scene_0";
  s0.preds = {{g1, 0.9}};
  s0.gt_moving = {g1};
  SampleData s1;
  s1.id = "scene_1";
  s1.preds = {};
  s1.gt_moving = {};  // correctly predicting "nothing moves" scores 1
  EvalReport r = evaluate_dataset({s0, s1});
  CHECK(r.map == doctest::Approx(1.0));
  CHECK(r.miou_ins == doctest::Approx(1.0));  // only scene_0 counts
  CHECK(r.miou_01 == doctest::Approx(1.0));   // (1 + 1) / 2
  CHECK(r.f_measure == doctest::Approx(1.0));
  CHECK(r.samples.size() == 2);
  CHECK_FALSE(r.has_flow);
}
