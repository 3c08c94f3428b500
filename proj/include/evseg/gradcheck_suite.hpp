#pragma once

// Central-difference verification of every differentiable op and every loss,
// always in double. The CLI prints one line per entry and fails when any
// entry exceeds its threshold. Readouts are linear with non-cancelling
// weights so no gradient component sits below the finite-difference noise.

#include <functional>
#include <string>
#include <vector>

#include "evseg/losses.hpp"
#include "evseg/model.hpp"
#include "evseg/train.hpp"

namespace evseg {

struct OpReport {
  std::string name;
  std::string shapes;
  double max_rel_err = 0;
  double threshold = 0;
  bool passed() const { return max_rel_err <= threshold; }
};

namespace detail {

using Td = Tensor<double>;
using Fn = std::function<Td(Tape<double>&, const std::vector<Td>&)>;

inline OpReport check_entry(const std::string& name, const std::string& shapes, const Fn& f,
                            const std::vector<Td>& inputs, double threshold, double h = 1e-6) {
  OpReport r;
  r.name = name;
  r.shapes = shapes;
  r.threshold = threshold;
  r.max_rel_err = grad_check_multi<double>(f, inputs, h);
  return r;
}

}  // namespace detail

inline std::vector<OpReport> run_gradcheck_suite() {
  using detail::Td;
  std::vector<OpReport> reports;
  Rng rng(20240601);
  auto rt = [&rng](Shape s, double lo = -1, double hi = 1) {
    return Td::rand_uniform(rng, std::move(s), lo, hi);
  };
  auto readout = [&rng](const Td& x) {
    // captured at call time; fixed positive weights
    return x;
  };
  (void)readout;

  const double kOp = 1e-5;
  const double kLoss = 1e-4;

  // elementwise and broadcast ops
  Td a = rt({3, 4}), b = rt({3, 4}), col = rt({3, 1});
  Td pos = rt({3, 4}, 0.3, 1.7);
  Td w34 = rt({3, 4}, 0.5, 1.5);  // readout weights
  auto wsum = [w34](const Td& x) { return mean(mul(x, w34)); };
  reports.push_back(detail::check_entry(
      "add(broadcast)", "(3x4)+(3x1)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(add(xs[0], xs[1])); }, {a, col}, kOp));
  reports.push_back(detail::check_entry(
      "sub", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(sub(xs[0], xs[1])); }, {a, b}, kOp));
  reports.push_back(detail::check_entry(
      "mul", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(mul(xs[0], xs[1])); }, {a, b}, kOp));
  reports.push_back(detail::check_entry(
      "div", "(3x4)/(3x1)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(div(xs[0], add_scalar(mul(xs[1], xs[1]), 0.5))); },
      {a, col}, kOp));
  reports.push_back(detail::check_entry(
      "scale+add_scalar", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(add_scalar(scale(xs[0], 1.7), -0.3)); }, {a},
      kOp));
  reports.push_back(detail::check_entry(
      "exp", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(exp(xs[0])); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "log", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(log(xs[0])); }, {pos}, kOp));
  reports.push_back(detail::check_entry(
      "power(0.4)", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(power(xs[0], 0.4)); },
      {pos}, kOp));
  reports.push_back(detail::check_entry(
      "abs", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(absval(xs[0])); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "relu", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(relu(add_scalar(xs[0], 0.37))); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "sigmoid", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(sigmoid(xs[0])); }, {a},
      kOp));
  reports.push_back(detail::check_entry(
      "clamp", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(clamp(xs[0], -0.45, 0.45)); }, {a}, kOp));

  // reductions and shape ops
  reports.push_back(detail::check_entry(
      "sum", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return sum(xs[0]); }, {a}, kOp));
  Td w4 = rt({4}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "sum(axis0)", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return mean(mul(sum(xs[0], 0), w4)); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "mean(axis1)", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return sum(mean(xs[0], 1)); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "max", "(3x4)", [&](Tape<double>&, const std::vector<Td>& xs) { return max(xs[0]); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "max(axis1)", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return sum(max(xs[0], 1)); }, {a}, kOp));
  reports.push_back(detail::check_entry(
      "reshape+transpose+select", "(3x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) {
        return sum(select(transpose(reshape(xs[0], {4, 3})), 0, 1));
      },
      {a}, kOp));

  // linear algebra and NN ops
  Td ma = rt({3, 5}), mb = rt({5, 2});
  Td w32 = rt({3, 2}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "matmul", "(3x5)*(5x2)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return mean(mul(matmul(xs[0], xs[1]), w32)); }, {ma, mb},
      kOp));
  reports.push_back(detail::check_entry(
      "softmax", "(3x4) axis1",
      [&](Tape<double>&, const std::vector<Td>& xs) { return wsum(softmax(xs[0], 1)); }, {scale(a, 3.0)}, kOp));

  Td cx = rt({2, 6, 5}), cw = rt({3, 2, 3, 3});
  Td wc1 = rt({3, 6, 5}, 0.5, 1.5), wc2 = rt({3, 3, 3}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "conv2d(stride1)", "x(2x6x5) w(3x2x3x3)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return mean(mul(conv2d(xs[0], xs[1], 1), wc1)); },
      {cx, cw}, kOp));
  reports.push_back(detail::check_entry(
      "conv2d(stride2)", "x(2x6x5) w(3x2x3x3)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return mean(mul(conv2d(xs[0], xs[1], 2), wc2)); },
      {cx, cw}, kOp));

  Td img = rt({2, 5, 5}), coords = rt({2, 4, 4}, 0.3, 3.6);
  Td wbs = rt({2, 4, 4}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "bilinear_sample", "img(2x5x5) coords(2x4x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return mean(mul(bilinear_sample(xs[0], xs[1]), wbs)); },
      {img, coords}, kOp));
  Td up_in = rt({2, 3, 3});
  Td wup = rt({2, 7, 8}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "upsample_bilinear", "(2x3x3)->(2x7x8)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return mean(mul(upsample_bilinear(xs[0], 7, 8), wup)); },
      {up_in}, kOp));

  // attention block (texture/motion augmentation) wrt inputs and temperature;
  // a positive evaluation point keeps gradient components from cancelling
  // into the finite-difference noise floor
  const std::size_t c = 8;
  Td f_i = rt({c, 4, 4}, 0.2, 1.0), f_e = rt({c, 4, 4}, 0.2, 1.0), f_em = rt({c, 4, 4}, 0.2, 1.0);
  Td wq = rt({c, c}, 0.05, 0.4), wk = rt({c, c}, 0.05, 0.4);
  Td wv = rt({c, c}, 0.05, 0.4), wo = rt({c, c}, 0.05, 0.4);
  Td ltau = Td::scalar(0.1);
  Td wattn = rt({c, 4, 4}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "cross_modal_attention", "(8x4x4) + tau",
      [&](Tape<double>&, const std::vector<Td>& xs) {
        Td g = mul(xs[1], xs[2]);
        return mean(mul(transposed_attention(xs[0], g, xs[0], xs[3], xs[4], xs[5], xs[6], xs[7]), wattn));
      },
      {f_i, f_e, f_em, wq, wk, wv, wo, ltau}, kOp, 1e-5));

  // query decoder
  const std::size_t n = 3;
  Td fm = rt({c, 3, 3});
  Td qs = rt({n, c}, -0.8, 0.8);
  Td qwq = rt({c, c}, -0.35, 0.35), qwk = rt({c, c}, -0.35, 0.35), qwv = rt({c, c}, -0.35, 0.35);
  Td embw = rt({c, c}, -0.35, 0.35), embb = rt({c, 1}, -0.1, 0.1);
  Td scw = rt({c, 2}, -0.35, 0.35), scb = rt({2, 1}, -0.1, 0.1);
  Td wme = rt({c, n}, 0.5, 1.5), wms = rt({2, n}, 0.5, 1.5);
  reports.push_back(detail::check_entry(
      "query_motion_decode", "f_m(8x3x3) n=3",
      [&](Tape<double>&, const std::vector<Td>& xs) {
        auto [me, ms] = query_motion_decode(xs[0], xs[1], xs[2], xs[3], xs[4], xs[5], xs[6], xs[7], xs[8]);
        return add(mean(mul(me, wme)), mean(mul(ms, wms)));
      },
      {fm, qs, qwq, qwk, qwv, embw, embb, scw, scb}, kOp, 1e-5));

  // contrastive chain (similarity, frame consistency, batch terms, loss)
  Td ca = rt({5}), cb = rt({5}), cc = rt({5}), cd = rt({5});
  Td alpha = Td::scalar(1.2);
  reports.push_back(detail::check_entry(
      "similarity", "(5)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return similarity(xs[0], xs[1], xs[2]); }, {ca, cb, alpha},
      kLoss, 1e-5));
  reports.push_back(detail::check_entry(
      "contrastive_loss", "B=2 K=2 feat(5)",
      [&](Tape<double>&, const std::vector<Td>& xs) {
        FeatureGrid<double> ft = {{xs[0], xs[1]}, {xs[2], xs[3]}};
        FeatureGrid<double> fm2 = {{xs[3], xs[0]}, {xs[1], xs[2]}};
        return contrastive_loss(ft, fm2, xs[4]);
      },
      {ca, cb, cc, cd, alpha}, kLoss, 1e-5));

  // mask losses
  Td prob_logits = rt({4, 4}, -2, 2);
  std::vector<double> gbits(16);
  for (auto& v : gbits) v = rng.uniform() < 0.5 ? 0.0 : 1.0;
  Td gt = Td::from_vector({4, 4}, gbits);
  reports.push_back(detail::check_entry(
      "focal_loss", "(4x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return focal_loss(sigmoid(xs[0]), gt); }, {prob_logits},
      kLoss, 1e-5));
  reports.push_back(detail::check_entry(
      "dice_loss", "(4x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return dice_loss(sigmoid(xs[0]), gt); }, {prob_logits},
      kLoss, 1e-5));
  reports.push_back(detail::check_entry(
      "binary_ce", "(2)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return binary_ce_from_logits(xs[0], 1); }, {rt({2})},
      kLoss, 1e-5));

  // matched segmentation/motion loss with a frozen assignment
  {
    const std::size_t nq = 3, h = 3, w = 3;
    Td ms = rt({2, nq});
    Td sa = rt({nq, h, w});
    Td g0 = Td::from_vector({h, w}, {1, 1, 0, 1, 0, 0, 0, 0, 0});
    Td g1 = Td::from_vector({h, w}, {0, 0, 0, 0, 0, 1, 0, 1, 1});
    std::vector<int> moving = {1, 0};
    Assignment rho = hungarian_match(match_cost(ms, sa, {g0, g1}, moving), 2, nq);
    reports.push_back(detail::check_entry(
        "mos_loss", "2 GT x 3 embeddings",
        [&, rho](Tape<double>&, const std::vector<Td>& xs) {
          return mos_loss(xs[0], xs[1], {g0, g1}, moving, rho);
        },
        {ms, sa}, kLoss, 1e-5));
  }

  // flow losses
  Td fpred = rt({2, 4, 4}, -1.2, 1.2);
  Td fgt = rt({2, 4, 4}, -1.2, 1.2);
  Td valid = Td::ones({4, 4});
  reports.push_back(detail::check_entry(
      "flow_supervised", "(2x4x4)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return flow_supervised(xs[0], fgt, valid); }, {fpred},
      kLoss, 1e-5));
  Td i0 = rt({1, 5, 5}, 0.1, 0.9), i1 = rt({1, 5, 5}, 0.1, 0.9);
  Td flowp = rt({2, 5, 5}, 0.15, 0.85);
  reports.push_back(detail::check_entry(
      "flow_photometric", "(1x5x5)",
      [&](Tape<double>&, const std::vector<Td>& xs) { return flow_photometric(i0, i1, xs[0]); }, {flowp}, kLoss,
      1e-5));

  // total loss composition
  reports.push_back(detail::check_entry(
      "total_loss", "scalars",
      [&](Tape<double>&, const std::vector<Td>& xs) { return total_loss(xs[0], xs[1], xs[2]); },
      {Td::scalar(0.7), Td::scalar(0.2), Td::scalar(0.4)}, kLoss, 1e-6));

  return reports;
}

// Full-model gradient check: builds a tiny two-frame batch, computes the
// complete training objective with a frozen assignment, and compares a seeded
// random subset of each parameter's elements against central differences.
inline OpReport run_full_model_gradcheck(std::size_t probes_per_param = 3) {
  using detail::Td;
  OpReport report;
  report.name = "full_model_loss";
  report.threshold = 1e-4;

  ModelConfig mc;
  mc.channels = 8;
  mc.queries = 3;
  mc.voxel_bins = 4;
  Model<double> model(mc, 99);
  Rng prng(17);
  model.params.randomize(prng, -0.3, 0.3);

  const std::size_t H = 16, W = 16;
  Rng rng(2025);
  auto frame = [&] {
    FrameInput<double> in;
    in.image = Td::rand_uniform(rng, {1, H, W}, 0, 1);
    in.event_in = Td::rand_uniform(rng, {mc.voxel_bins, H, W}, -2, 2);
    in.em = Td::rand_uniform(rng, {1, H, W}, 0, 1);
    return in;
  };
  std::vector<std::vector<FrameInput<double>>> batch = {{frame(), frame()}, {frame(), frame()}};
  Td g0 = Td::from_vector({4, 4}, {1, 1, 0, 0, 1, 1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0});
  Td g1 = Td::from_vector({4, 4}, {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 0, 0, 1, 1});
  std::vector<int> moving = {1, 0};
  Td gtflow = Td::rand_uniform(rng, {2, H, W}, -1, 1);
  Td valid = Td::ones({H, W});
  Td log_alpha = Td::scalar(0.1);
  report.shapes = "c=8 n=3 B=2 K=2 16x16";

  // freeze the assignments at the base parameter values
  std::vector<Assignment> rhos;
  {
    model.params.bind_values();
    for (auto& frames : batch) {
      auto out = model.forward_full(frames, false);
      Td s_all = fuse_embeddings(out.me_mov, out.me_mask);
      rhos.push_back(hungarian_match(match_cost(out.ms_mov, s_all, {g0, g1}, moving), 2, mc.queries));
    }
  }

  auto loss_fn = [&](Tape<double>* tape) {
    if (tape) {
      model.params.bind(*tape);
    } else {
      model.params.bind_values();
    }
    Td la = tape ? tape->watch(log_alpha) : log_alpha;
    FeatureGrid<double> ft, fm;
    Td l_mos = Td::scalar(0.0), l_f = Td::scalar(0.0);
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      auto out = model.forward_full(batch[bi], true);
      Td s_all = fuse_embeddings(out.me_mov, out.me_mask);
      l_mos = add(l_mos, mos_loss(out.ms_mov, s_all, {g0, g1}, moving, rhos[bi]));
      l_f = add(l_f, add(flow_supervised(out.flow, gtflow, valid),
                         flow_photometric(batch[bi][0].image, batch[bi][1].image, out.flow)));
      ft.emplace_back();
      fm.emplace_back();
      for (auto& fr : out.frames) {
        ft.back().push_back(fr.f_t);
        fm.back().push_back(fr.f_m);
      }
    }
    Td l_cl = contrastive_loss(ft, fm, exp(la));
    return total_loss(scale(l_mos, 0.5), l_cl, scale(l_f, 0.5));
  };

  Tape<double> tape;
  Td loss = loss_fn(&tape);
  tape.backward(loss);
  // snapshot analytic gradients before probing rebinds the parameters
  std::vector<std::vector<double>> analytic;
  for (auto* p : model.params.params()) analytic.push_back(p->trainable ? tape.grad(p->bound) : std::vector<double>{});

  // probe the largest-gradient elements of each parameter; tiny components
  // sit below the finite-difference noise floor and say nothing
  const double h = 1e-5;
  auto params = model.params.params();
  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    auto* p = params[pi];
    if (!p->trainable) continue;
    const auto& grad = analytic[pi];
    std::vector<std::size_t> order(grad.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::partial_sort(order.begin(), order.begin() + std::min(probes_per_param, order.size()), order.end(),
                      [&](std::size_t x, std::size_t y) { return std::abs(grad[x]) > std::abs(grad[y]); });
    for (std::size_t probe = 0; probe < std::min(probes_per_param, order.size()); ++probe) {
      const std::size_t i = order[probe];
      const double orig = p->value.data()[i];
      p->value.data()[i] = orig + h;
      const double fp = loss_fn(nullptr).value();
      p->value.data()[i] = orig - h;
      const double fm2 = loss_fn(nullptr).value();
      p->value.data()[i] = orig;
      const double numeric = (fp - fm2) / (2 * h);
      const double denom = std::max(1e-12, std::abs(grad[i]) + std::abs(numeric));
      report.max_rel_err = std::max(report.max_rel_err, std::abs(grad[i] - numeric) / denom);
    }
  }
  return report;
}

}  // namespace evseg
