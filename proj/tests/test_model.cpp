#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "evseg/losses.hpp"
#include "evseg/model.hpp"

using namespace evseg;
using Td = Tensor<double>;

namespace {

template <class S>
FrameInput<S> random_frame(Rng& rng, std::size_t H, std::size_t W, std::size_t bins) {
  FrameInput<S> in;
  in.image = Tensor<S>::rand_uniform(rng, {1, H, W}, 0, 1);
  in.event_in = Tensor<S>::rand_uniform(rng, {bins, H, W}, -2, 2);
  in.em = Tensor<S>::rand_uniform(rng, {1, H, W}, 0, 1);
  return in;
}

}  // namespace

TEST_CASE("stride-4 shape contract: 48x48 input, c=16, n=8") {
  ModelConfig cfg;
  Model<double> model(cfg, 1);
  model.params.bind_values();
  Rng rng(2);
  auto in = random_frame<double>(rng, 48, 48, cfg.voxel_bins);
  auto out = model.forward_full({in}, /*with_flow=*/true);
  CHECK(out.frames[0].f_t.shape() == Shape{16, 12, 12});
  CHECK(out.frames[0].f_m.shape() == Shape{16, 12, 12});
  CHECK(out.me_mask.shape() == Shape{16, 12, 12});
  CHECK(out.me_mov.shape() == Shape{16, 8});
  CHECK(out.ms_mov.shape() == Shape{2, 8});
  CHECK(out.flow.shape() == Shape{2, 48, 48});
}

TEST_CASE("zero image encodes to zero features while biases are zero") {
  ModelConfig cfg;
  Model<double> model(cfg, 3);
  model.params.bind_values();
  FrameInput<double> in;
  in.image = Td::zeros({1, 32, 32});
  in.event_in = Td::zeros({cfg.voxel_bins, 32, 32});
  in.em = Td::zeros({1, 32, 32});
  auto f = model.encode(in);
  for (std::size_t i = 0; i < f.f_i.size(); ++i) CHECK(f.f_i.data()[i] == 0.0);
}

TEST_CASE("residual start: zero value/output projections give f_T == f_I and f_M == f_E") {
  ModelConfig cfg;
  Model<double> model(cfg, 4);
  model.zero_attention_value_output();
  model.params.bind_values();
  Rng rng(5);
  auto in = random_frame<double>(rng, 32, 32, cfg.voxel_bins);
  auto f = model.encode(in);
  auto [f_t, f_m] = model.cross_modal_augment(f.f_i, f.f_e, f.f_em);
  for (std::size_t i = 0; i < f_t.size(); ++i) {
    CHECK(f_t.data()[i] == f.f_i.data()[i]);
    CHECK(f_m.data()[i] == f.f_e.data()[i]);
  }
}

TEST_CASE("a fresh model starts as the pure residual (output projections are zero-initialized)") {
  ModelConfig cfg;
  Model<double> model(cfg, 6);
  model.params.bind_values();
  Rng rng(7);
  auto in = random_frame<double>(rng, 32, 32, cfg.voxel_bins);
  auto f = model.encode(in);
  auto [f_t, f_m] = model.cross_modal_augment(f.f_i, f.f_e, f.f_em);
  for (std::size_t i = 0; i < f_t.size(); ++i) {
    CHECK(f_t.data()[i] == f.f_i.data()[i]);
    CHECK(f_m.data()[i] == f.f_e.data()[i]);
  }
}

TEST_CASE("zero event feature (or zero event mask) makes the texture branch pure residual") {
  ModelConfig cfg;
  Model<double> model(cfg, 8);
  Rng prng(11);
  model.params.randomize(prng, -0.3, 0.3);  // non-zero wv/wo so the result is non-trivial
  model.params.bind_values();

  Rng rng(9);
  auto in = random_frame<double>(rng, 32, 32, cfg.voxel_bins);

  in.event_in = Td::zeros({cfg.voxel_bins, 32, 32});
  auto f = model.encode(in);
  // encoder biases were randomized, so force the event feature itself to zero
  Td zero_e = Td::zeros(f.f_e.shape());
  auto [f_t, f_m] = model.cross_modal_augment(f.f_i, zero_e, f.f_em);
  for (std::size_t i = 0; i < f_t.size(); ++i) CHECK(f_t.data()[i] == doctest::Approx(f.f_i.data()[i]));

  // f_EM = 0 annihilates the events the same way
  Td zero_em = Td::zeros(f.f_em.shape());
  auto f_e2 = Td::rand_uniform(rng, f.f_e.shape(), -1, 1);
  auto [f_t2, f_m2] = model.cross_modal_augment(f.f_i, f_e2, zero_em);
  for (std::size_t i = 0; i < f_t2.size(); ++i) CHECK(f_t2.data()[i] == doctest::Approx(f.f_i.data()[i]));
}

TEST_CASE("attention rows live on the probability simplex; tau -> inf flattens them") {
  ModelConfig cfg;
  Model<double> model(cfg, 10);
  Rng prng(13);
  model.params.randomize(prng, -0.5, 0.5);
  model.params.bind_values();
  Rng rng(14);
  Td f_i = Td::rand_uniform(rng, {16, 6, 6}, -1, 1);
  Td g = Td::rand_uniform(rng, {16, 6, 6}, -1, 1);

  Td attn = model.texture_attention_map(f_i, g);
  REQUIRE(attn.shape() == Shape{16, 16});
  for (std::size_t r = 0; r < 16; ++r) {
    double row = 0;
    for (std::size_t c = 0; c < 16; ++c) {
      const double v = attn.data()[r * 16 + c];
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      row += v;
    }
    CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
  }

  model.set_attention_temperature(1e6);
  model.params.bind_values();
  Td flat = model.texture_attention_map(f_i, g);
  for (std::size_t r = 0; r < 16; ++r) {
    double lo = 1, hi = 0;
    for (std::size_t c = 0; c < 16; ++c) {
      lo = std::min(lo, flat.data()[r * 16 + c]);
      hi = std::max(hi, flat.data()[r * 16 + c]);
    }
    CHECK(hi - lo < 1e-3);
  }
}

TEST_CASE("gradcheck through the encoder") {
  ModelConfig cfg;
  cfg.channels = 8;
  Model<double> model(cfg, 15);
  Rng prng(16);
  model.params.randomize(prng, -0.4, 0.4);
  model.params.bind_values();
  Rng rng(17);
  Td img = Td::rand_uniform(rng, {1, 8, 8}, 0, 1);
  Td voxel = Td::rand_uniform(rng, {cfg.voxel_bins, 8, 8}, -1, 1);
  Td em = Td::rand_uniform(rng, {1, 8, 8}, 0, 1);
  double err = grad_check<double>(
      [&](Tape<double>& t, const Td& x) {
        FrameInput<double> in;
        in.image = x;
        in.event_in = voxel;
        in.em = em;
        auto h = model.encode(in);
        return sum(mul(h.f_i, h.f_i));
      },
      img, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck through the attention block wrt all inputs and tau") {
  Rng rng(19);
  const std::size_t c = 16;
  Td f_i = Td::rand_uniform(rng, {c, 4, 4}, -1, 1);
  Td f_e = Td::rand_uniform(rng, {c, 4, 4}, -1, 1);
  Td f_em = Td::rand_uniform(rng, {c, 4, 4}, 0, 1);
  Td wq = Td::rand_uniform(rng, {c, c}, -0.3, 0.3);
  Td wk = Td::rand_uniform(rng, {c, c}, -0.3, 0.3);
  Td wv = Td::rand_uniform(rng, {c, c}, -0.3, 0.3);
  Td wo = Td::rand_uniform(rng, {c, c}, -0.3, 0.3);
  Td log_tau = Td::scalar(0.2);
  // linear readout with non-cancelling weights keeps every gradient component
  // well above the finite-difference noise floor
  Td readout = Td::rand_uniform(rng, {c, 4, 4}, 0.5, 1.5);
  double err = grad_check_multi<double>(
      [&readout](Tape<double>& t, const std::vector<Td>& xs) {
        Td g = mul(xs[1], xs[2]);
        Td f_t = transposed_attention(xs[0], g, xs[0], xs[3], xs[4], xs[5], xs[6], xs[7]);
        return mean(mul(f_t, readout));
      },
      {f_i, f_e, f_em, wq, wk, wv, wo, log_tau}, 1e-5);
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck through the motion decoder") {
  Rng rng(23);
  const std::size_t c = 8, n = 4;
  Td f_m = Td::rand_uniform(rng, {c, 3, 3}, -1, 1);
  Td queries = Td::rand_uniform(rng, {n, c}, -0.5, 0.5);
  Td wq = Td::rand_uniform(rng, {c, c}, -0.4, 0.4);
  Td wk = Td::rand_uniform(rng, {c, c}, -0.4, 0.4);
  Td wv = Td::rand_uniform(rng, {c, c}, -0.4, 0.4);
  Td emb_w = Td::rand_uniform(rng, {c, c}, -0.4, 0.4);
  Td emb_b = Td::rand_uniform(rng, {c, 1}, -0.1, 0.1);
  Td score_w = Td::rand_uniform(rng, {c, 2}, -0.4, 0.4);
  Td score_b = Td::rand_uniform(rng, {2, 1}, -0.1, 0.1);
  double err = grad_check_multi<double>(
      [](Tape<double>& t, const std::vector<Td>& xs) {
        auto [me, ms] = query_motion_decode(xs[0], xs[1], xs[2], xs[3], xs[4], xs[5], xs[6], xs[7], xs[8]);
        return add(sum(mul(me, me)), sum(mul(ms, ms)));
      },
      {f_m, queries, wq, wk, wv, emb_w, emb_b, score_w, score_b}, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("flow head isolation: outputs are bit-identical with the flow head off") {
  ModelConfig cfg;
  Model<double> model(cfg, 27);
  Rng prng(28);
  model.params.randomize(prng, -0.3, 0.3);
  model.params.bind_values();
  Rng rng(29);
  auto in = random_frame<double>(rng, 32, 32, cfg.voxel_bins);
  auto with = model.forward_full({in}, true);
  auto without = model.forward_full({in}, false);
  CHECK_FALSE(without.has_flow);
  CHECK(with.has_flow);
  for (std::size_t i = 0; i < with.me_mask.size(); ++i)
    CHECK(with.me_mask.data()[i] == without.me_mask.data()[i]);
  for (std::size_t i = 0; i < with.me_mov.size(); ++i)
    CHECK(with.me_mov.data()[i] == without.me_mov.data()[i]);
  for (std::size_t i = 0; i < with.ms_mov.size(); ++i)
    CHECK(with.ms_mov.data()[i] == without.ms_mov.data()[i]);
}

TEST_CASE("forward is deterministic and train mode retains per-frame features") {
  ModelConfig cfg;
  Model<double> model(cfg, 31);
  model.params.bind_values();
  Rng rng(32);
  auto f0 = random_frame<double>(rng, 32, 32, cfg.voxel_bins);
  auto f1 = random_frame<double>(rng, 32, 32, cfg.voxel_bins);
  auto a = model.forward_full({f0, f1}, false);
  auto b = model.forward_full({f0, f1}, false);
  CHECK(a.frames.size() == 2);
  for (std::size_t i = 0; i < a.ms_mov.size(); ++i) CHECK(a.ms_mov.data()[i] == b.ms_mov.data()[i]);
  for (std::size_t i = 0; i < a.frames[1].f_m.size(); ++i)
    CHECK(a.frames[1].f_m.data()[i] == b.frames[1].f_m.data()[i]);
}

TEST_CASE("ablation input modes produce the contracted shapes") {
  Rng rng(33);
  {
    ModelConfig cfg;
    cfg.input_mode = InputMode::kEventsOnly;
    Model<double> model(cfg, 34);
    model.params.bind_values();
    FrameInput<double> in;
    in.event_in = Td::rand_uniform(rng, {cfg.voxel_bins, 48, 48}, -1, 1);
    in.em = Td::rand_uniform(rng, {1, 48, 48}, 0, 1);
    auto out = model.forward_full({in}, false);
    CHECK(out.ms_mov.shape() == Shape{2, 8});
  }
  {
    ModelConfig cfg;
    cfg.input_mode = InputMode::kImagePair;
    Model<double> model(cfg, 35);
    model.params.bind_values();
    FrameInput<double> in;
    in.image = Td::rand_uniform(rng, {1, 48, 48}, 0, 1);
    in.event_in = Td::rand_uniform(rng, {1, 48, 48}, 0, 1);  // the second frame
    in.em = Td::ones({1, 48, 48});
    auto out = model.forward_full({in}, false);
    CHECK(out.me_mask.shape() == Shape{16, 12, 12});
  }
}

TEST_CASE("no dead branch: every trainable parameter gets gradient on a random batch") {
  ModelConfig cfg;
  cfg.channels = 8;
  Model<double> model(cfg, 37);
  Rng prng(38);
  model.params.randomize(prng, -0.3, 0.3);

  Tape<double> tape;
  model.params.bind(tape);
  Rng rng(39);
  auto f0 = random_frame<double>(rng, 16, 16, cfg.voxel_bins);
  auto f1 = random_frame<double>(rng, 16, 16, cfg.voxel_bins);
  auto out = model.forward_full({f0, f1}, true);

  // a loss that exercises every head: masks, motion, flow, contrastive
  Td loss = add(sum(mul(out.me_mask, out.me_mask)),
                add(sum(mul(out.me_mov, out.me_mov)), sum(mul(out.ms_mov, out.ms_mov))));
  loss = add(loss, sum(mul(out.flow, out.flow)));
  FeatureGrid<double> ft = {{out.frames[0].f_t, out.frames[1].f_t}};
  FeatureGrid<double> fm = {{out.frames[0].f_m, out.frames[1].f_m}};
  loss = add(loss, contrastive_loss(ft, fm, Td::scalar(1.0)));
  tape.backward(loss);

  for (auto* p : model.params.params()) {
    if (!p->trainable) continue;
    auto g = tape.grad(p->bound);
    double mag = 0;
    for (double v : g) mag += std::abs(v);
    INFO("parameter ", p->name);
    CHECK(mag > 0.0);
  }
}

TEST_CASE("checkpoint round trip preserves parameters, config, and outputs") {
  ModelConfig cfg;
  cfg.channels = 8;
  cfg.queries = 4;
  Model<float> model(cfg, 41);
  Rng prng(42);
  model.params.randomize(prng, -0.3, 0.3);
  model.params.bind_values();

  const auto dir = std::filesystem::temp_directory_path() / "evseg_ckpt_test";
  std::filesystem::create_directories(dir);
  const std::string path = (dir / "model.ckpt").string();
  save_checkpoint(path, model);
  Model<float> back = load_checkpoint<float>(path);
  CHECK(back.config.channels == 8);
  CHECK(back.config.queries == 4);

  Rng rng(43);
  auto in = random_frame<float>(rng, 16, 16, cfg.voxel_bins);
  back.params.bind_values();
  auto a = model.forward_full({in}, false);
  auto b = back.forward_full({in}, false);
  for (std::size_t i = 0; i < a.ms_mov.size(); ++i) CHECK(a.ms_mov.data()[i] == b.ms_mov.data()[i]);
}
