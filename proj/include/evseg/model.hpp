#pragma once

// The toy segmentation network. Three stride-4 conv encoders (image, events,
// event mask), a dual-branch channel-transposed cross-attention block that
// augments texture and motion features, a query-based motion decoder
// emitting per-embedding motion logits, a small conv head for the mask
// embeddings, and an optional flow head used only during training.

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "evseg/tensor.hpp"
#include "evseg/tensor_io.hpp"

namespace evseg {

template <class S>
struct Parameter {
  std::string name;
  Tensor<S> value;  // master copy, never on a tape
  bool trainable = true;
  Tensor<S> bound;  // per-step view produced by bind()
};

template <class S>
class ParamSet {
 public:
  Parameter<S>* add(std::string name, Tensor<S> init, bool trainable = true) {
    if (!names_.insert(name).second) throw ValidationError("duplicate parameter name: " + name);
    auto p = std::make_unique<Parameter<S>>();
    p->name = std::move(name);
    p->value = std::move(init);
    p->trainable = trainable;
    p->bound = p->value;
    params_.push_back(std::move(p));
    return params_.back().get();
  }

  // Watches every trainable parameter on the tape; call once per step.
  void bind(Tape<S>& tape) {
    for (auto& p : params_) p->bound = p->trainable ? tape.watch(p->value) : p->value;
  }

  // Off-tape forward (inference).
  void bind_values() {
    for (auto& p : params_) p->bound = p->value;
  }

  // Overwrites every trainable parameter with uniform noise (test use).
  void randomize(Rng& rng, S lo, S hi) {
    for (auto& p : params_) {
      if (!p->trainable) continue;
      for (std::size_t i = 0; i < p->value.size(); ++i)
        p->value.data()[i] = static_cast<S>(rng.uniform(lo, hi));
    }
  }

  std::vector<Parameter<S>*> params() {
    std::vector<Parameter<S>*> out;
    out.reserve(params_.size());
    for (auto& p : params_) out.push_back(p.get());
    return out;
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> params_;
  std::set<std::string> names_;
};

enum class InputMode { kFused, kEventsOnly, kImagePair };

inline std::string to_string(InputMode m) {
  switch (m) {
    case InputMode::kFused: return "fused";
    case InputMode::kEventsOnly: return "events_only";
    case InputMode::kImagePair: return "image_pair";
  }
  return "fused";
}

inline InputMode input_mode_from_string(const std::string& s) {
  if (s == "fused") return InputMode::kFused;
  if (s == "events_only") return InputMode::kEventsOnly;
  if (s == "image_pair") return InputMode::kImagePair;
  throw ValidationError("unknown input mode '" + s + "'");
}

struct ModelConfig {
  std::size_t channels = 16;   // feature width c
  std::size_t queries = 8;     // embedding count n
  std::size_t voxel_bins = 10; // temporal bins B
  InputMode input_mode = InputMode::kFused;
  bool cross_attention = true; // augmentation block on/off
  bool flow_head = true;       // flow decoder present
  double voxel_scale = 0.25;   // input conditioning for the event branch

  // Event-branch input channels: voxel bins normally, one gray channel when
  // the second image replaces the events.
  std::size_t event_in_channels() const {
    return input_mode == InputMode::kImagePair ? 1 : voxel_bins;
  }
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"channels", c.channels},   {"queries", c.queries},
          {"voxel_bins", c.voxel_bins}, {"input_mode", to_string(c.input_mode)},
          {"cross_attention", c.cross_attention}, {"flow_head", c.flow_head},
          {"voxel_scale", c.voxel_scale}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.channels = j.value("channels", c.channels);
  c.queries = j.value("queries", c.queries);
  c.voxel_bins = j.value("voxel_bins", c.voxel_bins);
  c.input_mode = input_mode_from_string(j.value("input_mode", "fused"));
  c.cross_attention = j.value("cross_attention", c.cross_attention);
  c.flow_head = j.value("flow_head", c.flow_head);
  c.voxel_scale = j.value("voxel_scale", c.voxel_scale);
  return c;
}

// Per-frame model inputs, already wired for the configured input mode:
// event_in is the voxel grid (fused/events-only) or the second image
// (image-pair); em is the event-mask map, or all-ones for image-pair.
template <class S>
struct FrameInput {
  Tensor<S> image;     // 1xHxW (unused in events-only mode)
  Tensor<S> event_in;  // BxHxW or 1xHxW
  Tensor<S> em;        // 1xHxW
};

// Channel-transposed attention over flattened c x (h*w) features: the
// attention map is softmax((Wq q)(Wk kv)^T / tau) of size c x c, applied to
// Wv kv, projected by Wo and added to the residual.
template <class S>
Tensor<S> transposed_attention(const Tensor<S>& q_src, const Tensor<S>& kv_src, const Tensor<S>& residual,
                               const Tensor<S>& wq, const Tensor<S>& wk, const Tensor<S>& wv,
                               const Tensor<S>& wo, const Tensor<S>& log_tau) {
  const std::size_t c = q_src.dim(0), h = q_src.dim(1), w = q_src.dim(2);
  Tensor<S> xq = reshape(q_src, {c, h * w});
  Tensor<S> xkv = reshape(kv_src, {c, h * w});
  Tensor<S> q = matmul(wq, xq);
  Tensor<S> k = matmul(wk, xkv);
  Tensor<S> v = matmul(wv, xkv);
  Tensor<S> attn = softmax(div(matmul(q, transpose(k)), exp(log_tau)), 1);
  Tensor<S> out = matmul(wo, matmul(attn, v));
  return add(reshape(out, {c, h, w}), residual);
}

// The attention map alone (rows on the probability simplex).
template <class S>
Tensor<S> transposed_attention_map(const Tensor<S>& q_src, const Tensor<S>& kv_src, const Tensor<S>& wq,
                                   const Tensor<S>& wk, const Tensor<S>& log_tau) {
  const std::size_t c = q_src.dim(0);
  Tensor<S> xq = reshape(q_src, {c, q_src.dim(1) * q_src.dim(2)});
  Tensor<S> xkv = reshape(kv_src, {c, kv_src.dim(1) * kv_src.dim(2)});
  return softmax(div(matmul(matmul(wq, xq), transpose(matmul(wk, xkv))), exp(log_tau)), 1);
}

// Fixed sinusoidal position code, c x h x w; added to the key path so the
// learned queries can specialize spatially as well as by content.
template <class S>
Tensor<S> positional_code(std::size_t c, std::size_t h, std::size_t w) {
  std::vector<S> data(c * h * w, S(0));
  const std::size_t bands = std::min<std::size_t>(c / 4, 4);
  for (std::size_t b = 0; b < bands; ++b) {
    const double freq = 3.141592653589793 * static_cast<double>(1 << b);
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const double u = (x + 0.5) / static_cast<double>(w);
        const double v = (y + 0.5) / static_cast<double>(h);
        data[((4 * b + 0) * h + y) * w + x] = static_cast<S>(std::sin(freq * u));
        data[((4 * b + 1) * h + y) * w + x] = static_cast<S>(std::cos(freq * u));
        data[((4 * b + 2) * h + y) * w + x] = static_cast<S>(std::sin(freq * v));
        data[((4 * b + 3) * h + y) * w + x] = static_cast<S>(std::cos(freq * v));
      }
  }
  return Tensor<S>::from_vector({c, h, w}, std::move(data));
}

// Learned queries cross-attend into the flattened feature map; returns
// (me_mov c x n, ms_mov 2 x n).
template <class S>
std::pair<Tensor<S>, Tensor<S>> query_motion_decode(const Tensor<S>& f_m, const Tensor<S>& queries,
                                                    const Tensor<S>& wq, const Tensor<S>& wk,
                                                    const Tensor<S>& wv, const Tensor<S>& emb_w,
                                                    const Tensor<S>& emb_b, const Tensor<S>& score_w,
                                                    const Tensor<S>& score_b) {
  const std::size_t c = f_m.dim(0);
  const std::size_t hw = f_m.dim(1) * f_m.dim(2);
  Tensor<S> keyed = add(f_m, positional_code<S>(c, f_m.dim(1), f_m.dim(2)));
  Tensor<S> k = matmul(wk, reshape(keyed, {c, hw}));
  Tensor<S> v = matmul(wv, reshape(f_m, {c, hw}));
  Tensor<S> q = matmul(queries, wq);
  Tensor<S> attn = softmax(scale(matmul(q, k), S(1) / std::sqrt(static_cast<S>(c))), 1);
  Tensor<S> ctx = matmul(attn, transpose(v));  // n x c
  Tensor<S> me_mov = add(transpose(matmul(ctx, emb_w)), emb_b);
  Tensor<S> ms_mov = add(transpose(matmul(ctx, score_w)), score_b);
  return {me_mov, ms_mov};
}

template <class S>
struct ModelOutputs {
  struct FrameFeatures {
    Tensor<S> f_t, f_m;  // c x h x w
  };
  std::vector<FrameFeatures> frames;  // retained per frame in train mode
  Tensor<S> me_mask;                  // c x h x w
  Tensor<S> me_mov;                   // c x n
  Tensor<S> ms_mov;                   // 2 x n
  bool has_flow = false;
  Tensor<S> flow;                     // 2 x H x W when enabled
};

template <class S>
class Model {
 public:
  Model(ModelConfig cfg, std::uint64_t seed) : config(cfg) {
    Rng rng(seed);
    const std::size_t c = cfg.channels;
    const std::size_t mid = c;
    // image/event backbones get a fourth stride-1 conv for a wider receptive
    // field; the event-mask encoder stays a lightweight three-layer stack
    if (cfg.input_mode != InputMode::kEventsOnly)
      enc_image_ = make_encoder("enc_image", 1, mid, c, rng, /*deep=*/true);
    enc_event_ = make_encoder("enc_event", cfg.event_in_channels(), mid, c, rng, /*deep=*/true);
    enc_mask_ = make_encoder("enc_mask", 1, std::max<std::size_t>(c / 2, 4), c, rng, /*deep=*/false);

    if (cfg.cross_attention) {
      attn_texture_ = make_attention("attn_texture", c, rng);
      attn_motion_ = make_attention("attn_motion", c, rng);
    }

    queries_ = params.add("motion.queries", Tensor<S>::rand_uniform(rng, {cfg.queries, c}, S(-1), S(1)));
    q_proj_q_ = params.add("motion.wq", fan_in_init(rng, {c, c}, c));
    q_proj_k_ = params.add("motion.wk", fan_in_init(rng, {c, c}, c));
    q_proj_v_ = params.add("motion.wv", fan_in_init(rng, {c, c}, c));
    emb_w_ = params.add("motion.emb_w", fan_in_init(rng, {c, c}, c));
    emb_b_ = params.add("motion.emb_b", Tensor<S>::zeros({c, 1}));
    score_w_ = params.add("motion.score_w", fan_in_init(rng, {c, 2}, c));
    score_b_ = params.add("motion.score_b", Tensor<S>::zeros({2, 1}));

    mask_c1_ = make_conv("mask_head.c1", c, c, 1, rng);
    mask_c2_ = make_conv("mask_head.c2", c, c, 1, rng);
    if (cfg.flow_head) {
      flow_c1_ = make_conv("flow_head.c1", c, mid, 1, rng);
      flow_c2_ = make_conv("flow_head.c2", mid, 2, 1, rng);
    }
  }

  ModelConfig config;
  ParamSet<S> params;

  // (f_I, f_E, f_EM); in events-only mode f_I aliases f_E so the attention
  // block degrades to self-attention.
  struct Features {
    Tensor<S> f_i, f_e, f_em;
  };
  Features encode(const FrameInput<S>& in) {
    Features f;
    Tensor<S> ev = in.event_in;
    if (config.input_mode != InputMode::kImagePair && config.voxel_scale != 1.0)
      ev = scale(ev, static_cast<S>(config.voxel_scale));
    f.f_e = run_encoder(enc_event_, ev);
    f.f_em = run_encoder(enc_mask_, in.em);
    f.f_i = config.input_mode == InputMode::kEventsOnly ? f.f_e : run_encoder(enc_image_, in.image);
    return f;
  }

  // Dual-branch channel-transposed attention with residuals:
  //   texture: Q from f_I, K/V from g = f_E*f_EM, output + f_I
  //   motion:  Q from g, K/V from f_I, output + f_E
  std::pair<Tensor<S>, Tensor<S>> cross_modal_augment(const Tensor<S>& f_i, const Tensor<S>& f_e,
                                                      const Tensor<S>& f_em) {
    if (!config.cross_attention) return {f_i, f_e};
    Tensor<S> g = mul(f_e, f_em);
    Tensor<S> f_t = attention_branch(attn_texture_, f_i, g, f_i);
    Tensor<S> f_m = attention_branch(attn_motion_, g, f_i, f_e);
    return {f_t, f_m};
  }

  Tensor<S> decode_masks(const Tensor<S>& f_t) {
    Tensor<S> in = add(f_t, positional_code<S>(f_t.dim(0), f_t.dim(1), f_t.dim(2)));
    Tensor<S> h = relu(conv_layer(mask_c1_, in));
    return conv_layer(mask_c2_, h);
  }

  std::pair<Tensor<S>, Tensor<S>> decode_motion(const Tensor<S>& f_m) {
    return query_motion_decode(f_m, queries_->bound, q_proj_q_->bound, q_proj_k_->bound, q_proj_v_->bound,
                               emb_w_->bound, emb_b_->bound, score_w_->bound, score_b_->bound);
  }

  Tensor<S> decode_flow(const Tensor<S>& f_m, std::size_t out_h, std::size_t out_w) {
    if (!config.flow_head) throw ValidationError("decode_flow: flow head disabled in this model");
    Tensor<S> h = relu(conv_layer(flow_c1_, f_m));
    Tensor<S> f = conv_layer(flow_c2_, h);
    return upsample_bilinear(f, out_h, out_w);
  }

  // Full pipeline. Every frame contributes (f_T, f_M); decoders run on frame
  // 0 only. with_flow additionally runs the flow head on frame 0.
  ModelOutputs<S> forward_full(const std::vector<FrameInput<S>>& frames, bool with_flow) {
    if (frames.empty()) throw ValidationError("forward_full: no frames");
    ModelOutputs<S> out;
    for (const auto& fr : frames) {
      Features f = encode(fr);
      auto [f_t, f_m] = cross_modal_augment(f.f_i, f.f_e, f.f_em);
      out.frames.push_back({f_t, f_m});
    }
    out.me_mask = decode_masks(out.frames[0].f_t);
    std::tie(out.me_mov, out.ms_mov) = decode_motion(out.frames[0].f_m);
    if (with_flow) {
      out.flow = decode_flow(out.frames[0].f_m, frames[0].event_in.dim(1), frames[0].event_in.dim(2));
      out.has_flow = true;
    }
    return out;
  }

  // test hooks
  void zero_attention_value_output() {
    for (auto* br : {&attn_texture_, &attn_motion_}) {
      std::fill(br->wv->value.data(), br->wv->value.data() + br->wv->value.size(), S(0));
      std::fill(br->wo->value.data(), br->wo->value.data() + br->wo->value.size(), S(0));
    }
  }
  void set_attention_temperature(S tau) {
    for (auto* br : {&attn_texture_, &attn_motion_}) br->log_tau->value.data()[0] = std::log(tau);
  }
  Tensor<S> texture_attention_map(const Tensor<S>& f_i, const Tensor<S>& g) {
    return transposed_attention_map(f_i, g, attn_texture_.wq->bound, attn_texture_.wk->bound,
                                    attn_texture_.log_tau->bound);
  }

 private:
  struct Conv {
    Parameter<S>* w = nullptr;
    Parameter<S>* b = nullptr;
    std::size_t stride = 1;
  };
  struct Encoder {
    Conv c1, c2, c3, c4;
    bool deep = false;
  };
  struct AttentionBranch {
    Parameter<S>* wq = nullptr;
    Parameter<S>* wk = nullptr;
    Parameter<S>* wv = nullptr;
    Parameter<S>* wo = nullptr;
    Parameter<S>* log_tau = nullptr;
  };

  Tensor<S> fan_in_init(Rng& rng, Shape shape, std::size_t fan_in) {
    const S bound = S(1) / std::sqrt(static_cast<S>(fan_in));
    return Tensor<S>::rand_uniform(rng, std::move(shape), -bound, bound);
  }

  Conv make_conv(const std::string& name, std::size_t in_c, std::size_t out_c, std::size_t stride, Rng& rng) {
    Conv conv;
    // He-uniform bound for the relu stacks
    const S bound = std::sqrt(S(6) / static_cast<S>(in_c * 9));
    conv.w = params.add(name + ".w", Tensor<S>::rand_uniform(rng, {out_c, in_c, 3, 3}, -bound, bound));
    conv.b = params.add(name + ".b", Tensor<S>::zeros({out_c, 1, 1}));
    conv.stride = stride;
    return conv;
  }

  Encoder make_encoder(const std::string& name, std::size_t in_c, std::size_t mid, std::size_t out_c, Rng& rng,
                       bool deep) {
    Encoder e;
    e.c1 = make_conv(name + ".c1", in_c, mid, 2, rng);
    e.c2 = make_conv(name + ".c2", mid, out_c, 2, rng);
    e.c3 = make_conv(name + ".c3", out_c, out_c, 1, rng);
    e.deep = deep;
    if (deep) e.c4 = make_conv(name + ".c4", out_c, out_c, 1, rng);
    return e;
  }

  AttentionBranch make_attention(const std::string& name, std::size_t c, Rng& rng) {
    AttentionBranch br;
    br.wq = params.add(name + ".wq", fan_in_init(rng, {c, c}, c));
    br.wk = params.add(name + ".wk", fan_in_init(rng, {c, c}, c));
    br.wv = params.add(name + ".wv", fan_in_init(rng, {c, c}, c));
    // zero output projection: each branch starts as the pure residual and
    // only learns to add information
    br.wo = params.add(name + ".wo", Tensor<S>::zeros({c, c}));
    br.log_tau = params.add(name + ".log_tau", Tensor<S>::zeros({}));
    return br;
  }

  Tensor<S> conv_layer(const Conv& conv, const Tensor<S>& x) {
    return add(conv2d(x, conv.w->bound, conv.stride), conv.b->bound);
  }

  Tensor<S> run_encoder(const Encoder& e, const Tensor<S>& x) {
    Tensor<S> h = relu(conv_layer(e.c1, x));
    h = relu(conv_layer(e.c2, h));
    if (!e.deep) return conv_layer(e.c3, h);
    h = relu(conv_layer(e.c3, h));
    return conv_layer(e.c4, h);
  }

  Tensor<S> attention_branch(const AttentionBranch& br, const Tensor<S>& q_src, const Tensor<S>& kv_src,
                             const Tensor<S>& residual) {
    return transposed_attention(q_src, kv_src, residual, br.wq->bound, br.wk->bound, br.wv->bound,
                                br.wo->bound, br.log_tau->bound);
  }

  Encoder enc_image_, enc_event_, enc_mask_;
  AttentionBranch attn_texture_, attn_motion_;
  Parameter<S>*queries_ = nullptr, *q_proj_q_ = nullptr, *q_proj_k_ = nullptr, *q_proj_v_ = nullptr;
  Parameter<S>*emb_w_ = nullptr, *emb_b_ = nullptr, *score_w_ = nullptr, *score_b_ = nullptr;
  Conv mask_c1_, mask_c2_, flow_c1_, flow_c2_;
};

// ---------------------------------------------------------------------------
// Checkpoints: "CKPT" magic, u32 parameter count, then per parameter a u16
// name length, the name bytes, and a TNS0 tensor blob. The model config rides
// in a JSON sidecar next to the checkpoint.

template <class S>
void save_checkpoint(const std::string& path, Model<S>& model) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("CKPT", 4);
  auto params = model.params.params();
  const std::uint32_t count = static_cast<std::uint32_t>(params.size());
  os.write(reinterpret_cast<const char*>(&count), 4);
  for (const auto* p : params) {
    const std::uint16_t len = static_cast<std::uint16_t>(p->name.size());
    os.write(reinterpret_cast<const char*>(&len), 2);
    os.write(p->name.data(), len);
    write_tns(os, p->value);
  }
  if (!os) throw IoError("checkpoint write failed: " + path);
  std::ofstream cfg(path + ".json");
  if (!cfg) throw IoError("cannot write config sidecar for " + path);
  cfg << config_to_json(model.config).dump(2) << "\n";
}

template <class S>
Model<S> load_checkpoint(const std::string& path) {
  std::ifstream cfg_in(path + ".json");
  if (!cfg_in) throw IoError("missing config sidecar: " + path + ".json");
  nlohmann::json j;
  cfg_in >> j;
  Model<S> model(config_from_json(j), /*seed=*/0);

  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "CKPT", 4) != 0) throw IoError("bad magic: expected CKPT");
  std::uint32_t count = 0;
  if (!is.read(reinterpret_cast<char*>(&count), 4)) throw IoError("truncated checkpoint");
  auto params = model.params.params();
  if (count != params.size())
    throw ValidationError("checkpoint parameter count does not match the config");
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint16_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), 2)) throw IoError("truncated checkpoint");
    std::string name(len, '\0');
    if (!is.read(name.data(), len)) throw IoError("truncated checkpoint");
    if (name != params[i]->name)
      throw ValidationError("checkpoint parameter '" + name + "' does not match '" + params[i]->name + "'");
    Tensor<S> t = read_tns<S>(is);
    if (t.shape() != params[i]->value.shape())
      throw ValidationError("checkpoint shape mismatch for '" + name + "'");
    params[i]->value = t;
    params[i]->bound = params[i]->value;
  }
  return model;
}

}  // namespace evseg
