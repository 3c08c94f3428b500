#pragma once

// Training driver: Adam with decoupled weight decay on a one-cycle schedule,
// Hungarian-matched segmentation/motion loss on the first frame, optional
// contrastive and flow terms, per-step CSV logging. Also the shared
// scene-to-tensor preparation and the single-scene inference path.

#include <array>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "evseg/dataset.hpp"
#include "evseg/infer.hpp"
#include "evseg/losses.hpp"
#include "evseg/metrics.hpp"
#include "evseg/model.hpp"

namespace evseg {

enum class FlowLossMode { kOff, kSupervised, kPhotometric, kBoth };

inline std::string to_string(FlowLossMode m) {
  switch (m) {
    case FlowLossMode::kOff: return "off";
    case FlowLossMode::kSupervised: return "sf";
    case FlowLossMode::kPhotometric: return "uf";
    case FlowLossMode::kBoth: return "sf+uf";
  }
  return "off";
}

inline FlowLossMode flow_mode_from_string(const std::string& s) {
  if (s == "off") return FlowLossMode::kOff;
  if (s == "sf") return FlowLossMode::kSupervised;
  if (s == "uf") return FlowLossMode::kPhotometric;
  if (s == "sf+uf") return FlowLossMode::kBoth;
  throw ValidationError("unknown flow loss mode '" + s + "'");
}

struct TrainConfig {
  std::size_t steps = 5000;
  double learning_rate = 1e-3;
  double weight_decay = 1e-6;
  std::size_t batch_size = 4;
  std::size_t frames = 2;  // K frames per item; extras feed the contrastive term only
  bool contrastive = true;
  bool cs_excludes_own_batch = false;
  bool augment = true;  // dihedral flips of each drawn sample
  FlowLossMode flow_loss = FlowLossMode::kSupervised;
  std::uint64_t seed = 0;
  ModelConfig model;
  LossWeights weights;

  void validate() const {
    if (steps == 0) throw ValidationError("config: steps must be positive");
    if (batch_size == 0) throw ValidationError("config: batch size must be positive");
    if (contrastive && batch_size < 2)
      throw ValidationError("config: the contrastive loss needs batch size >= 2 for cross-batch pairs");
    if (contrastive && frames < 2)
      throw ValidationError("config: the contrastive loss needs at least 2 frames");
    if (flow_loss != FlowLossMode::kOff && !model.flow_head)
      throw ValidationError("config: flow loss requires the flow head");
  }
};

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"steps", c.steps},
          {"learning_rate", c.learning_rate},
          {"weight_decay", c.weight_decay},
          {"batch_size", c.batch_size},
          {"frames", c.frames},
          {"contrastive", c.contrastive},
          {"cs_excludes_own_batch", c.cs_excludes_own_batch},
          {"augment", c.augment},
          {"flow_loss", to_string(c.flow_loss)},
          {"seed", c.seed},
          {"model", config_to_json(c.model)},
          {"loss_weights",
           {{"lambda_contrastive", c.weights.lambda_contrastive},
            {"lambda_flow", c.weights.lambda_flow},
            {"focal_weight", c.weights.focal_weight},
            {"dice_weight", c.weights.dice_weight},
            {"focal_gamma", c.weights.focal_gamma},
            {"focal_alpha", c.weights.focal_alpha}}}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.steps = j.value("steps", c.steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.frames = j.value("frames", c.frames);
  c.contrastive = j.value("contrastive", c.contrastive);
  c.cs_excludes_own_batch = j.value("cs_excludes_own_batch", c.cs_excludes_own_batch);
  c.augment = j.value("augment", c.augment);
  c.flow_loss = flow_mode_from_string(j.value("flow_loss", "sf"));
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) c.model = config_from_json(j.at("model"));
  if (j.contains("loss_weights")) {
    const auto& w = j.at("loss_weights");
    c.weights.lambda_contrastive = w.value("lambda_contrastive", c.weights.lambda_contrastive);
    c.weights.lambda_flow = w.value("lambda_flow", c.weights.lambda_flow);
    c.weights.focal_weight = w.value("focal_weight", c.weights.focal_weight);
    c.weights.dice_weight = w.value("dice_weight", c.weights.dice_weight);
    c.weights.focal_gamma = w.value("focal_gamma", c.weights.focal_gamma);
    c.weights.focal_alpha = w.value("focal_alpha", c.weights.focal_alpha);
  }
  return c;
}

// Linear warmup over the first 30%, cosine decay to max/1000 after.
inline double one_cycle_lr(std::size_t step, std::size_t total_steps, double max_lr) {
  const double warm = 0.3 * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  if (s < warm) {
    const double start = max_lr / 25.0;
    return start + (max_lr - start) * (s / warm);
  }
  const double t = (s - warm) / std::max(1.0, static_cast<double>(total_steps) - warm);
  const double floor_lr = max_lr / 1000.0;
  return floor_lr + 0.5 * (max_lr - floor_lr) * (1.0 + std::cos(3.141592653589793 * t));
}

// ---------------------------------------------------------------------------
// Scene preparation.

template <class S>
struct TrainScene {
  std::string dir;
  std::size_t height = 0, width = 0;
  std::vector<FrameInput<S>> frames;    // model inputs per frame
  std::vector<Tensor<S>> gt_masks_ds;   // per GT object, h x w nearest-downsampled
  std::vector<int> gt_moving;           // per GT object motion flag
  std::vector<Mask> gt_moving_full;     // full-resolution masks of moving objects
  Mask static_union_full;               // union of static-object pixels (diagnostics)
  Tensor<S> gt_flow0;                   // 2 x H x W
  Tensor<S> image0, image1;             // 1 x H x W, for the photometric loss
};

namespace detail {

template <class S>
Tensor<S> image_to_tensor(const Image& img) {
  std::vector<S> data(img.data.size());
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<S>(img.data[i]);
  return Tensor<S>::from_vector({1, img.height, img.width}, std::move(data));
}

template <class S>
Tensor<S> downsample_mask_nearest(const Mask& full, std::size_t H, std::size_t W, std::size_t h, std::size_t w) {
  std::vector<S> out(h * w);
  for (std::size_t y = 0; y < h; ++y) {
    const std::size_t sy = std::min(H - 1, static_cast<std::size_t>((y + 0.5) * (static_cast<double>(H) / h)));
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t sx = std::min(W - 1, static_cast<std::size_t>((x + 0.5) * (static_cast<double>(W) / w)));
      out[y * w + x] = static_cast<S>(full[sy * W + sx] != 0 ? 1 : 0);
    }
  }
  return Tensor<S>::from_vector({h, w}, std::move(out));
}

}  // namespace detail

// Builds model inputs and supervision from a scene directory's contents.
// half_events keeps only the first half of each inter-frame slice.
template <class S>
TrainScene<S> prepare_scene(const LoadedScene& scene, const ModelConfig& cfg, bool half_events = false) {
  if (scene.frames.empty()) throw ValidationError("prepare_scene: no frames in " + scene.dir);
  TrainScene<S> out;
  out.dir = scene.dir;
  out.height = scene.frames[0].height;
  out.width = scene.frames[0].width;
  const std::size_t usable = std::min(scene.events.size(), scene.frames.size() - 1);
  if (usable == 0) throw ValidationError("prepare_scene: no event slices in " + scene.dir);

  for (std::size_t k = 0; k < usable; ++k) {
    FrameInput<S> in;
    EventSlice ev = scene.events[k];
    if (half_events && ev.duration_us() > 0)
      ev = slice_by_time(ev, ev.t_start, ev.t_start + ev.duration_us() / 2);
    if (cfg.input_mode == InputMode::kImagePair) {
      in.image = detail::image_to_tensor<S>(scene.frames[k]);
      in.event_in = detail::image_to_tensor<S>(scene.frames[k + 1]);
      in.em = Tensor<S>::ones({1, out.height, out.width});
    } else {
      if (cfg.input_mode == InputMode::kFused) in.image = detail::image_to_tensor<S>(scene.frames[k]);
      in.event_in = voxelize(ev, cfg.voxel_bins).template to_tensor_chw<S>();
      in.em = event_mask(ev).template to_tensor<S>();
    }
    out.frames.push_back(std::move(in));
  }

  const std::size_t h = out.height / 4, w = out.width / 4;
  if (!scene.masks.empty() && !scene.flags.empty()) {
    const IdMap& ids = scene.masks[0];
    out.static_union_full.assign(ids.ids.size(), 0);
    for (const auto& [id, moving] : scene.flags[0]) {
      Mask full(ids.ids.size(), 0);
      for (std::size_t i = 0; i < full.size(); ++i) full[i] = ids.ids[i] == id;
      out.gt_masks_ds.push_back(detail::downsample_mask_nearest<S>(full, out.height, out.width, h, w));
      out.gt_moving.push_back(moving);
      if (moving) {
        out.gt_moving_full.push_back(full);
      } else {
        for (std::size_t i = 0; i < full.size(); ++i) out.static_union_full[i] |= full[i];
      }
    }
  }
  if (!scene.flows.empty()) {
    std::vector<S> fl(2 * out.height * out.width);
    for (std::size_t i = 0; i < out.height * out.width; ++i) {
      fl[i] = static_cast<S>(scene.flows[0].uv[2 * i]);
      fl[out.height * out.width + i] = static_cast<S>(scene.flows[0].uv[2 * i + 1]);
    }
    out.gt_flow0 = Tensor<S>::from_vector({2, out.height, out.width}, std::move(fl));
  }
  out.image0 = detail::image_to_tensor<S>(scene.frames[0]);
  if (scene.frames.size() > 1) out.image1 = detail::image_to_tensor<S>(scene.frames[1]);
  return out;
}

// ---------------------------------------------------------------------------
// Dihedral augmentation: g bit 0 flips x, bit 1 flips y, bit 2 transposes
// (square canvases only). Flow channels transform with the geometry.

namespace detail {

template <class S>
Tensor<S> dihedral_map(const Tensor<S>& t, unsigned g) {
  const std::size_t C = t.dim(0), H = t.dim(1), W = t.dim(2);
  const bool fx = g & 1u, fy = g & 2u, tr = g & 4u;
  const std::size_t OH = tr ? W : H, OW = tr ? H : W;
  std::vector<S> out(t.size());
  for (std::size_t c = 0; c < C; ++c)
    for (std::size_t y = 0; y < H; ++y)
      for (std::size_t x = 0; x < W; ++x) {
        const std::size_t sx = fx ? W - 1 - x : x;
        const std::size_t sy = fy ? H - 1 - y : y;
        const std::size_t oy = tr ? x : y, ox = tr ? y : x;
        out[(c * OH + oy) * OW + ox] = t.data()[(c * H + sy) * W + sx];
      }
  return Tensor<S>::from_vector({C, OH, OW}, std::move(out));
}

template <class S>
Tensor<S> dihedral_flow(const Tensor<S>& flow, unsigned g) {
  Tensor<S> m = dihedral_map(flow, g);
  const std::size_t n = m.dim(1) * m.dim(2);
  std::vector<S> out(m.data(), m.data() + m.size());
  const bool fx = g & 1u, fy = g & 2u, tr = g & 4u;
  if (tr)
    for (std::size_t i = 0; i < n; ++i) std::swap(out[i], out[n + i]);
  // sign fixes follow the output axes: after a transpose the x flip acted on
  // what is now the v component
  const bool neg_u = tr ? fy : fx;
  const bool neg_v = tr ? fx : fy;
  if (neg_u)
    for (std::size_t i = 0; i < n; ++i) out[i] = -out[i];
  if (neg_v)
    for (std::size_t i = 0; i < n; ++i) out[n + i] = -out[n + i];
  return Tensor<S>::from_vector(m.shape(), std::move(out));
}

}  // namespace detail

template <class S>
TrainScene<S> dihedral_variant(const TrainScene<S>& sc, unsigned g) {
  if (g == 0) return sc;
  if ((g & 4u) && sc.height != sc.width) g &= 3u;  // transpose needs a square canvas
  if (g == 0) return sc;
  TrainScene<S> out;
  out.dir = sc.dir;
  out.height = sc.height;
  out.width = sc.width;
  for (const auto& fr : sc.frames) {
    FrameInput<S> t;
    if (fr.image.size() > 0) t.image = detail::dihedral_map(fr.image, g);
    t.event_in = detail::dihedral_map(fr.event_in, g);
    t.em = detail::dihedral_map(fr.em, g);
    out.frames.push_back(std::move(t));
  }
  for (const auto& m : sc.gt_masks_ds) {
    Tensor<S> r = detail::dihedral_map(reshape(m, {1, m.dim(0), m.dim(1)}), g);
    out.gt_masks_ds.push_back(reshape(r, {r.dim(1), r.dim(2)}));
  }
  out.gt_moving = sc.gt_moving;
  out.gt_moving_full = sc.gt_moving_full;  // full-res GT only feeds evaluation, never training
  out.static_union_full = sc.static_union_full;
  if (sc.gt_flow0.size() > 0) out.gt_flow0 = detail::dihedral_flow(sc.gt_flow0, g);
  out.image0 = detail::dihedral_map(sc.image0, g);
  if (sc.image1.size() > 0) out.image1 = detail::dihedral_map(sc.image1, g);
  return out;
}

// ---------------------------------------------------------------------------
// Optimizer.

template <class S>
class AdamW {
 public:
  AdamW(double weight_decay) : weight_decay_(weight_decay) {}

  void step(std::vector<Parameter<S>*> params, Tape<S>& tape, double lr) {
    if (m_.empty()) {
      for (auto* p : params) {
        m_.emplace_back(p->value.size(), 0.0);
        v_.emplace_back(p->value.size(), 0.0);
      }
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
      Parameter<S>* p = params[pi];
      if (!p->trainable) continue;
      const auto grad = tape.grad(p->bound);
      for (std::size_t i = 0; i < grad.size(); ++i) {
        const double g = static_cast<double>(grad[i]);
        m_[pi][i] = beta1_ * m_[pi][i] + (1 - beta1_) * g;
        v_[pi][i] = beta2_ * v_[pi][i] + (1 - beta2_) * g * g;
        const double mhat = m_[pi][i] / bc1;
        const double vhat = v_[pi][i] / bc2;
        const double val = static_cast<double>(p->value.data()[i]);
        p->value.data()[i] =
            static_cast<S>(val - lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * val));
      }
    }
  }

 private:
  double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8, weight_decay_;
  std::vector<std::vector<double>> m_, v_;
  std::size_t t_ = 0;
};

// ---------------------------------------------------------------------------
// Training loop.

struct TrainStepLog {
  std::size_t step;
  double loss, l_mos, l_cl, l_f;
};

template <class S>
std::vector<TrainStepLog> train_model(Model<S>& model, const std::vector<TrainScene<S>>& scenes,
                                      const TrainConfig& cfg, const std::string& csv_path = {}) {
  cfg.validate();
  if (scenes.empty()) throw ValidationError("train: empty dataset");
  for (const auto& sc : scenes)
    if (sc.frames.size() < cfg.frames)
      throw ValidationError("train: scene " + sc.dir + " has fewer than K frames");

  // shared contrastive temperature (exponential reparameterization)
  ParamSet<S> aux;
  Parameter<S>* log_alpha = aux.add("contrastive.log_alpha", Tensor<S>::zeros({}));

  std::ofstream csv;
  if (!csv_path.empty()) {
    csv.open(csv_path);
    if (!csv) throw IoError("cannot open loss CSV for write: " + csv_path);
    csv << "step,loss,L_mos,L_cl,L_f\n";
  }

  std::vector<Parameter<S>*> all_params = model.params.params();
  for (auto* p : aux.params()) all_params.push_back(p);
  AdamW<S> opt(cfg.weight_decay);
  Rng batch_rng(cfg.seed + 1);
  const bool with_flow = cfg.flow_loss != FlowLossMode::kOff && model.config.flow_head;
  std::vector<TrainStepLog> logs;
  logs.reserve(cfg.steps);

  for (std::size_t step = 0; step < cfg.steps; ++step) {
    Tape<S> tape;
    model.params.bind(tape);
    aux.bind(tape);

    FeatureGrid<S> ft, fm;
    Tensor<S> l_mos_acc = Tensor<S>::scalar(S(0));
    Tensor<S> l_f_acc = Tensor<S>::scalar(S(0));
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const TrainScene<S>& base = scenes[static_cast<std::size_t>(
          batch_rng.integer(0, static_cast<std::int64_t>(scenes.size()) - 1))];
      const unsigned g = cfg.augment ? static_cast<unsigned>(batch_rng.integer(0, 7)) : 0u;
      const TrainScene<S> sc = dihedral_variant(base, g);
      std::vector<FrameInput<S>> frames(sc.frames.begin(), sc.frames.begin() + cfg.frames);
      auto out = model.forward_full(frames, with_flow);

      Tensor<S> s_all = fuse_embeddings(out.me_mov, out.me_mask);
      auto cost = match_cost(out.ms_mov, s_all, sc.gt_masks_ds, sc.gt_moving, cfg.weights);
      Assignment rho = hungarian_match(cost, sc.gt_masks_ds.size(), model.config.queries);
      l_mos_acc = add(l_mos_acc, mos_loss(out.ms_mov, s_all, sc.gt_masks_ds, sc.gt_moving, rho, cfg.weights));

      if (with_flow) {
        Tensor<S> valid = Tensor<S>::ones({sc.height, sc.width});
        if (cfg.flow_loss == FlowLossMode::kSupervised || cfg.flow_loss == FlowLossMode::kBoth)
          l_f_acc = add(l_f_acc, flow_supervised(out.flow, sc.gt_flow0, valid));
        if (cfg.flow_loss == FlowLossMode::kPhotometric || cfg.flow_loss == FlowLossMode::kBoth)
          l_f_acc = add(l_f_acc, flow_photometric(sc.image0, sc.image1, out.flow));
      }
      if (cfg.contrastive) {
        ft.emplace_back();
        fm.emplace_back();
        for (const auto& fr : out.frames) {
          ft.back().push_back(fr.f_t);
          fm.back().push_back(fr.f_m);
        }
      }
    }
    const S inv_b = S(1) / static_cast<S>(cfg.batch_size);
    Tensor<S> l_mos = scale(l_mos_acc, inv_b);
    Tensor<S> l_f = scale(l_f_acc, inv_b);
    Tensor<S> l_cl = cfg.contrastive
                         ? contrastive_loss(ft, fm, exp(log_alpha->bound), cfg.cs_excludes_own_batch)
                         : Tensor<S>::scalar(S(0));
    Tensor<S> loss = total_loss(l_mos, l_cl, l_f, cfg.weights);
    tape.backward(loss);
    opt.step(all_params, tape, one_cycle_lr(step, cfg.steps, cfg.learning_rate));

    // keep the contrastive temperature in a sane band; an unconstrained alpha
    // can collapse and overflow exp(cos/alpha)
    log_alpha->value.data()[0] = static_cast<S>(
        std::clamp(static_cast<double>(log_alpha->value.data()[0]), std::log(0.2), std::log(5.0)));

    TrainStepLog log{step, static_cast<double>(loss.value()), static_cast<double>(l_mos.value()),
                     static_cast<double>(l_cl.value()), static_cast<double>(l_f.value())};
    logs.push_back(log);
    if (csv.is_open())
      csv << log.step << "," << log.loss << "," << log.l_mos << "," << log.l_cl << "," << log.l_f << "\n";
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Single-scene inference.

template <class S>
struct InferenceResult {
  SegOutput<S> seg;
  bool has_flow = false;
  FlowField flow;
};

template <class S>
InferenceResult<S> infer_scene(Model<S>& model, const TrainScene<S>& scene, double theta,
                               bool with_flow = false) {
  model.params.bind_values();
  auto out = model.forward_full({scene.frames[0]}, with_flow && model.config.flow_head);
  Tensor<S> s_all = fuse_embeddings(out.me_mov, out.me_mask);
  InferenceResult<S> result;
  result.seg = select_instances(s_all, out.ms_mov, theta, scene.height, scene.width);
  if (out.has_flow) {
    result.has_flow = true;
    result.flow.width = scene.width;
    result.flow.height = scene.height;
    result.flow.uv.resize(scene.width * scene.height * 2);
    const std::size_t n = scene.width * scene.height;
    for (std::size_t i = 0; i < n; ++i) {
      result.flow.uv[2 * i] = static_cast<float>(out.flow.data()[i]);
      result.flow.uv[2 * i + 1] = static_cast<float>(out.flow.data()[n + i]);
    }
  }
  return result;
}

// Collapses possibly overlapping instances into the archive id map; ties go
// to the instance with the larger upsampled logit.
template <class S>
Prediction to_prediction(const SegOutput<S>& seg, std::size_t H, std::size_t W) {
  Prediction pred;
  pred.width = W;
  pred.height = H;
  pred.id_map.assign(H * W, 0);
  std::vector<double> best(H * W, -1e30);
  for (std::size_t k = 0; k < seg.instances.size(); ++k) {
    const auto& inst = seg.instances[k];
    pred.instances.push_back({inst.embedding, inst.moving_prob});
    const S* logits = seg.s_full.data() + inst.embedding * H * W;
    for (std::size_t i = 0; i < H * W; ++i) {
      if (!inst.mask[i]) continue;
      if (static_cast<double>(logits[i]) > best[i]) {
        best[i] = static_cast<double>(logits[i]);
        pred.id_map[i] = static_cast<std::uint8_t>(k + 1);
      }
    }
  }
  return pred;
}

}  // namespace evseg
