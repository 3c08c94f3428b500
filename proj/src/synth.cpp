#include "evseg/synth.hpp"

#include <algorithm>
#include <cmath>

#include "evseg/common.hpp"

namespace evseg {

namespace {

constexpr double kLogEps = 1e-3;

// Periodic value noise on a 16x16 lattice, bilinearly interpolated, in [-1,1].
struct ValueNoise {
  static constexpr int kN = 16;
  std::vector<double> lattice;

  explicit ValueNoise(std::uint64_t seed) {
    Rng rng(seed ^ 0x9e3779b97f4a7c15ull);
    lattice.resize(kN * kN);
    for (auto& v : lattice) v = rng.uniform(-1.0, 1.0);
  }

  double at(double u, double v) const {
    const double fu = u - std::floor(u / kN) * kN;
    const double fv = v - std::floor(v / kN) * kN;
    const int u0 = static_cast<int>(fu) % kN, v0 = static_cast<int>(fv) % kN;
    const int u1 = (u0 + 1) % kN, v1 = (v0 + 1) % kN;
    const double wu = fu - std::floor(fu), wv = fv - std::floor(fv);
    const double top = (1 - wu) * lattice[v0 * kN + u0] + wu * lattice[v0 * kN + u1];
    const double bot = (1 - wu) * lattice[v1 * kN + u0] + wu * lattice[v1 * kN + u1];
    return (1 - wv) * top + wv * bot;
  }
};

struct SpriteState {
  double sx, sy;  // screen center at the queried frame
};

SpriteState sprite_at(const SceneSpec& spec, const Sprite& s, std::size_t frame) {
  const double k = static_cast<double>(frame);
  return {s.cx + k * (s.vx - spec.camera_vx), s.cy + k * (s.vy - spec.camera_vy)};
}

bool covers(const Sprite& s, const SpriteState& st, double px, double py) {
  const double r = s.size * 0.5;
  if (s.kind == Sprite::Kind::kRectangle)
    return std::abs(px - st.sx) <= r && std::abs(py - st.sy) <= r;
  const double dx = px - st.sx, dy = py - st.sy;
  return dx * dx + dy * dy <= r * r;
}

// front-most wins; ties by (depth, index), larger in front
bool in_front(const SceneSpec& spec, int a, int b) {
  if (a < 0) return false;
  if (b < 0) return true;
  const int da = spec.sprites[a].depth, db = spec.sprites[b].depth;
  if (da != db) return da > db;
  return a > b;
}

void validate_spec(const SceneSpec& spec) {
  if (spec.width == 0 || spec.height == 0) throw ValidationError("scene: empty canvas");
  if (spec.frames < 2) throw ValidationError("scene: at least two frames required");
  if (spec.contrast_threshold <= 0) throw ValidationError("scene: contrast threshold must be positive");
  for (std::size_t i = 0; i < spec.sprites.size(); ++i) {
    const Sprite& s = spec.sprites[i];
    const double svx = s.vx - spec.camera_vx, svy = s.vy - spec.camera_vy;
    if (std::hypot(svx, svy) > 0.25 * s.size + 1e-9)
      throw ValidationError("infeasible spec: sprite " + std::to_string(i) +
                            " moves more than a quarter of its size per frame");
    for (std::size_t k = 0; k < spec.frames; ++k) {
      const SpriteState st = sprite_at(spec, s, k);
      const double r = s.size * 0.5;
      if (st.sx - r < 0 || st.sy - r < 0 || st.sx + r > spec.width - 1 || st.sy + r > spec.height - 1)
        throw ValidationError("infeasible spec: sprite " + std::to_string(i) + " leaves the canvas at frame " +
                              std::to_string(k));
    }
  }
}

}  // namespace

int topmost_sprite_at(const SceneSpec& spec, std::size_t frame, double px, double py) {
  int top = -1;
  for (std::size_t i = 0; i < spec.sprites.size(); ++i) {
    const Sprite& s = spec.sprites[i];
    if (covers(s, sprite_at(spec, s, frame), px, py) && in_front(spec, static_cast<int>(i), top))
      top = static_cast<int>(i);
  }
  return top;
}

Image render_frame(const SceneSpec& spec, std::size_t frame) {
  const ValueNoise noise(spec.rng_seed);
  Image img;
  img.width = spec.width;
  img.height = spec.height;
  img.data.assign(spec.width * spec.height, 0.0);

  std::vector<SpriteState> states;
  states.reserve(spec.sprites.size());
  for (const Sprite& s : spec.sprites) states.push_back(sprite_at(spec, s, frame));

  const double camx = static_cast<double>(frame) * spec.camera_vx;
  const double camy = static_cast<double>(frame) * spec.camera_vy;
  const double inv_smooth = 1.0 / std::max(1e-6, spec.background.smooth_px);

  // 4x4 box supersampling softens edges so sub-pixel motion shows up in the
  // intensities (and therefore in the simulated events)
  constexpr int kSS = 4;
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      double acc = 0;
      for (int sy = 0; sy < kSS; ++sy)
        for (int sx = 0; sx < kSS; ++sx) {
          const double px = static_cast<double>(x) + (sx + 0.5) / kSS - 0.5;
          const double py = static_cast<double>(y) + (sy + 0.5) / kSS - 0.5;
          int top = -1;
          for (std::size_t i = 0; i < spec.sprites.size(); ++i)
            if (covers(spec.sprites[i], states[i], px, py) && in_front(spec, static_cast<int>(i), top))
              top = static_cast<int>(i);
          if (top >= 0) {
            acc += spec.sprites[top].intensity;
          } else {
            // world-anchored texture: sample at screen + camera offset
            acc += spec.background.base +
                   spec.background.amplitude * noise.at((px + camx) * inv_smooth, (py + camy) * inv_smooth);
          }
        }
      img.data[y * spec.width + x] = std::clamp(acc / (kSS * kSS), 0.0, 1.0);
    }
  return img;
}

EventSlice emit_events(const Image& frame_a, const Image& frame_b, std::uint64_t t_a, std::uint64_t t_b,
                       double contrast_threshold) {
  if (frame_a.width != frame_b.width || frame_a.height != frame_b.height)
    throw ValidationError("emit_events: frame sizes differ");
  if (contrast_threshold <= 0) throw ValidationError("emit_events: threshold must be positive");
  EventSlice slice;
  slice.width = static_cast<std::uint32_t>(frame_a.width);
  slice.height = static_cast<std::uint32_t>(frame_a.height);
  slice.t_start = t_a;
  slice.t_end = t_b;
  const double span = static_cast<double>(t_b - t_a);
  for (std::size_t y = 0; y < frame_a.height; ++y)
    for (std::size_t x = 0; x < frame_a.width; ++x) {
      const double la = std::log(frame_a.at(x, y) + kLogEps);
      const double lb = std::log(frame_b.at(x, y) + kLogEps);
      const double d = lb - la;
      const double mag = std::abs(d);
      const int n = static_cast<int>(std::floor(mag / contrast_threshold + 1e-9));
      if (n == 0) continue;
      const auto pol = static_cast<std::int8_t>(d > 0 ? 1 : -1);
      for (int j = 1; j <= n; ++j) {
        const double frac = static_cast<double>(j) * contrast_threshold / mag;
        Event e;
        e.t_us = t_a + static_cast<std::uint64_t>(std::llround(frac * span));
        e.x = static_cast<std::uint16_t>(x);
        e.y = static_cast<std::uint16_t>(y);
        e.p = pol;
        slice.events.push_back(e);
      }
    }
  std::stable_sort(slice.events.begin(), slice.events.end(),
                   [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  return slice;
}

FlowField gt_flow(const SceneSpec& spec, std::size_t frame) {
  if (frame + 1 >= spec.frames) throw ValidationError("gt_flow: frame index out of range");
  FlowField flow;
  flow.width = spec.width;
  flow.height = spec.height;
  flow.uv.resize(spec.width * spec.height * 2);
  for (std::size_t y = 0; y < spec.height; ++y)
    for (std::size_t x = 0; x < spec.width; ++x) {
      const int top = topmost_sprite_at(spec, frame, static_cast<double>(x), static_cast<double>(y));
      const double vx = top >= 0 ? spec.sprites[top].vx : 0.0;
      const double vy = top >= 0 ? spec.sprites[top].vy : 0.0;
      flow.uv[(y * spec.width + x) * 2] = static_cast<float>(vx - spec.camera_vx);
      flow.uv[(y * spec.width + x) * 2 + 1] = static_cast<float>(vy - spec.camera_vy);
    }
  return flow;
}

SceneSample generate_scene(const SceneSpec& spec) {
  validate_spec(spec);
  SceneSample sample;
  sample.spec = spec;
  for (std::size_t k = 0; k < spec.frames; ++k) sample.frames.push_back(render_frame(spec, k));
  for (std::size_t k = 0; k + 1 < spec.frames; ++k) {
    sample.events.push_back(emit_events(sample.frames[k], sample.frames[k + 1],
                                        k * spec.frame_dt_us, (k + 1) * spec.frame_dt_us,
                                        spec.contrast_threshold));
    sample.gt_flow.push_back(gt_flow(spec, k));
  }
  sample.gt_instances.resize(spec.frames);
  for (std::size_t k = 0; k < spec.frames; ++k) {
    std::vector<std::vector<std::uint8_t>> masks(spec.sprites.size(),
                                                 std::vector<std::uint8_t>(spec.width * spec.height, 0));
    std::vector<std::size_t> area(spec.sprites.size(), 0);
    for (std::size_t y = 0; y < spec.height; ++y)
      for (std::size_t x = 0; x < spec.width; ++x) {
        const int top = topmost_sprite_at(spec, k, static_cast<double>(x), static_cast<double>(y));
        if (top >= 0) {
          masks[top][y * spec.width + x] = 1;
          ++area[top];
        }
      }
    for (std::size_t i = 0; i < spec.sprites.size(); ++i) {
      if (area[i] == 0) continue;  // fully occluded
      SceneSample::Instance inst;
      inst.sprite_index = static_cast<int>(i);
      inst.mask = std::move(masks[i]);
      inst.moving = spec.sprites[i].moving();
      sample.gt_instances[k].push_back(std::move(inst));
    }
  }
  return sample;
}

}  // namespace evseg
