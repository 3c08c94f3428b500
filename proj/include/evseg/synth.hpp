#pragma once

// Synthetic supervised scenes: textured background under camera pan, moving
// and static sprites with depth-ordered occlusion, an ideal contrast-threshold
// event simulator between rendered frames, and dense ground-truth flow.
//
// Screen-motion convention (used everywhere, including tests): camera
// velocity v_cam displaces scene content by -v_cam on the image plane, so a
// sprite with world velocity v moves at v - v_cam on screen and the
// background moves at -v_cam.

#include <cstdint>
#include <string>
#include <vector>

#include "evseg/events.hpp"
#include "evseg/image_io.hpp"

namespace evseg {

struct Sprite {
  enum class Kind { kRectangle, kDisk };
  Kind kind = Kind::kRectangle;
  double cx = 0, cy = 0;      // screen center at frame 0
  double size = 10;           // side length / diameter in pixels
  double vx = 0, vy = 0;      // world velocity, pixels per frame
  double intensity = 0.9;     // flat gray value in [0,1]
  int depth = 0;              // larger is closer to the camera

  bool moving() const { return vx != 0.0 || vy != 0.0; }
};

struct BackgroundSpec {
  double base = 0.35;
  double amplitude = 0.15;  // value-noise texture amplitude
  double smooth_px = 5.0;   // lattice spacing of the noise
};

struct SceneSpec {
  std::size_t width = 48;
  std::size_t height = 48;
  std::size_t frames = 3;  // K+1: K training frames plus the closing frame
  double camera_vx = 0, camera_vy = 0;
  double contrast_threshold = 0.18;  // log-intensity step per event
  std::uint64_t frame_dt_us = 10000;
  std::uint64_t rng_seed = 0;  // drives the background texture
  BackgroundSpec background;
  std::vector<Sprite> sprites;
};

struct SceneSample {
  struct Instance {
    int sprite_index = 0;               // 0-based index into spec.sprites
    std::vector<std::uint8_t> mask;     // H*W binary, visible pixels only
    bool moving = false;                // world-velocity flag, camera excluded
  };

  SceneSpec spec;
  std::vector<Image> frames;                        // frames 0..K
  std::vector<EventSlice> events;                   // K inter-frame slices
  std::vector<std::vector<Instance>> gt_instances;  // per frame, visible objects
  std::vector<FlowField> gt_flow;                   // K fields, interval k -> k+1
};

// Deterministic given the spec; throws ValidationError when a sprite leaves
// the canvas or moves faster than a quarter of its size per frame.
SceneSample generate_scene(const SceneSpec& spec);

// Ideal per-pixel contrast-threshold model: an event fires each time the
// linearly interpolated log intensity crosses a multiple of C, with polarity
// the sign of the change. The returned slice window is [t_a, t_b].
EventSlice emit_events(const Image& frame_a, const Image& frame_b, std::uint64_t t_a, std::uint64_t t_b,
                       double contrast_threshold);

// Dense screen flow for the interval frame -> frame+1.
FlowField gt_flow(const SceneSpec& spec, std::size_t frame);

// Rendering helpers shared with tests.
Image render_frame(const SceneSpec& spec, std::size_t frame);
int topmost_sprite_at(const SceneSpec& spec, std::size_t frame, double px, double py);  // -1 = background

}  // namespace evseg
