#pragma once

// Dataset directory layout, one scene per directory:
//   scene_<id>/frame_<k>.pgm   8-bit grayscale frames 0..K
//   scene_<id>/mask_<k>.pgm    instance-id map (0 background)
//   scene_<id>/flags_<k>.txt   one "id flag" pair per line
//   scene_<id>/events_<k>.evt  EVT0 slice for interval k -> k+1
//   scene_<id>/flow_<k>.flo    Middlebury flow for interval k -> k+1

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "evseg/common.hpp"
#include "evseg/synth.hpp"

namespace evseg {

// Randomized scene family for dataset generation. Defaults keep sprites
// well separated, clearly brighter than the background, and moving sprites
// clearly faster than the camera pan.
struct SceneDistribution {
  std::size_t width = 48, height = 48, frames = 3;
  int num_moving_min = 1, num_moving_max = 3;
  int num_static_min = 1, num_static_max = 1;
  double camera_speed_min = 0.2, camera_speed_max = 0.6;
  double moving_speed_min = 1.0, moving_speed_max = 2.0;
  double sprite_size_min = 14, sprite_size_max = 20;
  double intensity_min = 0.65, intensity_max = 1.0;
  double min_spacing = 0.8;  // of the mean sprite size, between centers
  double contrast_threshold = 0.18;
  std::uint64_t frame_dt_us = 10000;
  BackgroundSpec background;
};

struct SimulateSpec {
  bool explicit_scene = false;
  SceneSpec scene;         // valid when explicit_scene
  SceneDistribution dist;  // otherwise
};

SimulateSpec load_simulate_spec(const std::string& path);

// Draws a feasible spec; throws ValidationError after too many rejections.
SceneSpec sample_scene_spec(const SceneDistribution& dist, Rng& rng);

void write_scene_dir(const SceneSample& sample, const std::string& dir);

struct LoadedScene {
  std::string dir;
  std::vector<Image> frames;
  std::vector<EventSlice> events;
  std::vector<IdMap> masks;                            // per frame
  std::vector<std::vector<std::pair<int, int>>> flags;  // per frame: (id, moving)
  std::vector<FlowField> flows;
};

LoadedScene read_scene_dir(const std::string& dir);

// Sorted scene_* subdirectory paths under root.
std::vector<std::string> list_scene_dirs(const std::string& root);

// Prediction archive: pred_<id>.pgm holds instance ids (instance k is id
// k+1; overlaps resolved upstream) and pred_<id>.json lists per-instance
// embedding index and moving probability.
struct Prediction {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> id_map;
  struct Item {
    std::size_t embedding = 0;
    double prob = 0;
  };
  std::vector<Item> instances;

  std::vector<std::uint8_t> mask_of(std::size_t k) const {
    std::vector<std::uint8_t> m(id_map.size(), 0);
    for (std::size_t i = 0; i < id_map.size(); ++i) m[i] = id_map[i] == k + 1;
    return m;
  }
};

void write_prediction(const std::string& dir, const std::string& id, const Prediction& pred);
Prediction read_prediction(const std::string& dir, const std::string& id);
bool prediction_exists(const std::string& dir, const std::string& id);

}  // namespace evseg
