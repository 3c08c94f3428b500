#include "evseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;
using nlohmann::json;

namespace evseg {

namespace {

void read_background(const json& j, BackgroundSpec& bg) {
  bg.base = j.value("base", bg.base);
  bg.amplitude = j.value("amplitude", bg.amplitude);
  bg.smooth_px = j.value("smooth_px", bg.smooth_px);
}

std::pair<double, double> range2(const json& j, const char* key, double lo, double hi) {
  if (!j.contains(key)) return {lo, hi};
  const auto& v = j.at(key);
  if (!v.is_array() || v.size() != 2) throw ValidationError(std::string("spec: '") + key + "' must be [lo, hi]");
  return {v[0].get<double>(), v[1].get<double>()};
}

SceneSpec scene_from_json(const json& j) {
  SceneSpec s;
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  s.frames = j.value("frames", s.frames);
  if (j.contains("camera_velocity")) {
    s.camera_vx = j.at("camera_velocity").at(0).get<double>();
    s.camera_vy = j.at("camera_velocity").at(1).get<double>();
  }
  s.contrast_threshold = j.value("contrast_threshold", s.contrast_threshold);
  s.frame_dt_us = j.value("frame_dt_us", s.frame_dt_us);
  s.rng_seed = j.value("rng_seed", s.rng_seed);
  if (j.contains("background")) read_background(j.at("background"), s.background);
  for (const auto& js : j.value("sprites", json::array())) {
    Sprite sp;
    const std::string kind = js.value("kind", "rectangle");
    if (kind == "rectangle") {
      sp.kind = Sprite::Kind::kRectangle;
    } else if (kind == "disk") {
      sp.kind = Sprite::Kind::kDisk;
    } else {
      throw ValidationError("spec: unknown sprite kind '" + kind + "'");
    }
    sp.cx = js.at("center").at(0).get<double>();
    sp.cy = js.at("center").at(1).get<double>();
    sp.size = js.at("size").get<double>();
    if (js.contains("velocity")) {
      sp.vx = js.at("velocity").at(0).get<double>();
      sp.vy = js.at("velocity").at(1).get<double>();
    }
    sp.intensity = js.value("intensity", sp.intensity);
    sp.depth = js.value("depth", static_cast<int>(s.sprites.size()));
    s.sprites.push_back(sp);
  }
  return s;
}

SceneDistribution distribution_from_json(const json& j) {
  SceneDistribution d;
  d.width = j.value("width", d.width);
  d.height = j.value("height", d.height);
  d.frames = j.value("frames", d.frames);
  std::tie(d.num_moving_min, d.num_moving_max) = [&] {
    auto [a, b] = range2(j, "num_moving", d.num_moving_min, d.num_moving_max);
    return std::make_pair(static_cast<int>(a), static_cast<int>(b));
  }();
  std::tie(d.num_static_min, d.num_static_max) = [&] {
    auto [a, b] = range2(j, "num_static", d.num_static_min, d.num_static_max);
    return std::make_pair(static_cast<int>(a), static_cast<int>(b));
  }();
  std::tie(d.camera_speed_min, d.camera_speed_max) = range2(j, "camera_speed", d.camera_speed_min, d.camera_speed_max);
  std::tie(d.moving_speed_min, d.moving_speed_max) = range2(j, "moving_speed", d.moving_speed_min, d.moving_speed_max);
  std::tie(d.sprite_size_min, d.sprite_size_max) = range2(j, "sprite_size", d.sprite_size_min, d.sprite_size_max);
  std::tie(d.intensity_min, d.intensity_max) = range2(j, "intensity", d.intensity_min, d.intensity_max);
  d.min_spacing = j.value("min_spacing", d.min_spacing);
  d.contrast_threshold = j.value("contrast_threshold", d.contrast_threshold);
  d.frame_dt_us = j.value("frame_dt_us", d.frame_dt_us);
  if (j.contains("background")) read_background(j.at("background"), d.background);
  if (d.num_moving_min < 0 || d.num_moving_max > 4) throw ValidationError("spec: num_moving must be within 0..4");
  if (d.num_static_min < 0 || d.num_static_max > 2) throw ValidationError("spec: num_static must be within 0..2");
  return d;
}

}  // namespace

SimulateSpec load_simulate_spec(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  json j;
  try {
    is >> j;
  } catch (const json::parse_error& e) {
    throw ValidationError("spec: invalid JSON: " + std::string(e.what()));
  }
  SimulateSpec out;
  if (j.contains("sprites")) {
    out.explicit_scene = true;
    out.scene = scene_from_json(j);
  } else {
    out.dist = distribution_from_json(j);
  }
  return out;
}

SceneSpec sample_scene_spec(const SceneDistribution& dist, Rng& rng) {
  SceneSpec spec;
  spec.width = dist.width;
  spec.height = dist.height;
  spec.frames = dist.frames;
  spec.contrast_threshold = dist.contrast_threshold;
  spec.frame_dt_us = dist.frame_dt_us;
  spec.background = dist.background;
  spec.rng_seed = rng.next_u64();

  const double cam_angle = rng.uniform(0.0, 6.283185307179586);
  const double cam_speed = rng.uniform(dist.camera_speed_min, dist.camera_speed_max);
  spec.camera_vx = cam_speed * std::cos(cam_angle);
  spec.camera_vy = cam_speed * std::sin(cam_angle);

  const int n_moving = static_cast<int>(rng.integer(dist.num_moving_min, dist.num_moving_max));
  const int n_static = static_cast<int>(rng.integer(dist.num_static_min, dist.num_static_max));
  const double kmax = static_cast<double>(dist.frames - 1);

  for (int i = 0; i < n_moving + n_static; ++i) {
    const bool is_moving = i < n_moving;
    bool placed = false;
    for (int attempt = 0; attempt < 300 && !placed; ++attempt) {
      // progressively relax the spacing requirement rather than giving up
      const double spacing = dist.min_spacing * (attempt < 100 ? 1.0 : (attempt < 200 ? 0.5 : 0.0));
      Sprite s;
      s.kind = rng.uniform() < 0.5 ? Sprite::Kind::kRectangle : Sprite::Kind::kDisk;
      s.size = rng.uniform(dist.sprite_size_min, dist.sprite_size_max);
      s.intensity = rng.uniform(dist.intensity_min, dist.intensity_max);
      s.depth = i;
      if (is_moving) {
        const double angle = rng.uniform(0.0, 6.283185307179586);
        const double speed = rng.uniform(dist.moving_speed_min, dist.moving_speed_max);
        s.vx = speed * std::cos(angle);
        s.vy = speed * std::sin(angle);
      }
      const double svx = s.vx - spec.camera_vx, svy = s.vy - spec.camera_vy;
      if (std::hypot(svx, svy) > 0.25 * s.size) continue;
      // admissible start range so the whole trajectory stays inside
      const double r = s.size * 0.5;
      const double x_lo = r + std::max(0.0, -kmax * svx), x_hi = (spec.width - 1) - r - std::max(0.0, kmax * svx);
      const double y_lo = r + std::max(0.0, -kmax * svy), y_hi = (spec.height - 1) - r - std::max(0.0, kmax * svy);
      if (x_lo >= x_hi || y_lo >= y_hi) continue;
      s.cx = rng.uniform(x_lo, x_hi);
      s.cy = rng.uniform(y_lo, y_hi);
      bool clear = true;
      for (const Sprite& other : spec.sprites) {
        const double need = spacing * 0.5 * (s.size + other.size);
        // spacing over the whole trajectory keeps occlusions rare
        for (std::size_t k = 0; k < dist.frames && clear; ++k) {
          const double ax = s.cx + k * (s.vx - spec.camera_vx), ay = s.cy + k * (s.vy - spec.camera_vy);
          const double bx = other.cx + k * (other.vx - spec.camera_vx), by = other.cy + k * (other.vy - spec.camera_vy);
          if (std::hypot(ax - bx, ay - by) < need) clear = false;
        }
      }
      if (!clear) continue;
      spec.sprites.push_back(s);
      placed = true;
    }
    if (!placed) throw ValidationError("sample_scene_spec: could not place a feasible sprite");
  }
  return spec;
}

void write_scene_dir(const SceneSample& sample, const std::string& dir) {
  fs::create_directories(dir);
  const std::size_t W = sample.spec.width, H = sample.spec.height;
  for (std::size_t k = 0; k < sample.frames.size(); ++k) {
    write_pgm(dir + "/frame_" + std::to_string(k) + ".pgm", sample.frames[k]);
    IdMap ids;
    ids.width = W;
    ids.height = H;
    ids.ids.assign(W * H, 0);
    std::ofstream flags(dir + "/flags_" + std::to_string(k) + ".txt");
    if (!flags) throw IoError("cannot write flags in " + dir);
    for (const auto& inst : sample.gt_instances[k]) {
      const auto id = static_cast<std::uint8_t>(inst.sprite_index + 1);
      for (std::size_t p = 0; p < inst.mask.size(); ++p)
        if (inst.mask[p]) ids.ids[p] = id;
      flags << static_cast<int>(id) << " " << (inst.moving ? 1 : 0) << "\n";
    }
    write_pgm_ids(dir + "/mask_" + std::to_string(k) + ".pgm", ids);
  }
  for (std::size_t k = 0; k < sample.events.size(); ++k) {
    write_events_binary(sample.events[k], dir + "/events_" + std::to_string(k) + ".evt");
    write_flo(dir + "/flow_" + std::to_string(k) + ".flo", sample.gt_flow[k]);
  }
}

LoadedScene read_scene_dir(const std::string& dir) {
  LoadedScene scene;
  scene.dir = dir;
  for (std::size_t k = 0;; ++k) {
    const std::string frame = dir + "/frame_" + std::to_string(k) + ".pgm";
    if (!fs::exists(frame)) break;
    scene.frames.push_back(read_pgm(frame));
    const std::string mask = dir + "/mask_" + std::to_string(k) + ".pgm";
    if (fs::exists(mask)) scene.masks.push_back(read_pgm_ids(mask));
    std::vector<std::pair<int, int>> fl;
    const std::string flags = dir + "/flags_" + std::to_string(k) + ".txt";
    if (fs::exists(flags)) {
      std::ifstream is(flags);
      int id = 0, moving = 0;
      while (is >> id >> moving) fl.emplace_back(id, moving);
    }
    scene.flags.push_back(std::move(fl));
  }
  if (scene.frames.empty()) throw IoError("no frames found in " + dir);
  for (std::size_t k = 0; k + 1 < scene.frames.size(); ++k) {
    const std::string ev = dir + "/events_" + std::to_string(k) + ".evt";
    if (!fs::exists(ev)) break;
    scene.events.push_back(load_events_binary(ev));
    const std::string flo = dir + "/flow_" + std::to_string(k) + ".flo";
    if (fs::exists(flo)) scene.flows.push_back(read_flo(flo));
  }
  return scene;
}

std::vector<std::string> list_scene_dirs(const std::string& root) {
  if (!fs::is_directory(root)) throw IoError("not a directory: " + root);
  std::vector<std::string> dirs;
  for (const auto& entry : fs::directory_iterator(root))
    if (entry.is_directory() && entry.path().filename().string().rfind("scene_", 0) == 0)
      dirs.push_back(entry.path().string());
  std::sort(dirs.begin(), dirs.end(), [](const std::string& a, const std::string& b) {
    auto num = [](const std::string& p) {
      const auto name = fs::path(p).filename().string();
      try {
        return std::stoll(name.substr(6));
      } catch (...) {
        return static_cast<long long>(-1);
      }
    };
    const auto na = num(a), nb = num(b);
    return na != nb ? na < nb : a < b;
  });
  return dirs;
}

}  // namespace evseg

namespace evseg {

void write_prediction(const std::string& dir, const std::string& id, const Prediction& pred) {
  fs::create_directories(dir);
  IdMap map;
  map.width = pred.width;
  map.height = pred.height;
  map.ids = pred.id_map;
  write_pgm_ids(dir + "/pred_" + id + ".pgm", map);
  json items = json::array();
  for (std::size_t k = 0; k < pred.instances.size(); ++k)
    items.push_back({{"id", k + 1},
                     {"embedding", pred.instances[k].embedding},
                     {"prob", pred.instances[k].prob}});
  std::ofstream os(dir + "/pred_" + id + ".json");
  if (!os) throw IoError("cannot write prediction json in " + dir);
  os << items.dump(2) << "\n";
}

Prediction read_prediction(const std::string& dir, const std::string& id) {
  Prediction pred;
  IdMap map = read_pgm_ids(dir + "/pred_" + id + ".pgm");
  pred.width = map.width;
  pred.height = map.height;
  pred.id_map = std::move(map.ids);
  std::ifstream is(dir + "/pred_" + id + ".json");
  if (!is) throw IoError("missing prediction json for id " + id + " in " + dir);
  json items;
  is >> items;
  pred.instances.resize(items.size());
  for (const auto& it : items) {
    const std::size_t k = it.at("id").get<std::size_t>();
    if (k == 0 || k > pred.instances.size()) throw ValidationError("prediction json: bad instance id");
    pred.instances[k - 1].embedding = it.value("embedding", 0);
    pred.instances[k - 1].prob = it.at("prob").get<double>();
  }
  return pred;
}

bool prediction_exists(const std::string& dir, const std::string& id) {
  return fs::exists(dir + "/pred_" + id + ".pgm") && fs::exists(dir + "/pred_" + id + ".json");
}

}  // namespace evseg
