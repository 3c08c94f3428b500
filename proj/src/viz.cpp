#include "evseg/viz.hpp"

#include <algorithm>
#include <cmath>

#include "evseg/common.hpp"

namespace evseg {

namespace {

// hue in [0,1) -> rgb direction in [-1,1]^3
void hue_dir(double hue, double dir[3]) {
  const double h6 = hue * 6.0;
  auto tri = [&](double center) {
    double d = std::abs(std::fmod(h6 - center + 6.0, 6.0));
    d = std::min(d, 6.0 - d);
    return std::clamp(2.0 - d, 0.0, 1.0) * 2.0 - 1.0;
  };
  dir[0] = tri(0.0);
  dir[1] = tri(2.0);
  dir[2] = tri(4.0);
}

}  // namespace

std::vector<std::uint8_t> flow_to_rgb(const FlowField& flow, double max_magnitude) {
  const std::size_t n = flow.width * flow.height;
  double scale = max_magnitude;
  if (scale <= 0) {
    for (std::size_t i = 0; i < n; ++i)
      scale = std::max(scale, static_cast<double>(std::hypot(flow.uv[2 * i], flow.uv[2 * i + 1])));
  }
  std::vector<std::uint8_t> rgb(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const double u = flow.uv[2 * i], v = flow.uv[2 * i + 1];
    const double mag = std::hypot(u, v);
    const double sat = scale > 0 ? std::min(1.0, mag / scale) : 0.0;
    const double hue = (std::atan2(-v, -u) / (2.0 * 3.141592653589793) + 0.5);
    double dir[3];
    hue_dir(hue, dir);
    for (int c = 0; c < 3; ++c) {
      const double val = 0.5 + 0.5 * sat * dir[c];
      rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(val, 0.0, 1.0) * 255.0));
    }
  }
  return rgb;
}

void instance_color(std::size_t id, std::uint8_t rgb[3]) {
  // golden-angle hue walk gives well-separated colors for small id counts
  const double hue = std::fmod(0.137 + 0.618033988749895 * static_cast<double>(id - 1), 1.0);
  double dir[3];
  hue_dir(hue, dir);
  for (int c = 0; c < 3; ++c)
    rgb[c] = static_cast<std::uint8_t>(std::lround(std::clamp(0.55 + 0.45 * dir[c], 0.0, 1.0) * 255.0));
}

std::vector<std::uint8_t> overlay_instances(const Image& base, const std::vector<std::uint8_t>& ids,
                                            double alpha) {
  if (ids.size() != base.width * base.height) throw ValidationError("overlay: id map size mismatch");
  std::vector<std::uint8_t> rgb(ids.size() * 3);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    const double g = std::clamp(base.data[i], 0.0, 1.0);
    if (ids[i] == 0) {
      for (int c = 0; c < 3; ++c) rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(g * 255.0));
    } else {
      std::uint8_t col[3];
      instance_color(ids[i], col);
      for (int c = 0; c < 3; ++c) {
        const double v = (1.0 - alpha) * g * 255.0 + alpha * col[c];
        rgb[i * 3 + c] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 255.0)));
      }
    }
  }
  return rgb;
}

}  // namespace evseg
