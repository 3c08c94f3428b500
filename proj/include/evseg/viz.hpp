#pragma once

// Visualization helpers: dense flow rendered with a hue wheel centered at
// mid-gray (zero flow = uniform gray), and color-coded instance overlays.

#include <cstdint>
#include <vector>

#include "evseg/image_io.hpp"

namespace evseg {

// max_magnitude <= 0 selects auto-scaling by the field's own maximum.
std::vector<std::uint8_t> flow_to_rgb(const FlowField& flow, double max_magnitude = 0);

// Instance ids (0 = background) blended over a grayscale image.
std::vector<std::uint8_t> overlay_instances(const Image& base, const std::vector<std::uint8_t>& ids,
                                            double alpha = 0.55);

// Saturated palette color for instance id k (k >= 1).
void instance_color(std::size_t id, std::uint8_t rgb[3]);

}  // namespace evseg
