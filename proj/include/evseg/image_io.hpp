#pragma once

// Grayscale images in [0,1], 8-bit PGM (P5) on disk; instance-id maps reuse
// PGM with raw pixel values; dense flow uses the Middlebury .flo layout
// ("PIEH", i32 W, i32 H, interleaved float u,v).

#include <cstdint>
#include <string>
#include <vector>

namespace evseg {

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> data;  // y*width + x, values in [0,1]

  double at(std::size_t x, std::size_t y) const { return data[y * width + x]; }
  double& at(std::size_t x, std::size_t y) { return data[y * width + x]; }
};

struct IdMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> ids;  // 0 = background
};

struct FlowField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<float> uv;  // (y*width + x)*2 + {0: u, 1: v}

  float u(std::size_t x, std::size_t y) const { return uv[(y * width + x) * 2]; }
  float v(std::size_t x, std::size_t y) const { return uv[(y * width + x) * 2 + 1]; }
};

void write_pgm(const std::string& path, const Image& img);
Image read_pgm(const std::string& path);

void write_pgm_ids(const std::string& path, const IdMap& map);
IdMap read_pgm_ids(const std::string& path);

// rgb is (y*width + x)*3 + channel, 8-bit
void write_ppm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& rgb);

void write_flo(const std::string& path, const FlowField& flow);
FlowField read_flo(const std::string& path);

}  // namespace evseg
