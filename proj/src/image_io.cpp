#include "evseg/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "evseg/common.hpp"

namespace evseg {

namespace {

// skips whitespace and '#' comment lines between header tokens
int next_header_int(std::istream& is, const std::string& path) {
  while (true) {
    const int c = is.peek();
    if (c == EOF) throw IoError("truncated header: " + path);
    if (std::isspace(c)) {
      is.get();
    } else if (c == '#') {
      std::string skip;
      std::getline(is, skip);
    } else {
      break;
    }
  }
  int v = -1;
  if (!(is >> v)) throw IoError("bad header: " + path);
  return v;
}

std::vector<std::uint8_t> read_p5(const std::string& path, std::size_t& w, std::size_t& h) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char m0 = 0, m1 = 0;
  is.get(m0);
  is.get(m1);
  if (m0 != 'P' || m1 != '5') throw IoError("bad magic: expected P5 in " + path);
  const int iw = next_header_int(is, path);
  const int ih = next_header_int(is, path);
  const int maxval = next_header_int(is, path);
  if (iw <= 0 || ih <= 0 || maxval != 255) throw IoError("unsupported PGM header: " + path);
  is.get();  // single whitespace after maxval
  w = static_cast<std::size_t>(iw);
  h = static_cast<std::size_t>(ih);
  std::vector<std::uint8_t> raw(w * h);
  if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
    throw IoError("truncated PGM payload: " + path);
  return raw;
}

void write_p5(const std::string& path, std::size_t w, std::size_t h, const std::uint8_t* raw) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P5\n" << w << " " << h << "\n255\n";
  os.write(reinterpret_cast<const char*>(raw), static_cast<std::streamsize>(w * h));
  if (!os) throw IoError("PGM write failed: " + path);
}

}  // namespace

void write_pgm(const std::string& path, const Image& img) {
  std::vector<std::uint8_t> raw(img.width * img.height);
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = std::clamp(img.data[i], 0.0, 1.0);
    raw[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_p5(path, img.width, img.height, raw.data());
}

Image read_pgm(const std::string& path) {
  Image img;
  auto raw = read_p5(path, img.width, img.height);
  img.data.resize(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) img.data[i] = raw[i] / 255.0;
  return img;
}

void write_pgm_ids(const std::string& path, const IdMap& map) {
  write_p5(path, map.width, map.height, map.ids.data());
}

IdMap read_pgm_ids(const std::string& path) {
  IdMap map;
  map.ids = read_p5(path, map.width, map.height);
  return map;
}

void write_ppm(const std::string& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& rgb) {
  if (rgb.size() != width * height * 3) throw ValidationError("write_ppm: size mismatch");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os << "P6\n" << width << " " << height << "\n255\n";
  os.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
  if (!os) throw IoError("PPM write failed: " + path);
}

void write_flo(const std::string& path, const FlowField& flow) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("PIEH", 4);
  const std::int32_t w = static_cast<std::int32_t>(flow.width);
  const std::int32_t h = static_cast<std::int32_t>(flow.height);
  os.write(reinterpret_cast<const char*>(&w), 4);
  os.write(reinterpret_cast<const char*>(&h), 4);
  os.write(reinterpret_cast<const char*>(flow.uv.data()), static_cast<std::streamsize>(flow.uv.size() * 4));
  if (!os) throw IoError("flo write failed: " + path);
}

FlowField read_flo(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "PIEH", 4) != 0)
    throw IoError("bad magic: expected PIEH in " + path);
  std::int32_t w = 0, h = 0;
  if (!is.read(reinterpret_cast<char*>(&w), 4) || !is.read(reinterpret_cast<char*>(&h), 4))
    throw IoError("truncated flo header: " + path);
  if (w <= 0 || h <= 0) throw IoError("bad flo dimensions: " + path);
  FlowField flow;
  flow.width = static_cast<std::size_t>(w);
  flow.height = static_cast<std::size_t>(h);
  flow.uv.resize(flow.width * flow.height * 2);
  if (!is.read(reinterpret_cast<char*>(flow.uv.data()), static_cast<std::streamsize>(flow.uv.size() * 4)))
    throw IoError("truncated flo payload: " + path);
  return flow;
}

}  // namespace evseg
