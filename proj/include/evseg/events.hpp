#pragma once

// Event-stream ingestion and tensorization: time slicing, the B-bin
// polarity-signed voxel grid with linear temporal interpolation, and the
// binary fired-pixel mask.

#include <cstdint>
#include <string>
#include <vector>

#include "evseg/tensor.hpp"

namespace evseg {

struct Event {
  std::uint64_t t_us = 0;
  std::uint16_t x = 0;
  std::uint16_t y = 0;
  std::int8_t p = 1;  // +1 or -1
};

struct EventSlice {
  std::uint32_t width = 0;
  std::uint32_t height = 0;
  std::uint64_t t_start = 0;
  std::uint64_t t_end = 0;
  std::vector<Event> events;  // sorted by t_us, all within [t_start, t_end]

  std::uint64_t duration_us() const { return t_end - t_start; }
};

struct VoxelGrid {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t bins = 0;
  std::vector<double> data;  // index (y*width + x)*bins + b

  double at(std::size_t x, std::size_t y, std::size_t b) const {
    return data[(y * width + x) * bins + b];
  }
  double total() const {
    double s = 0;
    for (double v : data) s += v;
    return s;
  }

  // Channels-first view for the model: bins x H x W.
  template <class S>
  Tensor<S> to_tensor_chw() const {
    std::vector<S> out(bins * height * width);
    for (std::size_t y = 0; y < height; ++y)
      for (std::size_t x = 0; x < width; ++x)
        for (std::size_t b = 0; b < bins; ++b)
          out[(b * height + y) * width + x] = static_cast<S>(data[(y * width + x) * bins + b]);
    return Tensor<S>::from_vector({bins, height, width}, std::move(out));
  }
};

struct EventMask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> data;  // y*width + x, 1 where any event fired

  template <class S>
  Tensor<S> to_tensor() const {
    std::vector<S> out(height * width);
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<S>(data[i]);
    return Tensor<S>::from_vector({1, height, width}, std::move(out));
  }
};

// Text lines "t x y p"; t is integer microseconds, or seconds when written
// with a decimal point / exponent; p in {-1, 0, 1} with 0 remapped to -1.
EventSlice load_events_text(const std::string& path, std::uint32_t width, std::uint32_t height);

// Binary "EVT0": magic, u32 W, u32 H, u64 t_start, u64 t_end, u64 count,
// then count records of (u64 t_us, u16 x, u16 y, i8 p), little-endian.
void write_events_binary(const EventSlice& slice, const std::string& path);
EventSlice load_events_binary(const std::string& path);

// Events with t in the closed interval [t0, t1]; requires
// t_start <= t0 <= t1 <= t_end.
EventSlice slice_by_time(const EventSlice& slice, std::uint64_t t0, std::uint64_t t1);

// grid(x,y,b) = sum_i p_i * max(0, 1 - |b - (t_i - t_1)/(t_N - t_1) * (B-1)|)
// where t_1, t_N are the first/last event timestamps. A zero-duration slice
// puts all mass in bin 0. Accumulation is in double. With threads > 1 the
// events are partitioned into contiguous chunks whose partial grids are
// summed in chunk order, so the result is deterministic per thread count.
VoxelGrid voxelize(const EventSlice& slice, std::size_t bins, unsigned threads = 1);

EventMask event_mask(const EventSlice& slice);

}  // namespace evseg
