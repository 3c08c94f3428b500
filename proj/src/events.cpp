#include "evseg/events.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <thread>

#include "evseg/common.hpp"

namespace evseg {

namespace {

void put_raw(std::ostream& os, const void* p, std::size_t n) {
  os.write(reinterpret_cast<const char*>(p), static_cast<std::streamsize>(n));
}

template <class T>
T get_raw(std::istream& is, const char* what) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError(std::string("truncated file: ") + what);
  return v;
}

void validate_event(const Event& e, std::uint32_t w, std::uint32_t h, const std::string& where) {
  if (e.x >= w) throw ValidationError("x out of bounds " + where);
  if (e.y >= h) throw ValidationError("y out of bounds " + where);
  if (e.p != 1 && e.p != -1) throw ValidationError("bad polarity " + where);
}

void finalize_slice(EventSlice& s) {
  std::stable_sort(s.events.begin(), s.events.end(),
                   [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  if (s.events.empty()) {
    s.t_start = 0;
    s.t_end = 0;
  } else {
    s.t_start = s.events.front().t_us;
    s.t_end = s.events.back().t_us;
  }
}

}  // namespace

EventSlice load_events_text(const std::string& path, std::uint32_t width, std::uint32_t height) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open: " + path);
  EventSlice slice;
  slice.width = width;
  slice.height = height;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    std::istringstream ls(line);
    std::string t_tok;
    long long x = -1, y = -1, p = -2;
    if (!(ls >> t_tok >> x >> y >> p)) throw ValidationError("malformed line " + std::to_string(lineno));
    std::string extra;
    if (ls >> extra) throw ValidationError("malformed line " + std::to_string(lineno));

    Event e;
    try {
      // a decimal point or exponent marks seconds; plain integers are microseconds
      if (t_tok.find_first_of(".eE") != std::string::npos) {
        const double secs = std::stod(t_tok);
        if (secs < 0) throw ValidationError("negative timestamp at line " + std::to_string(lineno));
        e.t_us = static_cast<std::uint64_t>(std::llround(secs * 1e6));
      } else {
        const long long us = std::stoll(t_tok);
        if (us < 0) throw ValidationError("negative timestamp at line " + std::to_string(lineno));
        e.t_us = static_cast<std::uint64_t>(us);
      }
    } catch (const std::invalid_argument&) {
      throw ValidationError("malformed line " + std::to_string(lineno));
    } catch (const std::out_of_range&) {
      throw ValidationError("malformed line " + std::to_string(lineno));
    }
    if (x < 0 || x >= static_cast<long long>(width))
      throw ValidationError("x out of bounds at line " + std::to_string(lineno));
    if (y < 0 || y >= static_cast<long long>(height))
      throw ValidationError("y out of bounds at line " + std::to_string(lineno));
    if (p != -1 && p != 0 && p != 1) throw ValidationError("bad polarity at line " + std::to_string(lineno));
    e.x = static_cast<std::uint16_t>(x);
    e.y = static_cast<std::uint16_t>(y);
    e.p = static_cast<std::int8_t>(p == 0 ? -1 : p);
    slice.events.push_back(e);
  }
  finalize_slice(slice);
  return slice;
}

void write_events_binary(const EventSlice& slice, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  os.write("EVT0", 4);
  put_raw(os, &slice.width, 4);
  put_raw(os, &slice.height, 4);
  put_raw(os, &slice.t_start, 8);
  put_raw(os, &slice.t_end, 8);
  const std::uint64_t count = slice.events.size();
  put_raw(os, &count, 8);
  for (const Event& e : slice.events) {
    put_raw(os, &e.t_us, 8);
    put_raw(os, &e.x, 2);
    put_raw(os, &e.y, 2);
    put_raw(os, &e.p, 1);
  }
  if (!os) throw IoError("event write failed: " + path);
}

EventSlice load_events_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "EVT0", 4) != 0) throw IoError("bad magic: expected EVT0");
  EventSlice slice;
  slice.width = get_raw<std::uint32_t>(is, "width");
  slice.height = get_raw<std::uint32_t>(is, "height");
  slice.t_start = get_raw<std::uint64_t>(is, "t_start");
  slice.t_end = get_raw<std::uint64_t>(is, "t_end");
  const auto count = get_raw<std::uint64_t>(is, "count");
  slice.events.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    Event e;
    e.t_us = get_raw<std::uint64_t>(is, "event record");
    e.x = get_raw<std::uint16_t>(is, "event record");
    e.y = get_raw<std::uint16_t>(is, "event record");
    e.p = get_raw<std::int8_t>(is, "event record");
    validate_event(e, slice.width, slice.height, "in record " + std::to_string(i));
    slice.events.push_back(e);
  }
  if (is.peek() != std::char_traits<char>::eof()) throw IoError("count mismatch: trailing data");
  for (std::size_t i = 0; i + 1 < slice.events.size(); ++i)
    if (slice.events[i].t_us > slice.events[i + 1].t_us) throw ValidationError("events not sorted by time");
  for (const Event& e : slice.events)
    if (e.t_us < slice.t_start || e.t_us > slice.t_end)
      throw ValidationError("event timestamp outside slice window");
  return slice;
}

EventSlice slice_by_time(const EventSlice& slice, std::uint64_t t0, std::uint64_t t1) {
  if (t0 > t1) throw ValidationError("slice_by_time: inverted bounds");
  if (t0 < slice.t_start || t1 > slice.t_end)
    throw ValidationError("slice_by_time: bounds outside the slice window");
  EventSlice out;
  out.width = slice.width;
  out.height = slice.height;
  out.t_start = t0;
  out.t_end = t1;
  auto lo = std::lower_bound(slice.events.begin(), slice.events.end(), t0,
                             [](const Event& e, std::uint64_t t) { return e.t_us < t; });
  auto hi = std::upper_bound(slice.events.begin(), slice.events.end(), t1,
                             [](std::uint64_t t, const Event& e) { return t < e.t_us; });
  out.events.assign(lo, hi);
  return out;
}

namespace {

void voxelize_range(const Event* ev, std::size_t n, std::uint64_t t1, std::uint64_t tn, std::size_t bins,
                    std::size_t width, double* grid) {
  const double denom = static_cast<double>(tn - t1);
  const double span = static_cast<double>(bins - 1);
  for (std::size_t i = 0; i < n; ++i) {
    const Event& e = ev[i];
    const double tstar = denom > 0 ? (static_cast<double>(e.t_us - t1) / denom) * span : 0.0;
    const double fb = std::floor(tstar);
    const std::size_t base = (static_cast<std::size_t>(e.y) * width + e.x) * bins;
    const auto b0 = static_cast<std::ptrdiff_t>(fb);
    for (std::ptrdiff_t b = b0; b <= b0 + 1; ++b) {
      if (b < 0 || b >= static_cast<std::ptrdiff_t>(bins)) continue;
      const double w = 1.0 - std::abs(static_cast<double>(b) - tstar);
      if (w > 0) grid[base + static_cast<std::size_t>(b)] += static_cast<double>(e.p) * w;
    }
  }
}

}  // namespace

VoxelGrid voxelize(const EventSlice& slice, std::size_t bins, unsigned threads) {
  if (bins < 1) throw ValidationError("voxelize: bins must be >= 1");
  VoxelGrid grid;
  grid.height = slice.height;
  grid.width = slice.width;
  grid.bins = bins;
  grid.data.assign(static_cast<std::size_t>(slice.height) * slice.width * bins, 0.0);
  if (slice.events.empty()) return grid;

  const std::uint64_t t1 = slice.events.front().t_us;
  const std::uint64_t tn = slice.events.back().t_us;
  const std::size_t n = slice.events.size();

  if (threads <= 1 || n < 4096) {
    voxelize_range(slice.events.data(), n, t1, tn, bins, grid.width, grid.data.data());
    return grid;
  }

  const std::size_t nw = std::min<std::size_t>(threads, 16);
  std::vector<std::vector<double>> partial(nw, std::vector<double>(grid.data.size(), 0.0));
  std::vector<std::thread> workers;
  const std::size_t chunk = (n + nw - 1) / nw;
  for (std::size_t w = 0; w < nw; ++w) {
    const std::size_t lo = w * chunk;
    const std::size_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    workers.emplace_back([&, w, lo, hi] {
      voxelize_range(slice.events.data() + lo, hi - lo, t1, tn, bins, grid.width, partial[w].data());
    });
  }
  for (auto& t : workers) t.join();
  for (std::size_t w = 0; w < nw; ++w)
    for (std::size_t i = 0; i < grid.data.size(); ++i) grid.data[i] += partial[w][i];
  return grid;
}

EventMask event_mask(const EventSlice& slice) {
  EventMask m;
  m.height = slice.height;
  m.width = slice.width;
  m.data.assign(static_cast<std::size_t>(slice.height) * slice.width, 0);
  for (const Event& e : slice.events) m.data[static_cast<std::size_t>(e.y) * slice.width + e.x] = 1;
  return m;
}

}  // namespace evseg
