#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "evseg/common.hpp"
#include "evseg/events.hpp"

using namespace evseg;
namespace fs = std::filesystem;

namespace {

fs::path test_dir() {
  auto d = fs::temp_directory_path() / "evseg_events_test";
  fs::create_directories(d);
  return d;
}

std::string write_text(const std::string& name, const std::string& content) {
  auto p = (test_dir() / name).string();
  std::ofstream os(p);
  os << content;
  return p;
}

EventSlice make_slice(std::uint32_t w, std::uint32_t h, std::vector<Event> ev) {
  EventSlice s;
  s.width = w;
  s.height = h;
  std::sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.t_us < b.t_us; });
  s.events = std::move(ev);
  if (!s.events.empty()) {
    s.t_start = s.events.front().t_us;
    s.t_end = s.events.back().t_us;
  }
  return s;
}

EventSlice random_slice(Rng& rng, std::uint32_t w, std::uint32_t h, std::size_t n, std::uint64_t t_max) {
  std::vector<Event> ev(n);
  for (auto& e : ev) {
    e.t_us = static_cast<std::uint64_t>(rng.integer(0, static_cast<std::int64_t>(t_max)));
    e.x = static_cast<std::uint16_t>(rng.integer(0, w - 1));
    e.y = static_cast<std::uint16_t>(rng.integer(0, h - 1));
    e.p = rng.uniform() < 0.5 ? -1 : 1;
  }
  return make_slice(w, h, std::move(ev));
}

// Literal per-event, per-bin accumulation: the independent reference for the
// voxelizer. Evaluates the tent weight for every bin of every event.
VoxelGrid voxelize_reference(const EventSlice& s, std::size_t bins) {
  VoxelGrid g;
  g.height = s.height;
  g.width = s.width;
  g.bins = bins;
  g.data.assign(static_cast<std::size_t>(s.height) * s.width * bins, 0.0);
  if (s.events.empty()) return g;
  const double t1 = static_cast<double>(s.events.front().t_us);
  const double tn = static_cast<double>(s.events.back().t_us);
  for (const Event& e : s.events) {
    const double tstar = tn > t1 ? (static_cast<double>(e.t_us) - t1) / (tn - t1) * static_cast<double>(bins - 1) : 0.0;
    for (std::size_t b = 0; b < bins; ++b) {
      const double w = std::max(0.0, 1.0 - std::abs(static_cast<double>(b) - tstar));
      g.data[(static_cast<std::size_t>(e.y) * s.width + e.x) * bins + b] += static_cast<double>(e.p) * w;
    }
  }
  return g;
}

}  // namespace

TEST_CASE("text loader parses two events and computes the window") {
  auto p = write_text("two.txt", "0 0 0 1\n1000 1 0 -1\n");
  EventSlice s = load_events_text(p, 2, 1);
  REQUIRE(s.events.size() == 2);
  CHECK(s.duration_us() == 1000);
  CHECK(s.events[0].p == 1);
  CHECK(s.events[1].p == -1);
  CHECK(s.events[1].x == 1);
}

TEST_CASE("text loader: empty file gives empty slice, not an error") {
  auto p = write_text("empty.txt", "");
  EventSlice s = load_events_text(p, 4, 4);
  CHECK(s.events.empty());
  CHECK(s.duration_us() == 0);
}

TEST_CASE("text loader: out-of-bounds x reports the line number") {
  auto p = write_text("oob.txt", "5 9 0 1\n");
  CHECK_THROWS_WITH_AS(load_events_text(p, 2, 1), "x out of bounds at line 1", ValidationError);
}

TEST_CASE("text loader: malformed line, bad polarity, float seconds, zero polarity remap") {
  CHECK_THROWS_WITH_AS(load_events_text(write_text("bad1.txt", "12 0\n"), 2, 2), "malformed line 1",
                       ValidationError);
  CHECK_THROWS_AS(load_events_text(write_text("bad2.txt", "12 0 0 3\n"), 2, 2), ValidationError);
  EventSlice secs = load_events_text(write_text("secs.txt", "0.5 0 0 1\n"), 2, 2);
  CHECK(secs.events[0].t_us == 500000);
  EventSlice zero = load_events_text(write_text("zero.txt", "7 1 1 0\n"), 2, 2);
  CHECK(zero.events[0].p == -1);
}

TEST_CASE("text loader sorts by timestamp") {
  auto p = write_text("unsorted.txt", "900 0 0 1\n100 1 0 1\n500 0 1 -1\n");
  EventSlice s = load_events_text(p, 2, 2);
  CHECK(s.events[0].t_us == 100);
  CHECK(s.events[2].t_us == 900);
  CHECK(s.t_start == 100);
  CHECK(s.t_end == 900);
}

TEST_CASE("binary round trip is bit-identical") {
  Rng rng(101);
  EventSlice s = random_slice(rng, 31, 17, 500, 100000);
  auto p = (test_dir() / "rt.evt").string();
  write_events_binary(s, p);
  EventSlice back = load_events_binary(p);
  REQUIRE(back.events.size() == s.events.size());
  CHECK(back.width == s.width);
  CHECK(back.height == s.height);
  CHECK(back.t_start == s.t_start);
  CHECK(back.t_end == s.t_end);
  for (std::size_t i = 0; i < s.events.size(); ++i) {
    CHECK(back.events[i].t_us == s.events[i].t_us);
    CHECK(back.events[i].x == s.events[i].x);
    CHECK(back.events[i].y == s.events[i].y);
    CHECK(back.events[i].p == s.events[i].p);
  }
}

TEST_CASE("binary format: 2-event slice writes exactly 62 bytes") {
  EventSlice s = make_slice(2, 1, {{0, 0, 0, 1}, {1000, 1, 0, -1}});
  auto p = (test_dir() / "size.evt").string();
  write_events_binary(s, p);
  CHECK(fs::file_size(p) == 62);  // 4+4+4+8+8+8 header + 2*13 records
}

TEST_CASE("binary loader: bad magic and truncation") {
  auto p = (test_dir() / "badmagic.evt").string();
  {
    std::ofstream os(p, std::ios::binary);
    os.write("XXXX", 4);
  }
  CHECK_THROWS_WITH_AS(load_events_binary(p), "bad magic: expected EVT0", IoError);

  EventSlice s = make_slice(2, 1, {{0, 0, 0, 1}, {1000, 1, 0, -1}});
  auto p2 = (test_dir() / "trunc.evt").string();
  write_events_binary(s, p2);
  fs::resize_file(p2, 50);
  CHECK_THROWS_AS(load_events_binary(p2), IoError);
}

TEST_CASE("slice_by_time: identity, halves, point query, errors") {
  Rng rng(7);
  std::vector<Event> ev;
  for (int i = 0; i <= 1000; ++i) ev.push_back({static_cast<std::uint64_t>(i * 10), 0, 0, 1});
  EventSlice s = make_slice(1, 1, ev);

  EventSlice full = slice_by_time(s, s.t_start, s.t_end);
  CHECK(full.events.size() == s.events.size());
  CHECK(full.t_start == s.t_start);
  CHECK(full.t_end == s.t_end);

  // uniform events: half the window keeps about half the events (filter oracle)
  const std::uint64_t mid = s.t_start + s.duration_us() / 2;
  EventSlice half = slice_by_time(s, s.t_start, mid);
  std::size_t expect = 0;
  for (const Event& e : s.events)
    if (e.t_us >= s.t_start && e.t_us <= mid) ++expect;
  CHECK(half.events.size() == expect);
  CHECK(std::abs(static_cast<double>(half.events.size()) / s.events.size() - 0.5) < 0.01);

  EventSlice point = slice_by_time(s, 500, 500);
  CHECK(point.events.size() == 1);
  CHECK(point.events[0].t_us == 500);

  CHECK_THROWS_AS(slice_by_time(s, 700, 600), ValidationError);
  CHECK_THROWS_AS(slice_by_time(s, 0, s.t_end + 1), ValidationError);
}

TEST_CASE("voxelize: hand fixture with two events and two bins") {
  EventSlice s = make_slice(2, 1, {{0, 0, 0, 1}, {1, 1, 0, -1}});
  VoxelGrid g = voxelize(s, 2);
  CHECK(g.at(0, 0, 0) == doctest::Approx(1.0));
  CHECK(g.at(0, 0, 1) == doctest::Approx(0.0));
  CHECK(g.at(1, 0, 0) == doctest::Approx(0.0));
  CHECK(g.at(1, 0, 1) == doctest::Approx(-1.0));
}

TEST_CASE("voxelize: empty slice gives the zero grid") {
  EventSlice s;
  s.width = 3;
  s.height = 2;
  VoxelGrid g = voxelize(s, 10);
  CHECK(g.data.size() == 3 * 2 * 10);
  for (double v : g.data) CHECK(v == 0.0);
}

TEST_CASE("voxelize: degenerate duration puts all mass in bin 0") {
  EventSlice s = make_slice(2, 2, {{42, 0, 0, 1}, {42, 1, 1, 1}});
  VoxelGrid g = voxelize(s, 5);
  CHECK(g.at(0, 0, 0) == doctest::Approx(1.0));
  CHECK(g.at(1, 1, 0) == doctest::Approx(1.0));
  for (std::size_t b = 1; b < 5; ++b) CHECK(g.at(0, 0, b) == 0.0);
}

TEST_CASE("voxelize matches the per-event reference loop on random slices") {
  Rng rng(211);
  for (int trial = 0; trial < 4; ++trial) {
    EventSlice s = random_slice(rng, 13, 9, 2000, 50000);
    for (std::size_t bins : {1u, 2u, 10u}) {
      VoxelGrid fast = voxelize(s, bins);
      VoxelGrid ref = voxelize_reference(s, bins);
      REQUIRE(fast.data.size() == ref.data.size());
      for (std::size_t i = 0; i < fast.data.size(); ++i)
        CHECK(fast.data[i] == doctest::Approx(ref.data[i]).epsilon(1e-9));
    }
  }
}

TEST_CASE("voxel mass conservation: sum of grid equals sum of polarities") {
  Rng rng(212);
  EventSlice s = random_slice(rng, 16, 16, 5000, 123456);
  double psum = 0;
  for (const Event& e : s.events) psum += e.p;
  VoxelGrid g = voxelize(s, 10);
  CHECK(g.total() == doctest::Approx(psum).epsilon(1e-9));
}

TEST_CASE("per-event bin weights sum to 1 across bins") {
  // one event at arbitrary tstar inside [0, B-1]: total mass == polarity
  for (std::uint64_t t : {0ull, 137ull, 9999ull, 10000ull}) {
    EventSlice s = make_slice(1, 1, {{0, 0, 0, 1}, {t, 0, 0, 1}, {10000, 0, 0, 1}});
    VoxelGrid g = voxelize(s, 7);
    CHECK(g.total() == doctest::Approx(3.0).epsilon(1e-12));
  }
}

TEST_CASE("voxelize is additive when the normalization endpoints are shared") {
  Rng rng(213);
  EventSlice all = random_slice(rng, 8, 8, 1200, 9999);
  // force shared endpoints: first and last events go to both halves
  EventSlice a = all, b = all;
  a.events.clear();
  b.events.clear();
  a.events.push_back(all.events.front());
  b.events.push_back(all.events.front());
  for (std::size_t i = 1; i + 1 < all.events.size(); ++i)
    (i % 2 ? a : b).events.push_back(all.events[i]);
  a.events.push_back(all.events.back());
  b.events.push_back(all.events.back());

  VoxelGrid ga = voxelize(a, 10), gb = voxelize(b, 10), gall = voxelize(all, 10);
  // the duplicated endpoint events are double counted; subtract one copy
  EventSlice endpoints = make_slice(8, 8, {all.events.front(), all.events.back()});
  endpoints.t_start = all.t_start;
  endpoints.t_end = all.t_end;
  VoxelGrid ge = voxelize(endpoints, 10);
  for (std::size_t i = 0; i < gall.data.size(); ++i)
    CHECK(ga.data[i] + gb.data[i] - ge.data[i] == doctest::Approx(gall.data[i]).epsilon(1e-9));
}

TEST_CASE("parallel voxelization equals the sequential reference per cell") {
  Rng rng(214);
  EventSlice s = random_slice(rng, 24, 24, 30000, 777777);
  VoxelGrid seq = voxelize(s, 10, 1);
  VoxelGrid par = voxelize(s, 10, 8);
  for (std::size_t i = 0; i < seq.data.size(); ++i)
    CHECK(std::abs(seq.data[i] - par.data[i]) < 1e-5);
}

TEST_CASE("event mask marks fired pixels independent of polarity, time, B") {
  EventSlice empty;
  empty.width = 3;
  empty.height = 3;
  EventMask m0 = event_mask(empty);
  for (auto v : m0.data) CHECK(v == 0);

  EventSlice s = make_slice(2, 2, {{0, 0, 0, 1}, {5, 0, 0, -1}, {9, 1, 1, 1}});
  EventMask m = event_mask(s);
  std::set<std::size_t> fired;
  for (const Event& e : s.events) fired.insert(e.y * 2 + e.x);
  int ones = 0;
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    if (m.data[i]) ++ones;
    CHECK(m.data[i] == (fired.count(i) ? 1 : 0));
  }
  CHECK(ones == 2);

  // every pixel fired -> all ones
  EventSlice full = make_slice(2, 1, {{0, 0, 0, 1}, {1, 1, 0, -1}});
  EventMask mf = event_mask(full);
  CHECK(mf.data[0] == 1);
  CHECK(mf.data[1] == 1);
}
