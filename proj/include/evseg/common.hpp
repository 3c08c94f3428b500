#pragma once

#include <atomic>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace evseg {

// Bad user input: malformed files, inconsistent shapes, invalid configs.
// The CLI maps these to exit code 1.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Filesystem trouble: missing files, short reads, bad magic. Exit code 2.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// When enabled, every tensor op scans its output for NaN/Inf and throws.
inline std::atomic<bool>& finite_checks_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}
inline bool finite_checks_enabled() { return finite_checks_flag().load(std::memory_order_relaxed); }
inline void set_finite_checks(bool on) { finite_checks_flag().store(on, std::memory_order_relaxed); }

// Seeded RNG with pinned transforms so identical seeds give identical
// streams regardless of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : eng_(seed) {}

  std::uint64_t next_u64() { return eng_(); }

  // [0, 1)
  double uniform() {
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Box-Muller from two pinned uniforms.
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  // Inclusive integer range.
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    const auto span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(eng_() % span);
  }

 private:
  std::mt19937_64 eng_;
};

}  // namespace evseg
