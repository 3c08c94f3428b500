#pragma once

// "TNS0" container: magic, u8 dtype code (1 = f32, 2 = f64), u8 rank,
// u64 dims, then the raw little-endian payload.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "evseg/tensor.hpp"

namespace evseg {

namespace detail {

template <class T>
void put_le(std::ostream& os, T v) {
  // host is little-endian; raw write keeps the format bit-exact
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <class T>
T get_le(std::istream& is) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) throw IoError("unexpected end of file");
  return v;
}

template <class S>
constexpr std::uint8_t dtype_code() {
  return sizeof(S) == 4 ? 1 : 2;
}

}  // namespace detail

template <class S>
void write_tns(std::ostream& os, const Tensor<S>& t) {
  os.write("TNS0", 4);
  detail::put_le<std::uint8_t>(os, detail::dtype_code<S>());
  detail::put_le<std::uint8_t>(os, static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) detail::put_le<std::uint64_t>(os, d);
  os.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(S)));
  if (!os) throw IoError("tensor write failed");
}

template <class S>
void write_tns(const std::string& path, const Tensor<S>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open for write: " + path);
  write_tns(os, t);
}

// Reads a TNS0 blob, converting the payload to S if the stored dtype differs.
template <class S>
Tensor<S> read_tns(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "TNS0", 4) != 0) throw IoError("bad magic: expected TNS0");
  const auto code = detail::get_le<std::uint8_t>(is);
  if (code != 1 && code != 2) throw IoError("unknown dtype code " + std::to_string(code));
  const auto rank = detail::get_le<std::uint8_t>(is);
  Shape shape(rank);
  for (auto& d : shape) d = detail::get_le<std::uint64_t>(is);
  const std::size_t n = numel(shape);
  std::vector<S> data(n);
  if (code == detail::dtype_code<S>()) {
    if (!is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(S))))
      throw IoError("tensor payload truncated");
  } else if (code == 1) {
    std::vector<float> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 4)))
      throw IoError("tensor payload truncated");
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<S>(raw[i]);
  } else {
    std::vector<double> raw(n);
    if (!is.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n * 8)))
      throw IoError("tensor payload truncated");
    for (std::size_t i = 0; i < n; ++i) data[i] = static_cast<S>(raw[i]);
  }
  return Tensor<S>::from_vector(std::move(shape), std::move(data));
}

template <class S>
Tensor<S> read_tns(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open: " + path);
  return read_tns<S>(is);
}

}  // namespace evseg
