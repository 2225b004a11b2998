// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "surfcap/error.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>
#include <type_traits>
#include <vector>

namespace surfcap {

// Little-endian scalar I/O independent of host byte order.

template <typename T>
void write_le(std::ostream& os, T value) {
  static_assert(std::is_arithmetic_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  os.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  static_assert(std::is_arithmetic_v<T>);
  unsigned char bytes[sizeof(T)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(T)))
    throw Error(ErrorCode::ParseError, "unexpected end of binary stream");
  if constexpr (std::endian::native == std::endian::big)
    for (std::size_t i = 0; i < sizeof(T) / 2; ++i) std::swap(bytes[i], bytes[sizeof(T) - 1 - i]);
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

inline void write_doubles(std::ostream& os, const std::vector<double>& v) {
  write_le<std::uint64_t>(os, v.size());
  for (double x : v) write_le(os, x);
}

inline std::vector<double> read_doubles(std::istream& is, std::uint64_t max_len = 1ull << 32) {
  const auto n = read_le<std::uint64_t>(is);
  if (n > max_len) throw Error(ErrorCode::ParseError, "binary array length out of range");
  std::vector<double> v(n);
  for (double& x : v) x = read_le<double>(is);
  return v;
}

}  // namespace surfcap
