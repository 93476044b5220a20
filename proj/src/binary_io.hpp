// SPDX-License-Identifier: Apache-2.0
//
// Little-endian primitives shared by the sequence and checkpoint formats.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <string>

#include "maskgru/errors.hpp"

namespace maskgru::io {

template <typename U>
void put_le(std::ostream& out, U v) {
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(bytes, sizeof(U));
}

inline void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }
inline void put_u32(std::ostream& out, std::uint32_t v) { put_le(out, v); }
inline void put_u64(std::ostream& out, std::uint64_t v) { put_le(out, v); }
inline void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

template <typename U>
U get_le(std::istream& in, const char* what) {
  unsigned char bytes[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw DataError(std::string("unexpected end of file while reading ") + what);
  }
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(bytes[i]) << (8 * i);
  return v;
}

inline std::uint8_t get_u8(std::istream& in, const char* what) { return get_le<std::uint8_t>(in, what); }
inline std::uint32_t get_u32(std::istream& in, const char* what) { return get_le<std::uint32_t>(in, what); }
inline std::uint64_t get_u64(std::istream& in, const char* what) { return get_le<std::uint64_t>(in, what); }
inline double get_f64(std::istream& in, const char* what) {
  return std::bit_cast<double>(get_le<std::uint64_t>(in, what));
}

inline void expect_magic(std::istream& in, const char (&magic)[9], const std::string& path) {
  char buf[8];
  if (!in.read(buf, 8) || std::memcmp(buf, magic, 8) != 0) {
    throw DataError(path + ": not a recognised file (bad magic)");
  }
}

}  // namespace maskgru::io
