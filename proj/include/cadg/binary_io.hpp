#pragma once

// Little-endian primitive encoding shared by the checkpoint and dataset files.

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>
#include <string_view>

#include "cadg/tensor.hpp"

namespace cadg::io {

template <typename U>
inline void write_le(std::ostream& os, U value) {
  static_assert(std::is_unsigned_v<U>);
  char bytes[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) bytes[i] = static_cast<char>((value >> (8 * i)) & 0xFF);
  os.write(bytes, sizeof(U));
}

template <typename U>
inline U read_le(std::istream& is, std::string_view what) {
  static_assert(std::is_unsigned_v<U>);
  unsigned char bytes[sizeof(U)];
  if (!is.read(reinterpret_cast<char*>(bytes), sizeof(U))) {
    throw FormatError("truncated file while reading " + std::string(what));
  }
  U value = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(bytes[i]) << (8 * i);
  return value;
}

inline void write_f64(std::ostream& os, double v) { write_le(os, std::bit_cast<std::uint64_t>(v)); }

inline double read_f64(std::istream& is, std::string_view what) {
  return std::bit_cast<double>(read_le<std::uint64_t>(is, what));
}

inline void write_magic(std::ostream& os, std::string_view magic) {
  os.write(magic.data(), static_cast<std::streamsize>(magic.size()));
}

inline void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  if (!is.read(got.data(), static_cast<std::streamsize>(got.size())) || got != magic) {
    throw FormatError("bad magic: expected \"" + std::string(magic) + "\"");
  }
}

inline void expect_eof(std::istream& is) {
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after payload");
}

}  // namespace cadg::io
