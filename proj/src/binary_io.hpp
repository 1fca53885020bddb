#pragma once

#include "vlkd/common.hpp"

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <string>

namespace vlkd::io {

inline void put_u8(std::ostream& out, std::uint8_t v) { out.put(static_cast<char>(v)); }

template <typename UInt>
void put_le(std::ostream& out, UInt v) {
  char b[sizeof(UInt)];
  for (std::size_t i = 0; i < sizeof(UInt); ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
  out.write(b, sizeof(UInt));
}

inline void put_f32(std::ostream& out, float v) { put_le(out, std::bit_cast<std::uint32_t>(v)); }
inline void put_f64(std::ostream& out, double v) { put_le(out, std::bit_cast<std::uint64_t>(v)); }

/// Little-endian reader that tracks its byte offset for error messages.
class ByteReader {
 public:
  explicit ByteReader(std::istream& in) : in_(in) {}

  void read(char* dst, std::size_t n, const char* what) {
    in_.read(dst, static_cast<std::streamsize>(n));
    const auto got = static_cast<std::size_t>(in_.gcount());
    if (got != n) throw FormatError(std::string("truncated ") + what, offset_ + got);
    offset_ += n;
  }

  template <typename UInt>
  UInt le(const char* what) {
    unsigned char b[sizeof(UInt)];
    read(reinterpret_cast<char*>(b), sizeof(UInt), what);
    UInt v = 0;
    for (std::size_t i = 0; i < sizeof(UInt); ++i) v |= static_cast<UInt>(b[i]) << (8 * i);
    return v;
  }

  std::uint8_t u8(const char* what) { return le<std::uint8_t>(what); }
  std::uint16_t u16(const char* what) { return le<std::uint16_t>(what); }
  std::uint32_t u32(const char* what) { return le<std::uint32_t>(what); }
  float f32(const char* what) { return std::bit_cast<float>(le<std::uint32_t>(what)); }
  double f64(const char* what) { return std::bit_cast<double>(le<std::uint64_t>(what)); }

  std::uint64_t offset() const { return offset_; }

 private:
  std::istream& in_;
  std::uint64_t offset_ = 0;
};

}  // namespace vlkd::io
