#pragma once

// CDTF tensor files: "CDTF" magic, u16 version, u8 dtype, u8 rank,
// rank x u32 dims, then little-endian float32 payload. All integers are
// little-endian.

#include <array>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "cdim/tensor.hpp"

namespace cdim::cdtf {

inline constexpr std::array<std::uint8_t, 4> kMagic{0x43, 0x44, 0x54, 0x46};
inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::uint8_t kFloat32 = 1;

namespace detail {

inline void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v & 0xff));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | (std::uint32_t{p[1]} << 8) | (std::uint32_t{p[2]} << 16) |
         (std::uint32_t{p[3]} << 24);
}

}  // namespace detail

/// Serializes to CDTF bytes. Values are narrowed to float32.
template <typename T>
std::vector<std::uint8_t> encode(const Tensor<T>& t) {
  if (t.rank() > 255) throw ShapeError("CDTF supports rank <= 255");
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  detail::put_u16(out, kVersion);
  out.push_back(kFloat32);
  out.push_back(static_cast<std::uint8_t>(t.rank()));
  for (std::size_t d : t.shape()) {
    if (d > 0xffffffffu) throw ShapeError("CDTF dimension exceeds 32 bits");
    detail::put_u32(out, static_cast<std::uint32_t>(d));
  }
  out.reserve(out.size() + 4 * t.size());
  for (T v : t.data()) {
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

template <typename T = float>
Tensor<T> decode(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 8 || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw IoError("not a CDTF stream (bad magic)");
  }
  const std::uint16_t version =
      static_cast<std::uint16_t>(bytes[4] | (static_cast<std::uint16_t>(bytes[5]) << 8));
  if (version != kVersion) {
    throw IoError("unsupported CDTF version " + std::to_string(version));
  }
  if (bytes[6] != kFloat32) {
    throw IoError("unsupported CDTF dtype code " + std::to_string(bytes[6]));
  }
  const std::size_t rank = bytes[7];
  std::size_t pos = 8;
  if (bytes.size() < pos + 4 * rank) throw IoError("truncated CDTF header");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i, pos += 4) shape[i] = detail::get_u32(&bytes[pos]);
  const std::size_t n = num_elements(shape);
  if (bytes.size() != pos + 4 * n) {
    throw IoError("CDTF payload length mismatch for shape " + to_string(shape));
  }
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i, pos += 4) {
    data[i] = static_cast<T>(std::bit_cast<float>(detail::get_u32(&bytes[pos])));
  }
  return Tensor<T>(std::move(shape), std::move(data));
}

template <typename T>
void write(const std::filesystem::path& path, const Tensor<T>& t) {
  const auto bytes = encode(t);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

template <typename T = float>
Tensor<T> read(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open for reading: " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                  std::istreambuf_iterator<char>());
  try {
    return decode<T>(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

}  // namespace cdim::cdtf
