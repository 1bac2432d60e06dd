#pragma once

// CKT1 binary tensor container.
//
//   record := "CKT1" | u8 rank | rank x u32 LE extent | prod(extents) x f32 LE
//
// A file holds one or more records back to back. Named collections (model
// checkpoints, descriptor stores) pair the record stream with a JSON sidecar
// that lists names and shapes in record order.

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include "d2r/error.hpp"
#include "d2r/tensor.hpp"

namespace d2r::ckt {

inline constexpr std::array<char, 4> kMagic = {'C', 'K', 'T', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw DataError("ckt: truncated extent");
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) |
         (std::uint32_t(b[3]) << 24);
}

}  // namespace detail

inline void write(std::ostream& os, const Tensor& t) {
  os.write(kMagic.data(), 4);
  os.put(static_cast<char>(t.rank()));
  for (auto e : t.shape()) detail::put_u32(os, static_cast<std::uint32_t>(e));
  for (double v : t.values()) {
    const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(v));
    detail::put_u32(os, bits);
  }
}

/// Reads one record; returns false at clean end of stream.
inline bool read(std::istream& is, Tensor& out) {
  char magic[4];
  is.read(magic, 4);
  if (is.gcount() == 0) return false;
  if (is.gcount() != 4 || std::memcmp(magic, kMagic.data(), 4) != 0)
    throw DataError("ckt: bad magic (expected CKT1)");
  const int rank = is.get();
  if (rank < 1 || rank > 4) throw DataError("ckt: rank out of range: " + std::to_string(rank));
  Shape shape(static_cast<std::size_t>(rank));
  for (auto& e : shape) e = detail::get_u32(is);
  Tensor t(shape);
  std::vector<unsigned char> buf(t.size() * 4);
  if (!is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size())))
    throw DataError("ckt: truncated payload for shape " + shape_str(shape));
  for (std::size_t i = 0; i < t.size(); ++i) {
    const std::uint32_t bits = std::uint32_t(buf[4 * i]) | (std::uint32_t(buf[4 * i + 1]) << 8) |
                               (std::uint32_t(buf[4 * i + 2]) << 16) |
                               (std::uint32_t(buf[4 * i + 3]) << 24);
    t[i] = static_cast<double>(std::bit_cast<float>(bits));
  }
  out = std::move(t);
  return true;
}

inline void save(const std::filesystem::path& path, const std::vector<Tensor>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("ckt: cannot open for writing: " + path.string());
  for (const auto& t : tensors) write(os, t);
}

inline std::vector<Tensor> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("ckt: cannot open: " + path.string());
  std::vector<Tensor> out;
  Tensor t;
  while (read(is, t)) out.push_back(std::move(t));
  return out;
}

}  // namespace d2r::ckt
