#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "rcnds/error.hpp"
#include "rcnds/tensor.hpp"

namespace rcnds {

// Binary tensor blob, shared by checkpoints and the dataset image format:
//   8 bytes   magic "TCNDS001"
//   u32 LE    rank
//   u32 LE    extents[rank]
//   f64 LE    values, row-major
inline constexpr char kTensorMagic[8] = {'T', 'C', 'N', 'D', 'S', '0', '0', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline void put_f64(std::ostream& os, double d) {
  const std::uint64_t v = std::bit_cast<std::uint64_t>(d);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  os.write(reinterpret_cast<const char*>(b), 8);
}

inline double get_f64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return std::bit_cast<double>(v);
}

} // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os.write(kTensorMagic, 8);
  detail::put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape) {
    detail::put_u32(os, static_cast<std::uint32_t>(e));
  }
  for (double v : t.values) {
    detail::put_f64(os, v);
  }
  if (!os) {
    throw IoError("write_tensor: stream failure");
  }
}

inline Tensor read_tensor(std::istream& is) {
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kTensorMagic, 8) != 0) {
    throw IoError("read_tensor: bad magic");
  }
  const std::uint32_t rank = detail::get_u32(is);
  if (rank == 0 || rank > 8) {
    throw IoError("read_tensor: implausible rank " + std::to_string(rank));
  }
  std::vector<std::size_t> shape(rank);
  for (auto& e : shape) {
    e = detail::get_u32(is);
  }
  const std::size_t n = Tensor::checked_numel(shape);
  std::vector<double> values(n);
  for (auto& v : values) {
    v = detail::get_f64(is);
  }
  if (!is) {
    throw IoError("read_tensor: truncated blob");
  }
  return Tensor(std::move(shape), std::move(values));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) {
    throw IoError("save_tensor: cannot open " + path.string());
  }
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) {
    throw IoError("load_tensor: cannot open " + path.string());
  }
  return read_tensor(is);
}

} // namespace rcnds
