#pragma once

// Tensor blob layout (all little-endian):
//   u32 rank | u32 extent[rank] | f64 value[product(extents)]

#include <algorithm>
#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "geqbev/errors.hpp"
#include "geqbev/tensor.hpp"

namespace geqbev {

namespace detail {

template <typename T>
void write_le(std::ostream& os, T value) {
  std::array<unsigned char, sizeof(T)> bytes;
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  os.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
  std::array<unsigned char, sizeof(T)> bytes;
  if (!is.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw FormatError("unexpected end of stream");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace detail

inline void write_tensor(std::ostream& os, const Tensor& t) {
  detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t e : t.shape()) detail::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  for (double v : t.data()) detail::write_le<double>(os, v);
}

inline Tensor read_tensor(std::istream& is) {
  const auto rank = detail::read_le<std::uint32_t>(is);
  if (rank == 0 || rank > 16) throw FormatError("implausible tensor rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t n = 1;
  for (auto& e : shape) {
    e = detail::read_le<std::uint32_t>(is);
    if (e == 0) throw FormatError("zero tensor extent");
    n *= e;
  }
  std::vector<double> data(n);
  for (double& v : data) v = detail::read_le<double>(is);
  return Tensor(std::move(shape), std::move(data));
}

inline void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_tensor(os, t);
}

inline Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open " + path.string());
  return read_tensor(is);
}

}  // namespace geqbev
