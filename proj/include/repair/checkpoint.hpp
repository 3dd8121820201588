#pragma once

// Tensor dump format, all integers little-endian:
//
//   magic   "RPCK" (4 bytes)
//   version u32 (= 1)
//   count   u32
//   count times:
//     name_len u32, name bytes (UTF-8, no terminator)
//     rows u64, cols u64
//     rows * cols IEEE-754 binary64 values, little-endian, row-major

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "repair/numeric.hpp"

namespace repair {

inline constexpr std::array<char, 4> kCheckpointMagic{'R', 'P', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

template <typename T>
void put_le(std::ostream& out, T v) {
  static_assert(std::is_integral_v<T>);
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("checkpoint: truncated file");
    v |= static_cast<T>(static_cast<unsigned char>(c)) << (8 * i);
  }
  return v;
}

}  // namespace detail

using TensorMap = std::map<std::string, Matrix>;

inline void write_checkpoint(std::ostream& out, const TensorMap& tensors) {
  out.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::put_le<std::uint32_t>(out, kCheckpointVersion);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, m] : tensors) {
    detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::put_le<std::uint64_t>(out, m.rows());
    detail::put_le<std::uint64_t>(out, m.cols());
    for (double v : m.values()) detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(v));
  }
}

inline TensorMap read_checkpoint(std::istream& in) {
  std::array<char, 4> magic{};
  in.read(magic.data(), magic.size());
  if (!in || magic != kCheckpointMagic) throw std::runtime_error("checkpoint: bad magic");
  const auto version = detail::get_le<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint: unsupported version " + std::to_string(version));
  }
  const auto count = detail::get_le<std::uint32_t>(in);
  TensorMap out;
  for (std::uint32_t t = 0; t < count; ++t) {
    const auto len = detail::get_le<std::uint32_t>(in);
    std::string name(len, '\0');
    in.read(name.data(), len);
    if (!in) throw std::runtime_error("checkpoint: truncated tensor name");
    const auto rows = detail::get_le<std::uint64_t>(in);
    const auto cols = detail::get_le<std::uint64_t>(in);
    Matrix m(rows, cols);
    for (double& v : m.values()) v = std::bit_cast<double>(detail::get_le<std::uint64_t>(in));
    out.emplace(std::move(name), std::move(m));
  }
  return out;
}

inline void save_checkpoint(const std::string& path, const TensorMap& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_checkpoint(out, tensors);
}

inline TensorMap load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  return read_checkpoint(in);
}

}  // namespace repair
