#pragma once

// CTF tensor files:
//   bytes 0..3   "CTF1"
//   byte  4      rank (u8, 1..3)
//   rank x u32   dims, little-endian
//   f32 payload  row-major, little-endian

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "computer/errors.hpp"
#include "computer/tensor.hpp"

namespace computer::ctf {

inline constexpr std::array<char, 4> kMagic{'C', 'T', 'F', '1'};

namespace detail {

inline void put_u32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

inline std::uint32_t get_u32(const unsigned char* p) {
  return std::uint32_t(p[0]) | std::uint32_t(p[1]) << 8 |
         std::uint32_t(p[2]) << 16 | std::uint32_t(p[3]) << 24;
}

}  // namespace detail

template <std::floating_point T>
std::vector<unsigned char> encode(const Tensor<T>& t) {
  std::vector<unsigned char> out(kMagic.begin(), kMagic.end());
  out.push_back(static_cast<unsigned char>(t.rank()));
  for (auto d : t.shape()) detail::put_u32(out, static_cast<std::uint32_t>(d));
  out.reserve(out.size() + 4 * t.size());
  for (T v : t.data())
    detail::put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

template <std::floating_point T>
Tensor<T> decode(const std::vector<unsigned char>& bytes,
                 const std::string& origin = "<memory>") {
  const std::size_t probe = std::min<std::size_t>(bytes.size(), 4);
  if (std::memcmp(bytes.data(), kMagic.data(), probe) != 0)
    throw BadMagicError(origin + ": bad magic, not a CTF1 file");
  if (bytes.size() < 5)
    throw ShortReadError(origin + ": short read in CTF header (" +
                         std::to_string(bytes.size()) + " bytes)");
  const std::size_t rank = bytes[4];
  if (rank < 1 || rank > 3)
    throw ShapeMismatchError(origin + ": unsupported rank " +
                             std::to_string(rank));
  const std::size_t header = 5 + 4 * rank;
  if (bytes.size() < header)
    throw ShortReadError(origin + ": short read in CTF dims");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i)
    shape[i] = detail::get_u32(bytes.data() + 5 + 4 * i);
  const std::size_t n = shape_numel(shape);
  if (bytes.size() != header + 4 * n)
    throw ShortReadError(origin + ": payload has " +
                         std::to_string(bytes.size() - header) +
                         " bytes, shape " + shape_str(shape) + " needs " +
                         std::to_string(4 * n));
  std::vector<T> data(n);
  for (std::size_t i = 0; i < n; ++i)
    data[i] = static_cast<T>(
        std::bit_cast<float>(detail::get_u32(bytes.data() + header + 4 * i)));
  return Tensor<T>(std::move(shape), std::move(data));
}

template <std::floating_point T>
void write(const std::filesystem::path& path, const Tensor<T>& t) {
  const auto bytes = encode(t);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError(path.string() + ": cannot open for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError(path.string() + ": write failed");
}

template <std::floating_point T>
Tensor<T> read(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw MissingFileError(path.string() + ": no such CTF file");
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  return decode<T>(bytes, path.string());
}

}  // namespace computer::ctf
