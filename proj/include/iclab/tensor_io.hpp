#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "iclab/tensor.hpp"

// Tensor container format "ICT1", little-endian throughout:
//   bytes 0..3   magic "ICT1"
//   bytes 4..11  rank    (u64)
//   then rank *  dim     (u64 each)
//   then         dtype   (u8: 4 = float32, 8 = float64)
//   then         payload (row-major scalars)

namespace iclab {

static_assert(std::endian::native == std::endian::little,
              "tensor i/o assumes a little-endian host");

namespace detail {

inline void read_exact(std::istream& in, char* dst, std::size_t n, std::size_t offset,
                       const char* what) {
  in.read(dst, static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n)
    throw FormatError(std::string("truncated tensor: expected ") + what, offset);
}

template <typename Scalar>
constexpr std::uint8_t dtype_flag() {
  return sizeof(Scalar) == 4 ? 4 : 8;
}

}  // namespace detail

template <typename Scalar>
void write_tensor(std::ostream& out, const Tensor<Scalar>& t) {
  out.write("ICT1", 4);
  const std::uint64_t rank = t.rank();
  out.write(reinterpret_cast<const char*>(&rank), 8);
  for (std::size_t i = 0; i < t.rank(); ++i) {
    const std::uint64_t d = t.dim(i);
    out.write(reinterpret_cast<const char*>(&d), 8);
  }
  const std::uint8_t flag = detail::dtype_flag<Scalar>();
  out.write(reinterpret_cast<const char*>(&flag), 1);
  out.write(reinterpret_cast<const char*>(t.data()),
            static_cast<std::streamsize>(t.size() * sizeof(Scalar)));
  if (!out) throw FormatError("tensor write failed", 0);
}

/// Reads one tensor; throws FormatError with the byte offset of the first
/// inconsistency (bad magic, bad dtype flag, or truncation).
template <typename Scalar>
Tensor<Scalar> read_tensor(std::istream& in) {
  const std::size_t base = static_cast<std::size_t>(in.tellg());
  char magic[4];
  detail::read_exact(in, magic, 4, base, "magic");
  if (std::memcmp(magic, "ICT1", 4) != 0) throw FormatError("bad tensor magic", base);

  std::uint64_t rank = 0;
  detail::read_exact(in, reinterpret_cast<char*>(&rank), 8, base + 4, "rank");
  if (rank == 0 || rank > 8) throw FormatError("unreasonable tensor rank", base + 4);

  Shape shape(rank);
  std::size_t numel = 1;
  for (std::uint64_t i = 0; i < rank; ++i) {
    std::uint64_t d = 0;
    detail::read_exact(in, reinterpret_cast<char*>(&d), 8, base + 12 + 8 * i, "dim");
    if (d == 0 || numel > (std::size_t(1) << 40) / std::max<std::uint64_t>(d, 1))
      throw FormatError("unreasonable tensor dimension", base + 12 + 8 * i);
    shape[i] = d;
    numel *= d;
  }

  const std::size_t flag_off = base + 12 + 8 * rank;
  std::uint8_t flag = 0;
  detail::read_exact(in, reinterpret_cast<char*>(&flag), 1, flag_off, "dtype flag");
  if (flag != detail::dtype_flag<Scalar>())
    throw FormatError("tensor dtype flag " + std::to_string(int(flag)) + " does not match requested scalar",
                      flag_off);

  Tensor<Scalar> t(shape);
  detail::read_exact(in, reinterpret_cast<char*>(t.data()), numel * sizeof(Scalar), flag_off + 1,
                     "payload");
  return t;
}

template <typename Scalar>
void save_tensor(const std::string& path, const Tensor<Scalar>& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for writing: " + path, 0);
  write_tensor(f, t);
}

template <typename Scalar>
Tensor<Scalar> load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open for reading: " + path, 0);
  return read_tensor<Scalar>(f);
}

}  // namespace iclab
