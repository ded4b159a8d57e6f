#include "stm3/tensor_io.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "stm3/error.hpp"

namespace stm3 {

namespace {

constexpr std::array<char, 4> kMagic{'S', 'T', 'M', '3'};

template <typename T>
void put_le(std::ostream& out, T value) {
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), sizeof(T));
}

template <typename T>
T get_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes{};
  if (!in.read(reinterpret_cast<char*>(bytes.data()), sizeof(T))) {
    throw ParseError("tensor container truncated");
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T value;
  std::memcpy(&value, bytes.data(), sizeof(T));
  return value;
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  out.write(kMagic.data(), kMagic.size());
  put_le<std::uint32_t>(out, kTensorFormatVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (std::size_t d : t.shape()) put_le<std::uint64_t>(out, d);
  for (double v : t.data()) put_le<double>(out, v);
  if (!out) throw Error("failed writing tensor container");
}

Tensor read_tensor(std::istream& in) {
  std::array<char, 4> magic{};
  if (!in.read(magic.data(), magic.size()) || magic != kMagic) {
    throw ParseError("not a tensor container (bad magic)");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kTensorFormatVersion) {
    throw ParseError("unsupported tensor container version " + std::to_string(version));
  }
  const auto ndim = get_le<std::uint32_t>(in);
  Shape shape(ndim);
  for (auto& d : shape) d = static_cast<std::size_t>(get_le<std::uint64_t>(in));
  std::vector<double> values(shape_size(shape));
  for (auto& v : values) v = get_le<double>(in);
  return Tensor(std::move(shape), std::move(values));
}

void save_tensor(const std::filesystem::path& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError("cannot open " + path.string());
  return read_tensor(in);
}

}  // namespace stm3
