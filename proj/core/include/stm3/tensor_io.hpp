#pragma once

#include <filesystem>
#include <iosfwd>

#include "stm3/tensor.hpp"

namespace stm3 {

// Binary container: "STM3", u32 version (1), u32 ndim, ndim x u64 dims,
// then the row-major payload as little-endian f64.

inline constexpr std::uint32_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& t);
Tensor load_tensor(const std::filesystem::path& path);

}  // namespace stm3
