#pragma once

#include <string>

#include "skelmamba/tensor.hpp"

namespace skelmamba {

// Binary tensor dump. Layout, all little-endian:
//   magic "TDMT", u8 version=1, u8 dtype (0=f32, 1=f64), u32 rank,
//   rank x u64 extents, raw row-major payload.
enum class DumpDtype : uint8_t { f32 = 0, f64 = 1 };

void write_tdmt(const std::string& path, const Tensor& t, DumpDtype dtype);
Tensor read_tdmt(const std::string& path, DumpDtype* dtype_out = nullptr);

std::vector<uint8_t> tdmt_bytes(const Tensor& t, DumpDtype dtype);
Tensor tdmt_from_bytes(const std::vector<uint8_t>& bytes,
                       DumpDtype* dtype_out = nullptr);

}  // namespace skelmamba
