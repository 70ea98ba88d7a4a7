#include "skelmamba/tensor_io.hpp"

#include <cstring>
#include <fstream>

namespace skelmamba {

namespace {

void put_u32(std::vector<uint8_t>& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

void put_u64(std::vector<uint8_t>& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(uint8_t(v >> (8 * i)));
}

uint32_t get_u32(const uint8_t* p) {
  uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= uint32_t(p[i]) << (8 * i);
  return v;
}

uint64_t get_u64(const uint8_t* p) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= uint64_t(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<uint8_t> tdmt_bytes(const Tensor& t, DumpDtype dtype) {
  std::vector<uint8_t> out;
  out.reserve(16 + t.numel() * 8);
  out.push_back('T');
  out.push_back('D');
  out.push_back('M');
  out.push_back('T');
  out.push_back(1);  // version
  out.push_back(static_cast<uint8_t>(dtype));
  put_u32(out, static_cast<uint32_t>(t.rank()));
  for (int64_t e : t.shape()) put_u64(out, static_cast<uint64_t>(e));
  const double* p = t.data();
  const int64_t n = t.numel();
  if (dtype == DumpDtype::f32) {
    for (int64_t i = 0; i < n; ++i) {
      float f = static_cast<float>(p[i]);
      uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  } else {
    for (int64_t i = 0; i < n; ++i) {
      uint64_t bits;
      std::memcpy(&bits, &p[i], 8);
      put_u64(out, bits);
    }
  }
  return out;
}

Tensor tdmt_from_bytes(const std::vector<uint8_t>& bytes,
                       DumpDtype* dtype_out) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), "TDMT", 4) != 0) {
    throw DataError("tensor dump: bad magic");
  }
  if (bytes[4] != 1) throw DataError("tensor dump: unsupported version");
  if (bytes[5] > 1) throw DataError("tensor dump: unknown dtype");
  DumpDtype dtype = static_cast<DumpDtype>(bytes[5]);
  if (dtype_out) *dtype_out = dtype;
  uint32_t rank = get_u32(bytes.data() + 6);
  size_t off = 10;
  if (bytes.size() < off + rank * 8) throw DataError("tensor dump: truncated");
  Shape shape(rank);
  for (uint32_t i = 0; i < rank; ++i, off += 8) {
    shape[i] = static_cast<int64_t>(get_u64(bytes.data() + off));
  }
  const int64_t n = shape_numel(shape);
  const size_t esz = dtype == DumpDtype::f32 ? 4 : 8;
  if (bytes.size() != off + size_t(n) * esz) {
    throw DataError("tensor dump: payload size mismatch");
  }
  std::vector<double> data(n);
  for (int64_t i = 0; i < n; ++i) {
    if (dtype == DumpDtype::f32) {
      uint32_t bits = get_u32(bytes.data() + off + i * 4);
      float f;
      std::memcpy(&f, &bits, 4);
      data[i] = f;
    } else {
      uint64_t bits = get_u64(bytes.data() + off + i * 8);
      double d;
      std::memcpy(&d, &bits, 8);
      data[i] = d;
    }
  }
  return Tensor::from_data(std::move(shape), std::move(data));
}

void write_tdmt(const std::string& path, const Tensor& t, DumpDtype dtype) {
  auto bytes = tdmt_bytes(t, dtype);
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write " + path);
  f.write(reinterpret_cast<const char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
}

Tensor read_tdmt(const std::string& path, DumpDtype* dtype_out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot read " + path);
  std::vector<uint8_t> bytes((std::istreambuf_iterator<char>(f)),
                             std::istreambuf_iterator<char>());
  return tdmt_from_bytes(bytes, dtype_out);
}

}  // namespace skelmamba
