#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace skelmamba {

// Hex digest of a byte buffer (used for checkpoint manifests).
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::vector<uint8_t>& bytes);
std::string sha256_file_hex(const std::string& path);

}  // namespace skelmamba
