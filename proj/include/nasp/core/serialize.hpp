#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nasp/core/tensor.hpp"

namespace nasp::io {

// FNV-1a over raw bytes; stable content fingerprint for blobs and configs.
std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 14695981039346656037ull);
std::string fnv1a_hex(const void* data, std::size_t n);

// Weight blob file: magic "MRWT", little-endian u32 [version=1, ndim,
// dims...], then float64 data.
void write_blob(const std::string& path, const nasp::ad::Shape& shape,
                const std::vector<double>& data);
void read_blob(const std::string& path, nasp::ad::Shape& shape, std::vector<double>& data);

}  // namespace nasp::io
