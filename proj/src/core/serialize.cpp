#include "nasp/core/serialize.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nasp::io {

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ull;
  }
  return h;
}

std::string fnv1a_hex(const void* data, std::size_t n) {
  std::uint64_t h = fnv1a(data, n);
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return s;
}

namespace {
void put_u32(std::ofstream& f, std::uint32_t v) {
  char b[4];
  for (int k = 0; k < 4; ++k) b[k] = static_cast<char>((v >> (8 * k)) & 0xff);
  f.write(b, 4);
}
std::uint32_t get_u32(std::ifstream& f) {
  unsigned char b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}
}  // namespace

void write_blob(const std::string& path, const nasp::ad::Shape& shape,
                const std::vector<double>& data) {
  if (nasp::ad::shape_numel(shape) != static_cast<std::int64_t>(data.size()))
    throw std::invalid_argument("write_blob: shape/data size mismatch");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_blob: cannot open " + path);
  f.write("MRWT", 4);
  put_u32(f, 1);
  put_u32(f, static_cast<std::uint32_t>(shape.size()));
  for (int d : shape) put_u32(f, static_cast<std::uint32_t>(d));
  f.write(reinterpret_cast<const char*>(data.data()),
          static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!f) throw std::runtime_error("write_blob: short write to " + path);
}

void read_blob(const std::string& path, nasp::ad::Shape& shape, std::vector<double>& data) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_blob: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MRWT", 4) != 0)
    throw std::runtime_error("read_blob: not an MRWT file: " + path);
  if (get_u32(f) != 1) throw std::runtime_error("read_blob: unsupported MRWT version in " + path);
  const std::uint32_t ndim = get_u32(f);
  if (ndim > 8) throw std::runtime_error("read_blob: implausible rank in " + path);
  shape.clear();
  for (std::uint32_t k = 0; k < ndim; ++k) shape.push_back(static_cast<int>(get_u32(f)));
  const std::int64_t n = nasp::ad::shape_numel(shape);
  data.assign(static_cast<std::size_t>(n), 0.0);
  f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!f || f.gcount() != static_cast<std::streamsize>(n * sizeof(double)))
    throw std::runtime_error("read_blob: truncated payload in " + path);
}

}  // namespace nasp::io
