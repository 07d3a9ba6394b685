#include "nasp/dataio/slice_io.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>
#include <vector>

namespace nasp::dataio {

using fourier::ComplexImage;

namespace {
void put_u16(std::string& s, std::uint16_t v) {
  s.push_back(static_cast<char>(v & 0xff));
  s.push_back(static_cast<char>((v >> 8) & 0xff));
}
void put_u32(std::string& s, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) s.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
std::uint16_t get_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace

void write_slice(const std::string& path, const ComplexImage& img) {
  if (img.height < 1 || img.width < 1) throw std::invalid_argument("write_slice: empty image");
  std::string buf = "MRSL";
  put_u16(buf, 1);  // version
  put_u16(buf, 1);  // n_coils
  put_u32(buf, static_cast<std::uint32_t>(img.height));
  put_u32(buf, static_cast<std::uint32_t>(img.width));
  std::vector<float> payload(img.data.size() * 2);
  for (std::size_t k = 0; k < img.data.size(); ++k) {
    payload[2 * k] = static_cast<float>(img.data[k].real());
    payload[2 * k + 1] = static_cast<float>(img.data[k].imag());
  }
  buf.append(reinterpret_cast<const char*>(payload.data()), payload.size() * sizeof(float));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_slice: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) throw std::runtime_error("write_slice: short write to " + path);
}

ComplexImage read_slice(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_slice: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 16 || buf.compare(0, 4, "MRSL") != 0)
    throw std::runtime_error("read_slice: not an MRSL file: " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data());
  const std::uint16_t version = get_u16(p + 4);
  if (version != 1)
    throw std::runtime_error("read_slice: unsupported MRSL version " + std::to_string(version) +
                             " in " + path);
  const std::uint16_t n_coils = get_u16(p + 6);
  if (n_coils != 1)
    throw std::runtime_error("read_slice: only single-coil slices are supported, got " +
                             std::to_string(n_coils));
  const std::uint32_t H = get_u32(p + 8);
  const std::uint32_t W = get_u32(p + 12);
  const std::size_t expect = 16 + static_cast<std::size_t>(H) * W * 2 * sizeof(float);
  if (buf.size() != expect)
    throw std::runtime_error("read_slice: " + path + " has " + std::to_string(buf.size()) +
                             " bytes, expected " + std::to_string(expect));
  ComplexImage img(static_cast<int>(H), static_cast<int>(W));
  const float* v = reinterpret_cast<const float*>(buf.data() + 16);
  for (std::size_t k = 0; k < img.data.size(); ++k)
    img.data[k] = {static_cast<double>(v[2 * k]), static_cast<double>(v[2 * k + 1])};
  return img;
}

}  // namespace nasp::dataio
