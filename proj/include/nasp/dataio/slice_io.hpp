#pragma once

#include <string>

#include "nasp/fourier/fourier.hpp"

namespace nasp::dataio {

// MRSL slice file: magic "MRSL", little-endian u16 version=1, u16 n_coils,
// u32 H, u32 W (16-byte header), then per coil a row-major sequence of
// interleaved float32 (real, imag) pairs. Images snapped to the float32 grid
// round-trip bitwise. Single-coil only at this scale.
void write_slice(const std::string& path, const fourier::ComplexImage& img);
fourier::ComplexImage read_slice(const std::string& path);

}  // namespace nasp::dataio
