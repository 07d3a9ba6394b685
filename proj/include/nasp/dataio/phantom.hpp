#pragma once

#include <cstdint>
#include <string>

#include "nasp/fourier/fourier.hpp"

namespace nasp::dataio {

enum class Contrast { t1_like = 0, t2_like = 1, flair_like = 2 };

Contrast contrast_from_string(const std::string& s);
std::string contrast_name(Contrast c);

struct PhantomSpec {
  int n_ellipses = 6;          // 3..12
  double intensity_lo = 0.3;   // per-ellipse magnitude range
  double intensity_hi = 1.0;
  double phase_scale = 0.8;    // radians of smooth background phase
  std::uint32_t seed = 0;
  int height = 64, width = 64;
};

// Sum of rotated ellipses with complex amplitudes, modulated by a smooth
// low-order random phase field, max-magnitude normalized, and snapped to the
// float32 grid so slice files round-trip bitwise.
fourier::ComplexImage gen_phantom(const PhantomSpec& spec);

// Per-contrast intensity statistics emulating T1/T2/FLAIR-weighted images.
PhantomSpec phantom_spec_for(Contrast c, int height, int width, std::uint32_t seed);

}  // namespace nasp::dataio
