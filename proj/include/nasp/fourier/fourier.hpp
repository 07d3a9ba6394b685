#pragma once

#include <complex>
#include <cstdint>
#include <string>
#include <vector>

namespace nasp::fourier {

enum class Pattern : std::uint32_t {
  cartesian_x = 0,  // fully sampled rows
  cartesian_y = 1,  // fully sampled columns
  radial = 2,
  gaussian_vd = 3,
};

Pattern pattern_from_string(const std::string& s);
std::string pattern_name(Pattern p);

struct SamplingMask {
  Pattern pattern = Pattern::cartesian_x;
  int accel = 1;  // 1 = fully sampled
  int height = 0, width = 0;
  std::uint32_t seed = 0;
  std::vector<std::uint8_t> selected;  // row-major, {0,1}

  int count() const;
  bool is_subset_of(const SamplingMask& other) const;
};

struct ComplexImage {
  int height = 0, width = 0;
  std::vector<std::complex<double>> data;  // row-major

  ComplexImage() = default;
  ComplexImage(int h, int w) : height(h), width(w), data(static_cast<std::size_t>(h) * w) {}
  std::complex<double>& at(int i, int j) { return data[static_cast<std::size_t>(i) * width + j]; }
  const std::complex<double>& at(int i, int j) const {
    return data[static_cast<std::size_t>(i) * width + j];
  }
};

struct CoilSensitivities {
  int n_coils = 0;
  int height = 0, width = 0;
  std::vector<std::complex<double>> maps;  // coil-major, each height*width
};

struct KSpaceMeasurement {
  SamplingMask mask;
  int n_coils = 0;
  std::vector<std::complex<double>> values;  // coil-major, zero off-mask
};

struct AccelerationPyramid {
  std::vector<int> schedule;  // [32,16,8,4,2,1]
  std::vector<SamplingMask> masks;
};

// Exact-budget mask, deterministic in (pattern, R, shape, seed). R=1 is the
// all-ones mask. Gaussian-VD masks for the same seed are nested across R by
// construction (priority-key prefixes).
SamplingMask make_mask(Pattern pattern, int R, int height, int width, std::uint32_t seed);

// Six masks over [32,16,8,4,2,1], nested top-down: each level subsamples its
// parent's selected set under the pattern rule. With independent=true each
// level is drawn standalone from a per-level seed (no nesting guarantee).
AccelerationPyramid make_pyramid(Pattern pattern, int height, int width, std::uint32_t seed,
                                 bool independent = false);

// Orthonormal centered 2-D DFT: fftshift . FFT . ifftshift, scaled 1/sqrt(N).
ComplexImage centered_fft2(const ComplexImage& x);
ComplexImage centered_ifft2(const ComplexImage& k);

// values[c] = mask . centeredFFT2(sens[c] . x)
KSpaceMeasurement forward(const ComplexImage& x, const CoilSensitivities& sens,
                          const SamplingMask& mask);
// sum_c conj(sens[c]) . centeredIFFT2(mask . values[c])
ComplexImage adjoint(const KSpaceMeasurement& y, const CoilSensitivities& sens);
// Adjoint followed by max-magnitude normalization (identically zero stays zero).
ComplexImage zero_filled(const KSpaceMeasurement& y, const CoilSensitivities& sens);
// ||forward(x) - y||_2^2 over selected entries of all coils.
double data_consistency_error(const ComplexImage& x, const KSpaceMeasurement& y,
                              const CoilSensitivities& sens);
// Smooth low-order complex polynomial maps, pixelwise sum |s_c|^2 = 1.
// n_coils=1 is the constant identity map.
CoilSensitivities make_coil_maps(int n_coils, int height, int width, std::uint32_t seed);

// Scale so the max magnitude is 1; all-zero images are returned unchanged.
void normalize_max_magnitude(ComplexImage& x);

// MRMK mask file: magic "MRMK", little-endian u32 [version=1, H, W, pattern,
// R, seed], then H*W bytes of {0,1} row-major.
void write_mask(const std::string& path, const SamplingMask& mask);
SamplingMask read_mask(const std::string& path);

}  // namespace nasp::fourier
