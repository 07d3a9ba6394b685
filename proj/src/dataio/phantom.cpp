#include "nasp/dataio/phantom.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "nasp/core/rng.hpp"

namespace nasp::dataio {

using fourier::ComplexImage;
using nasp::core::Rng;

Contrast contrast_from_string(const std::string& s) {
  if (s == "t1-like") return Contrast::t1_like;
  if (s == "t2-like") return Contrast::t2_like;
  if (s == "flair-like") return Contrast::flair_like;
  throw std::invalid_argument("unknown contrast: " + s);
}

std::string contrast_name(Contrast c) {
  switch (c) {
    case Contrast::t1_like: return "t1-like";
    case Contrast::t2_like: return "t2-like";
    case Contrast::flair_like: return "flair-like";
  }
  throw std::invalid_argument("unknown contrast code");
}

ComplexImage gen_phantom(const PhantomSpec& spec) {
  const int H = spec.height, W = spec.width;
  if (H < 8 || W < 8 || H % 2 || W % 2)
    throw std::invalid_argument("gen_phantom: shape must be even and at least 8x8");
  if (spec.n_ellipses < 3 || spec.n_ellipses > 12)
    throw std::invalid_argument("gen_phantom: n_ellipses must be in [3,12]");
  if (!(spec.intensity_lo > 0.0) || spec.intensity_hi < spec.intensity_lo)
    throw std::invalid_argument("gen_phantom: bad intensity range");
  constexpr double kTau = 2.0 * std::numbers::pi;
  Rng rng(spec.seed);
  ComplexImage img(H, W);
  for (int e = 0; e < spec.n_ellipses; ++e) {
    const double cy = H * (0.5 + 0.3 * (2.0 * rng.uniform01() - 1.0));
    const double cx = W * (0.5 + 0.3 * (2.0 * rng.uniform01() - 1.0));
    const double a = (0.06 + 0.22 * rng.uniform01()) * H;
    const double b = (0.06 + 0.22 * rng.uniform01()) * W;
    const double th = std::numbers::pi * rng.uniform01();
    const double mag = spec.intensity_lo + (spec.intensity_hi - spec.intensity_lo) * rng.uniform01();
    const std::complex<double> amp = std::polar(mag, kTau * rng.uniform01());
    const double ct = std::cos(th), st = std::sin(th);
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double dy = i - cy, dx = j - cx;
        const double xr = (dx * ct + dy * st) / a;
        const double yr = (-dx * st + dy * ct) / b;
        if (xr * xr + yr * yr <= 1.0) img.at(i, j) += amp;
      }
  }
  // Smooth background phase from a handful of low-order Fourier modes.
  struct Mode {
    int p, q;
    double c, psi;
  };
  std::vector<Mode> modes;
  for (int p = 0; p <= 2; ++p)
    for (int q = -2; q <= 2; ++q) {
      if (p == 0 && q <= 0) continue;
      Mode m;
      m.p = p;
      m.q = q;
      m.c = spec.phase_scale * rng.normal() / (1.0 + p * p + q * q);
      m.psi = kTau * rng.uniform01();
      modes.push_back(m);
    }
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double phi = 0.0;
      for (const Mode& m : modes)
        phi += m.c * std::cos(kTau * (m.p * static_cast<double>(i) / H +
                                      m.q * static_cast<double>(j) / W) +
                              m.psi);
      img.at(i, j) *= std::polar(1.0, phi);
    }
  fourier::normalize_max_magnitude(img);
  for (auto& v : img.data)
    v = {static_cast<double>(static_cast<float>(v.real())),
         static_cast<double>(static_cast<float>(v.imag()))};
  return img;
}

PhantomSpec phantom_spec_for(Contrast c, int height, int width, std::uint32_t seed) {
  PhantomSpec s;
  s.height = height;
  s.width = width;
  s.seed = seed;
  Rng rng = Rng(seed).child(777);
  switch (c) {
    case Contrast::t1_like:
      s.n_ellipses = 6 + rng.uniform_int(5);  // 6..10, bright parenchyma
      s.intensity_lo = 0.55;
      s.intensity_hi = 1.0;
      break;
    case Contrast::t2_like:
      s.n_ellipses = 6 + rng.uniform_int(5);  // mid-range intensities
      s.intensity_lo = 0.2;
      s.intensity_hi = 0.65;
      break;
    case Contrast::flair_like:
      s.n_ellipses = 4 + rng.uniform_int(3);  // 4..6 sparse bright lesions
      s.intensity_lo = 0.75;
      s.intensity_hi = 1.0;
      break;
  }
  return s;
}

}  // namespace nasp::dataio
