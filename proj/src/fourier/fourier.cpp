#include "nasp/fourier/fourier.hpp"

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <numeric>
#include <stdexcept>

#include "nasp/core/rng.hpp"

namespace nasp::fourier {

using nasp::core::Rng;

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument(msg); }

std::int64_t budget_for(int R, int H, int W) {
  return static_cast<std::int64_t>(std::llround(static_cast<double>(H) * W / R));
}

void check_shape(int H, int W) {
  if (H < 8 || W < 8 || H % 2 || W % 2)
    fail("mask shape must be even and at least 8x8, got " + std::to_string(H) + "x" +
         std::to_string(W));
}

SamplingMask blank_mask(Pattern p, int R, int H, int W, std::uint32_t seed) {
  SamplingMask m;
  m.pattern = p;
  m.accel = R;
  m.height = H;
  m.width = W;
  m.seed = seed;
  m.selected.assign(static_cast<std::size_t>(H) * W, 0);
  return m;
}

SamplingMask cartesian_mask(Pattern p, int R, int H, int W, std::uint32_t seed) {
  const int lines = (p == Pattern::cartesian_x) ? H : W;
  if (lines % R != 0)
    fail("cartesian mask needs R to divide the line count: " + std::to_string(lines) + " lines, R=" +
         std::to_string(R));
  SamplingMask m = blank_mask(p, R, H, W, seed);
  const int offset = static_cast<int>(seed % static_cast<std::uint32_t>(R));
  for (int l = offset; l < lines; l += R) {
    if (p == Pattern::cartesian_x) {
      std::fill_n(m.selected.begin() + static_cast<std::size_t>(l) * W, W, std::uint8_t{1});
    } else {
      for (int i = 0; i < H; ++i) m.selected[static_cast<std::size_t>(i) * W + l] = 1;
    }
  }
  return m;
}

// Priority keys for weighted sampling without replacement (exponential-race
// form of Efraimidis-Spirakis): ascending-key prefixes of a fixed ordering
// are valid samples for every budget, which makes same-seed masks nested.
std::vector<int> gaussian_order(int H, int W, std::uint32_t seed) {
  const double sigma = 0.25 * std::min(H, W);
  const double cy = H / 2, cx = W / 2;
  Rng rng(seed);
  const std::int64_t n = static_cast<std::int64_t>(H) * W;
  std::vector<std::pair<double, int>> keys(static_cast<std::size_t>(n));
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      const double r2 = (i - cy) * (i - cy) + (j - cx) * (j - cx);
      const double w = std::exp(-r2 / (2.0 * sigma * sigma));
      double u = rng.uniform01();
      while (u <= 0.0) u = rng.uniform01();
      keys[static_cast<std::size_t>(i) * W + j] = {-std::log(u) / w, i * W + j};
    }
  std::sort(keys.begin(), keys.end());
  std::vector<int> order(keys.size());
  for (std::size_t k = 0; k < keys.size(); ++k) order[k] = keys[k].second;
  return order;
}

SamplingMask gaussian_mask(int R, int H, int W, std::uint32_t seed) {
  SamplingMask m = blank_mask(Pattern::gaussian_vd, R, H, W, seed);
  const std::int64_t budget = budget_for(R, H, W);
  std::vector<int> order = gaussian_order(H, W, seed);
  for (std::int64_t k = 0; k < budget; ++k) m.selected[static_cast<std::size_t>(order[k])] = 1;
  return m;
}

// Rasterize n equiangular center-crossing spokes; returns the union as a flag
// grid plus its size.
std::int64_t rasterize_spokes(const std::vector<double>& angles, int H, int W,
                              std::vector<std::uint8_t>& grid) {
  std::fill(grid.begin(), grid.end(), 0);
  const double cy = H / 2, cx = W / 2;
  const double T = 0.5 * std::hypot(H, W);
  std::int64_t count = 0;
  for (double th : angles) {
    const double dy = std::sin(th), dx = std::cos(th);
    for (double t = -T; t <= T; t += 0.5) {
      const int i = static_cast<int>(std::lround(cy + t * dy));
      const int j = static_cast<int>(std::lround(cx + t * dx));
      if (i < 0 || i >= H || j < 0 || j >= W) continue;
      std::uint8_t& cell = grid[static_cast<std::size_t>(i) * W + j];
      if (!cell) {
        cell = 1;
        ++count;
      }
    }
  }
  return count;
}

std::vector<double> equiangular(int n) {
  std::vector<double> a(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) a[static_cast<std::size_t>(k)] = std::numbers::pi * k / n;
  return a;
}

// Uniformly fill unselected cells (restricted to `pool` if non-null) until
// the mask holds exactly `budget` points.
void random_fill(SamplingMask& m, std::int64_t budget, Rng& rng,
                 const std::vector<std::uint8_t>* pool) {
  std::vector<int> cand;
  for (std::size_t k = 0; k < m.selected.size(); ++k)
    if (!m.selected[k] && (!pool || (*pool)[k])) cand.push_back(static_cast<int>(k));
  std::int64_t need = budget - m.count();
  if (need < 0 || need > static_cast<std::int64_t>(cand.size()))
    fail("mask fill cannot reach the exact budget");
  for (std::int64_t k = 0; k < need; ++k) {
    const int pick = k + rng.uniform_int(static_cast<int>(cand.size() - k));
    std::swap(cand[static_cast<std::size_t>(k)], cand[static_cast<std::size_t>(pick)]);
    m.selected[static_cast<std::size_t>(cand[static_cast<std::size_t>(k)])] = 1;
  }
}

// Largest spoke count whose rasterized union fits the budget. The union size
// is not strictly monotone in n (angles re-space), so scan with a patience
// window past the first overshoot.
std::vector<double> fit_spokes(std::int64_t budget, int H, int W) {
  std::vector<std::uint8_t> grid(static_cast<std::size_t>(H) * W);
  int best = 0;
  int over = 0;
  for (int n = 1; n <= 4 * std::max(H, W); ++n) {
    const std::int64_t u = rasterize_spokes(equiangular(n), H, W, grid);
    if (u <= budget) {
      best = n;
      over = 0;
    } else if (++over >= 8) {
      break;
    }
  }
  return best ? equiangular(best) : std::vector<double>{};
}

SamplingMask radial_mask(int R, int H, int W, std::uint32_t seed, std::vector<double>* angles_out) {
  SamplingMask m = blank_mask(Pattern::radial, R, H, W, seed);
  const std::int64_t budget = budget_for(R, H, W);
  std::vector<double> angles = fit_spokes(budget, H, W);
  rasterize_spokes(angles, H, W, m.selected);
  Rng rng = Rng(seed).child(1);
  random_fill(m, budget, rng, nullptr);
  if (angles_out) *angles_out = std::move(angles);
  return m;
}

}  // namespace

Pattern pattern_from_string(const std::string& s) {
  if (s == "cartesian_x") return Pattern::cartesian_x;
  if (s == "cartesian_y") return Pattern::cartesian_y;
  if (s == "radial") return Pattern::radial;
  if (s == "gaussian_vd") return Pattern::gaussian_vd;
  fail("unknown sampling pattern: " + s);
}

std::string pattern_name(Pattern p) {
  switch (p) {
    case Pattern::cartesian_x: return "cartesian_x";
    case Pattern::cartesian_y: return "cartesian_y";
    case Pattern::radial: return "radial";
    case Pattern::gaussian_vd: return "gaussian_vd";
  }
  fail("unknown sampling pattern code");
}

int SamplingMask::count() const {
  return static_cast<int>(std::accumulate(selected.begin(), selected.end(), std::int64_t{0}));
}

bool SamplingMask::is_subset_of(const SamplingMask& other) const {
  if (height != other.height || width != other.width) return false;
  for (std::size_t k = 0; k < selected.size(); ++k)
    if (selected[k] && !other.selected[k]) return false;
  return true;
}

SamplingMask make_mask(Pattern pattern, int R, int height, int width, std::uint32_t seed) {
  check_shape(height, width);
  if (R < 1) fail("acceleration must be >= 1");
  if (budget_for(R, height, width) < 1) fail("mask budget is zero");
  if (R == 1) {
    SamplingMask m = blank_mask(pattern, 1, height, width, seed);
    std::fill(m.selected.begin(), m.selected.end(), std::uint8_t{1});
    return m;
  }
  switch (pattern) {
    case Pattern::cartesian_x:
    case Pattern::cartesian_y:
      return cartesian_mask(pattern, R, height, width, seed);
    case Pattern::gaussian_vd:
      return gaussian_mask(R, height, width, seed);
    case Pattern::radial:
      return radial_mask(R, height, width, seed, nullptr);
  }
  fail("unknown sampling pattern code");
}

AccelerationPyramid make_pyramid(Pattern pattern, int height, int width, std::uint32_t seed,
                                 bool independent) {
  check_shape(height, width);
  AccelerationPyramid pyr;
  pyr.schedule = {32, 16, 8, 4, 2, 1};
  pyr.masks.resize(6);
  if (independent) {
    for (std::size_t i = 0; i < pyr.schedule.size(); ++i)
      pyr.masks[i] = make_mask(pattern, pyr.schedule[i], height, width,
                               seed + 7919u * static_cast<std::uint32_t>(i));
    return pyr;
  }
  // Build bottom-up from FS, subsampling each parent under the pattern rule.
  // Cartesian and gaussian_vd standalone masks are already nested for a fixed
  // seed (consistent line offsets / priority-key prefixes).
  pyr.masks[5] = make_mask(pattern, 1, height, width, seed);
  if (pattern != Pattern::radial) {
    for (int i = 4; i >= 0; --i)
      pyr.masks[static_cast<std::size_t>(i)] =
          make_mask(pattern, pyr.schedule[static_cast<std::size_t>(i)], height, width, seed);
    return pyr;
  }
  // Radial: level R=2 is the standalone mask (trivially inside FS); each
  // further level keeps every 2nd parent spoke (trimming from the tail if the
  // raster still overshoots) and refills from the parent's selected points.
  std::vector<double> angles;
  pyr.masks[4] = radial_mask(2, height, width, seed, &angles);
  for (int i = 3; i >= 0; --i) {
    const int R = pyr.schedule[static_cast<std::size_t>(i)];
    const std::int64_t budget = budget_for(R, height, width);
    std::vector<double> kept;
    for (std::size_t k = 0; k < angles.size(); k += 2) kept.push_back(angles[k]);
    SamplingMask m = blank_mask(Pattern::radial, R, height, width, seed);
    while (rasterize_spokes(kept, height, width, m.selected) > budget && !kept.empty())
      kept.pop_back();
    const SamplingMask& parent = pyr.masks[static_cast<std::size_t>(i) + 1];
    Rng rng = Rng(seed).child(100 + static_cast<std::uint64_t>(i));
    random_fill(m, budget, rng, &parent.selected);
    pyr.masks[static_cast<std::size_t>(i)] = std::move(m);
    angles = std::move(kept);
  }
  return pyr;
}

namespace {

// Even-dimension fftshift (its own inverse).
void fftshift(const std::complex<double>* in, std::complex<double>* out, int H, int W) {
  for (int i = 0; i < H; ++i) {
    const int si = (i + H / 2) % H;
    for (int j = 0; j < W; ++j)
      out[static_cast<std::size_t>(si) * W + (j + W / 2) % W] =
          in[static_cast<std::size_t>(i) * W + j];
  }
}

ComplexImage run_fft(const ComplexImage& x, int sign) {
  const int H = x.height, W = x.width;
  ComplexImage shifted(H, W), out(H, W);
  fftshift(x.data.data(), shifted.data.data(), H, W);
  fftw_plan plan = fftw_plan_dft_2d(
      H, W, reinterpret_cast<fftw_complex*>(shifted.data.data()),
      reinterpret_cast<fftw_complex*>(shifted.data.data()), sign, FFTW_ESTIMATE);
  fftw_execute(plan);
  fftw_destroy_plan(plan);
  fftshift(shifted.data.data(), out.data.data(), H, W);
  const double scale = 1.0 / std::sqrt(static_cast<double>(H) * W);
  for (auto& v : out.data) v *= scale;
  return out;
}

}  // namespace

ComplexImage centered_fft2(const ComplexImage& x) { return run_fft(x, FFTW_FORWARD); }
ComplexImage centered_ifft2(const ComplexImage& k) { return run_fft(k, FFTW_BACKWARD); }

KSpaceMeasurement forward(const ComplexImage& x, const CoilSensitivities& sens,
                          const SamplingMask& mask) {
  if (x.height != mask.height || x.width != mask.width || x.height != sens.height ||
      x.width != sens.width)
    fail("forward: image, sensitivities and mask shapes must match");
  const std::size_t n = x.data.size();
  KSpaceMeasurement y;
  y.mask = mask;
  y.n_coils = sens.n_coils;
  y.values.resize(n * static_cast<std::size_t>(sens.n_coils));
  ComplexImage weighted(x.height, x.width);
  for (int c = 0; c < sens.n_coils; ++c) {
    const std::complex<double>* s = sens.maps.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t k = 0; k < n; ++k) weighted.data[k] = s[k] * x.data[k];
    ComplexImage kspace = centered_fft2(weighted);
    std::complex<double>* out = y.values.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t k = 0; k < n; ++k)
      out[k] = mask.selected[k] ? kspace.data[k] : std::complex<double>{};
  }
  return y;
}

ComplexImage adjoint(const KSpaceMeasurement& y, const CoilSensitivities& sens) {
  if (y.mask.height != sens.height || y.mask.width != sens.width || y.n_coils != sens.n_coils)
    fail("adjoint: measurement and sensitivity shapes must match");
  const std::size_t n = static_cast<std::size_t>(y.mask.height) * y.mask.width;
  ComplexImage acc(y.mask.height, y.mask.width);
  ComplexImage masked(y.mask.height, y.mask.width);
  for (int c = 0; c < y.n_coils; ++c) {
    const std::complex<double>* v = y.values.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t k = 0; k < n; ++k)
      masked.data[k] = y.mask.selected[k] ? v[k] : std::complex<double>{};
    ComplexImage img = centered_ifft2(masked);
    const std::complex<double>* s = sens.maps.data() + static_cast<std::size_t>(c) * n;
    for (std::size_t k = 0; k < n; ++k) acc.data[k] += std::conj(s[k]) * img.data[k];
  }
  return acc;
}

ComplexImage zero_filled(const KSpaceMeasurement& y, const CoilSensitivities& sens) {
  ComplexImage x = adjoint(y, sens);
  normalize_max_magnitude(x);
  return x;
}

double data_consistency_error(const ComplexImage& x, const KSpaceMeasurement& y,
                              const CoilSensitivities& sens) {
  KSpaceMeasurement ex = forward(x, sens, y.mask);
  if (ex.values.size() != y.values.size()) fail("data_consistency_error: coil count mismatch");
  double err = 0.0;
  for (std::size_t k = 0; k < y.values.size(); ++k) err += std::norm(ex.values[k] - y.values[k]);
  return err;
}

CoilSensitivities make_coil_maps(int n_coils, int height, int width, std::uint32_t seed) {
  if (n_coils < 1) fail("make_coil_maps: n_coils must be >= 1");
  CoilSensitivities s;
  s.n_coils = n_coils;
  s.height = height;
  s.width = width;
  const std::size_t n = static_cast<std::size_t>(height) * width;
  s.maps.assign(n * static_cast<std::size_t>(n_coils), {1.0, 0.0});
  if (n_coils == 1) return s;
  Rng root(seed);
  for (int c = 0; c < n_coils; ++c) {
    Rng rng = root.child(static_cast<std::uint64_t>(c));
    // Low-order complex polynomial in normalized coordinates u,v in [-1,1].
    std::complex<double> a[6];
    for (auto& coef : a) coef = {rng.normal(), rng.normal()};
    a[0] += std::complex<double>{1.5, 0.0};  // keep the sum-of-squares well away from zero
    std::complex<double>* m = s.maps.data() + static_cast<std::size_t>(c) * n;
    for (int i = 0; i < height; ++i) {
      const double v = 2.0 * i / (height - 1) - 1.0;
      for (int j = 0; j < width; ++j) {
        const double u = 2.0 * j / (width - 1) - 1.0;
        m[static_cast<std::size_t>(i) * width + j] =
            a[0] + a[1] * u + a[2] * v + a[3] * (u * v) + a[4] * (u * u) + a[5] * (v * v);
      }
    }
  }
  for (std::size_t k = 0; k < n; ++k) {
    double sos = 0.0;
    for (int c = 0; c < n_coils; ++c) sos += std::norm(s.maps[static_cast<std::size_t>(c) * n + k]);
    const double inv = 1.0 / std::sqrt(std::max(sos, 1e-24));
    for (int c = 0; c < n_coils; ++c) s.maps[static_cast<std::size_t>(c) * n + k] *= inv;
  }
  return s;
}

void normalize_max_magnitude(ComplexImage& x) {
  double mx = 0.0;
  for (const auto& v : x.data) mx = std::max(mx, std::abs(v));
  if (mx == 0.0) return;
  const double inv = 1.0 / mx;
  for (auto& v : x.data) v *= inv;
}

namespace {
void put_u32(std::string& s, std::uint32_t v) {
  for (int k = 0; k < 4; ++k) s.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}
std::uint32_t get_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
}  // namespace

void write_mask(const std::string& path, const SamplingMask& mask) {
  std::string buf = "MRMK";
  put_u32(buf, 1);
  put_u32(buf, static_cast<std::uint32_t>(mask.height));
  put_u32(buf, static_cast<std::uint32_t>(mask.width));
  put_u32(buf, static_cast<std::uint32_t>(mask.pattern));
  put_u32(buf, static_cast<std::uint32_t>(mask.accel));
  put_u32(buf, mask.seed);
  buf.append(reinterpret_cast<const char*>(mask.selected.data()), mask.selected.size());
  std::ofstream f(path, std::ios::binary);
  if (!f) fail("write_mask: cannot open " + path);
  f.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!f) fail("write_mask: short write to " + path);
}

SamplingMask read_mask(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail("read_mask: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  if (buf.size() < 28 || buf.compare(0, 4, "MRMK") != 0)
    fail("read_mask: not an MRMK file: " + path);
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data()) + 4;
  const std::uint32_t version = get_u32(p);
  if (version != 1) fail("read_mask: unsupported MRMK version");
  SamplingMask m;
  m.height = static_cast<int>(get_u32(p + 4));
  m.width = static_cast<int>(get_u32(p + 8));
  const std::uint32_t pat = get_u32(p + 12);
  if (pat > 3) fail("read_mask: bad pattern code");
  m.pattern = static_cast<Pattern>(pat);
  m.accel = static_cast<int>(get_u32(p + 16));
  m.seed = get_u32(p + 20);
  const std::size_t n = static_cast<std::size_t>(m.height) * static_cast<std::size_t>(m.width);
  if (buf.size() != 28 + n) fail("read_mask: truncated MRMK payload");
  m.selected.resize(n);
  std::memcpy(m.selected.data(), buf.data() + 28, n);
  for (std::uint8_t v : m.selected)
    if (v > 1) fail("read_mask: mask cells must be 0 or 1");
  return m;
}

}  // namespace nasp::fourier
