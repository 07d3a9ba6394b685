#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "nasp/core/rng.hpp"
#include "nasp/fourier/fourier.hpp"

using namespace nasp::fourier;
using nasp::core::Rng;

namespace {

ComplexImage random_image(Rng& rng, int H, int W, bool normalize = true) {
  ComplexImage x(H, W);
  for (auto& v : x.data) v = {rng.normal(), rng.normal()};
  if (normalize) normalize_max_magnitude(x);
  return x;
}

std::complex<double> vdot(const std::vector<std::complex<double>>& a,
                          const std::vector<std::complex<double>>& b) {
  std::complex<double> s{};
  for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * std::conj(b[k]);
  return s;
}

double vnorm(const std::vector<std::complex<double>>& a) {
  double s = 0.0;
  for (const auto& v : a) s += std::norm(v);
  return std::sqrt(s);
}

double mean_radius(const SamplingMask& m) {
  const double cy = m.height / 2, cx = m.width / 2;
  double s = 0.0;
  int n = 0;
  for (int i = 0; i < m.height; ++i)
    for (int j = 0; j < m.width; ++j)
      if (m.selected[static_cast<std::size_t>(i) * m.width + j]) {
        s += std::hypot(i - cy, j - cx);
        ++n;
      }
  return s / n;
}

}  // namespace

TEST_CASE("masks: cartesian budgets, offsets and line structure") {
  SamplingMask m = make_mask(Pattern::cartesian_y, 32, 256, 256, 0);
  CHECK(m.count() == 2048);  // 8 fully sampled columns
  int cols = 0;
  for (int j = 0; j < 256; ++j) {
    bool all = true, any = false;
    for (int i = 0; i < 256; ++i) {
      const bool v = m.selected[static_cast<std::size_t>(i) * 256 + j];
      all = all && v;
      any = any || v;
    }
    CHECK(all == any);  // constant along the column
    cols += all;
  }
  CHECK(cols == 8);

  SamplingMask r = make_mask(Pattern::cartesian_x, 2, 64, 64, 3);
  CHECK(r.count() == 2048);
  for (int i = 0; i < 64; ++i) {
    const bool want = (i % 2) == 1;  // offset = 3 mod 2
    for (int j = 0; j < 64; ++j)
      CHECK(static_cast<bool>(r.selected[static_cast<std::size_t>(i) * 64 + j]) == want);
  }
  CHECK_THROWS(make_mask(Pattern::cartesian_x, 24, 64, 64, 0));  // 24 does not divide 64
}

TEST_CASE("masks: exact budget for every pattern and acceleration") {
  for (Pattern p : {Pattern::cartesian_x, Pattern::cartesian_y, Pattern::radial,
                    Pattern::gaussian_vd})
    for (int R : {1, 2, 4, 8, 16, 32}) {
      SamplingMask m = make_mask(p, R, 64, 64, 9);
      CHECK(m.count() == 4096 / R);
    }
  CHECK_THROWS(make_mask(Pattern::gaussian_vd, 7, 64, 63, 0));   // odd width
  CHECK_THROWS(make_mask(Pattern::gaussian_vd, 123456, 64, 64, 0));  // zero budget
}

TEST_CASE("masks: determinism under a fixed seed") {
  for (Pattern p : {Pattern::radial, Pattern::gaussian_vd}) {
    SamplingMask a = make_mask(p, 8, 64, 64, 1234);
    SamplingMask b = make_mask(p, 8, 64, 64, 1234);
    CHECK(a.selected == b.selected);
    SamplingMask c = make_mask(p, 8, 64, 64, 1235);
    CHECK(a.selected != c.selected);
  }
}

TEST_CASE("masks: gaussian_vd concentrates samples near the k-space centre") {
  // Against a uniform-random mask of the same budget, averaged over 100 seeds.
  double g_sum = 0.0, u_sum = 0.0;
  for (std::uint32_t seed = 0; seed < 100; ++seed) {
    SamplingMask g = make_mask(Pattern::gaussian_vd, 8, 64, 64, seed);
    CHECK(g.count() == 512);
    g_sum += mean_radius(g);
    SamplingMask u = g;
    std::fill(u.selected.begin(), u.selected.end(), 0);
    Rng rng(seed ^ 0xdeadbeefu);
    int placed = 0;
    while (placed < 512) {
      const int k = rng.uniform_int(64 * 64);
      if (!u.selected[static_cast<std::size_t>(k)]) {
        u.selected[static_cast<std::size_t>(k)] = 1;
        ++placed;
      }
    }
    u_sum += mean_radius(u);
  }
  CHECK(g_sum / 100.0 < u_sum / 100.0);
}

TEST_CASE("masks: pyramid counts, schedule and the nesting chain") {
  for (Pattern p : {Pattern::cartesian_x, Pattern::cartesian_y, Pattern::radial,
                    Pattern::gaussian_vd}) {
    AccelerationPyramid pyr = make_pyramid(p, 64, 64, 17);
    REQUIRE(pyr.schedule == std::vector<int>{32, 16, 8, 4, 2, 1});
    REQUIRE(pyr.masks.size() == 6);
    const int counts[6] = {128, 256, 512, 1024, 2048, 4096};
    for (int i = 0; i < 6; ++i) {
      CHECK(pyr.masks[static_cast<std::size_t>(i)].count() == counts[i]);
      CHECK(pyr.masks[static_cast<std::size_t>(i)].accel == pyr.schedule[static_cast<std::size_t>(i)]);
    }
    for (int i = 0; i < 5; ++i)
      CHECK(pyr.masks[static_cast<std::size_t>(i)].is_subset_of(
          pyr.masks[static_cast<std::size_t>(i) + 1]));
  }
}

TEST_CASE("masks: cartesian_y pyramid selects 2,4,8,16,32,64 columns") {
  AccelerationPyramid pyr = make_pyramid(Pattern::cartesian_y, 64, 64, 0);
  const int want[6] = {2, 4, 8, 16, 32, 64};
  for (int lvl = 0; lvl < 6; ++lvl) {
    int cols = 0;
    const SamplingMask& m = pyr.masks[static_cast<std::size_t>(lvl)];
    for (int j = 0; j < 64; ++j) cols += m.selected[static_cast<std::size_t>(j)];
    CHECK(cols == want[lvl]);
  }
}

TEST_CASE("fft: centered orthonormal transform round-trips and is an isometry") {
  Rng rng(5);
  ComplexImage x = random_image(rng, 16, 24, false);
  ComplexImage k = centered_fft2(x);
  CHECK(vnorm(k.data) == doctest::Approx(vnorm(x.data)).epsilon(1e-12));
  ComplexImage back = centered_ifft2(k);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    CHECK(std::abs(back.data[i] - x.data[i]) < 1e-12);
  // A centred impulse transforms to a flat spectrum of 1/sqrt(N).
  ComplexImage imp(16, 16);
  imp.at(8, 8) = 1.0;
  ComplexImage spec = centered_fft2(imp);
  for (const auto& v : spec.data) {
    CHECK(v.real() == doctest::Approx(1.0 / 16.0).epsilon(1e-12));
    CHECK(std::abs(v.imag()) < 1e-14);
  }
}

TEST_CASE("encoding: forward/adjoint are exact adjoints (100 random pairs)") {
  Rng rng(7);
  int trial = 0;
  for (Pattern p : {Pattern::cartesian_x, Pattern::cartesian_y, Pattern::radial,
                    Pattern::gaussian_vd})
    for (int R : {2, 8, 32})
      for (int rep = 0; rep < 9; ++rep) {
        const int coils = 1 + (trial % 3);
        SamplingMask mask = make_mask(p, R, 32, 32, static_cast<std::uint32_t>(trial));
        CoilSensitivities sens = make_coil_maps(coils, 32, 32, static_cast<std::uint32_t>(trial));
        ComplexImage x = random_image(rng, 32, 32, false);
        KSpaceMeasurement y;
        y.mask = mask;
        y.n_coils = coils;
        y.values.resize(static_cast<std::size_t>(coils) * 32 * 32);
        for (auto& v : y.values) v = {rng.normal(), rng.normal()};
        KSpaceMeasurement ex = forward(x, sens, mask);
        ComplexImage aty = adjoint(y, sens);
        const std::complex<double> lhs = vdot(ex.values, y.values);
        const std::complex<double> rhs = vdot(x.data, aty.data);
        CHECK(std::abs(lhs - rhs) <= 1e-5 * vnorm(x.data) * vnorm(y.values));
        ++trial;
      }
  CHECK(trial >= 100);
}

TEST_CASE("encoding: FS single-coil isometry and unitary round trip") {
  Rng rng(8);
  ComplexImage x = random_image(rng, 64, 64);
  SamplingMask fs = make_mask(Pattern::cartesian_x, 1, 64, 64, 0);
  CoilSensitivities sens = make_coil_maps(1, 64, 64, 0);
  KSpaceMeasurement y = forward(x, sens, fs);
  CHECK(vnorm(y.values) == doctest::Approx(vnorm(x.data)).epsilon(1e-6));
  ComplexImage back = adjoint(y, sens);
  for (std::size_t i = 0; i < x.data.size(); ++i)
    CHECK(std::abs(back.data[i] - x.data[i]) < 1e-5);
  // x = 0 maps to an all-zero measurement.
  ComplexImage zero(64, 64);
  KSpaceMeasurement yz = forward(zero, sens, fs);
  CHECK(vnorm(yz.values) == 0.0);
  ComplexImage zimg = zero_filled(yz, sens);
  CHECK(vnorm(zimg.data) == 0.0);
}

TEST_CASE("encoding: measurements vanish off-mask") {
  Rng rng(9);
  ComplexImage x = random_image(rng, 32, 32);
  SamplingMask m = make_mask(Pattern::gaussian_vd, 4, 32, 32, 3);
  CoilSensitivities sens = make_coil_maps(2, 32, 32, 3);
  KSpaceMeasurement y = forward(x, sens, m);
  const std::size_t n = 32 * 32;
  for (int c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < n; ++k)
      if (!m.selected[k]) CHECK(y.values[static_cast<std::size_t>(c) * n + k] == std::complex<double>{});
}

TEST_CASE("encoding: zero_filled of an FS measurement reproduces the image") {
  Rng rng(10);
  ComplexImage x = random_image(rng, 64, 64);  // max magnitude already 1
  SamplingMask fs = make_mask(Pattern::radial, 1, 64, 64, 0);
  CoilSensitivities sens = make_coil_maps(3, 64, 64, 5);
  ComplexImage z = zero_filled(forward(x, sens, fs), sens);
  for (std::size_t i = 0; i < x.data.size(); ++i) CHECK(std::abs(z.data[i] - x.data[i]) < 1e-5);
}

TEST_CASE("encoding: data consistency error") {
  Rng rng(11);
  ComplexImage x = random_image(rng, 32, 32);
  SamplingMask m = make_mask(Pattern::radial, 4, 32, 32, 2);
  CoilSensitivities sens = make_coil_maps(2, 32, 32, 2);
  KSpaceMeasurement y = forward(x, sens, m);
  CHECK(data_consistency_error(x, y, sens) <= 1e-10);
  ComplexImage zero(32, 32);
  double ysq = 0.0;
  for (const auto& v : y.values) ysq += std::norm(v);
  CHECK(data_consistency_error(zero, y, sens) == doctest::Approx(ysq).epsilon(1e-10));
  // Brute-force oracle on a random inconsistent pair: selected entries only.
  ComplexImage x2 = random_image(rng, 32, 32);
  KSpaceMeasurement ex2 = forward(x2, sens, m);
  double ref = 0.0;
  const std::size_t n = 32 * 32;
  for (int c = 0; c < 2; ++c)
    for (std::size_t k = 0; k < n; ++k)
      if (m.selected[k])
        ref += std::norm(ex2.values[static_cast<std::size_t>(c) * n + k] -
                         y.values[static_cast<std::size_t>(c) * n + k]);
  CHECK(data_consistency_error(x2, y, sens) == doctest::Approx(ref).epsilon(1e-9));
}

TEST_CASE("coil maps: identity for one coil, normalized sum of squares, deterministic") {
  CoilSensitivities one = make_coil_maps(1, 32, 32, 99);
  for (const auto& v : one.maps) CHECK(v == std::complex<double>{1.0, 0.0});
  CoilSensitivities four = make_coil_maps(4, 64, 64, 7);
  const std::size_t n = 64 * 64;
  for (std::size_t k = 0; k < n; ++k) {
    double sos = 0.0;
    for (int c = 0; c < 4; ++c) sos += std::norm(four.maps[static_cast<std::size_t>(c) * n + k]);
    CHECK(sos == doctest::Approx(1.0).epsilon(1e-5));
  }
  CoilSensitivities again = make_coil_maps(4, 64, 64, 7);
  CHECK(four.maps == again.maps);
  CHECK_THROWS(make_coil_maps(0, 32, 32, 0));
}

TEST_CASE("mask io: MRMK round trip and frozen header layout") {
  SamplingMask m = make_mask(Pattern::gaussian_vd, 8, 64, 64, 42);
  const std::string path = (std::filesystem::temp_directory_path() / "nasp_test_mask.mrmk").string();
  write_mask(path, m);
  CHECK(std::filesystem::file_size(path) == 28 + 64 * 64);
  SamplingMask r = read_mask(path);
  CHECK(r.pattern == m.pattern);
  CHECK(r.accel == 8);
  CHECK(r.seed == 42);
  CHECK(r.height == 64);
  CHECK(r.width == 64);
  CHECK(r.selected == m.selected);
  std::ifstream f(path, std::ios::binary);
  unsigned char hdr[28];
  f.read(reinterpret_cast<char*>(hdr), 28);
  const unsigned char want[28] = {'M', 'R', 'M', 'K', 1, 0, 0, 0, 64, 0, 0, 0, 64, 0,
                                  0,   0,   3,   0,   0, 0, 8, 0, 0, 0,  42, 0, 0, 0};
  for (int i = 0; i < 28; ++i) CHECK(hdr[i] == want[i]);
  std::filesystem::remove(path);
  CHECK_THROWS(read_mask(path + ".missing"));
}
