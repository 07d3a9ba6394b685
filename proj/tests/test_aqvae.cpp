#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "nasp/aqvae/codebook.hpp"
#include "nasp/aqvae/tokenizer.hpp"
#include "nasp/aqvae/train.hpp"
#include "nasp/core/optim.hpp"
#include "nasp/dataio/slice_io.hpp"
#include "nasp/metrics/metrics.hpp"

using namespace nasp;
using nasp::ad::Tensor;
using nasp::core::Rng;
using nasp::fourier::ComplexImage;

namespace {

std::vector<double> random_vec(Rng& rng, int n, double scale = 1.0) {
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = scale * rng.normal(0.0, 1.0);
  return v;
}

aqvae::Codebook random_codebook(int size, int dim, std::uint64_t seed) {
  Rng rng(seed);
  return aqvae::make_codebook(size, dim, rng);
}

// Reduced geometry small enough for gradient probes but with the full
// six-level token schedule: 32x32 images, base latent side 8.
aqvae::TokenizerConfig tiny_cfg() {
  aqvae::TokenizerConfig c;
  c.image_side = 32;
  c.base_width = 8;
  c.channel_mults = {1, 1, 2};
  c.res_blocks_per_stage = 1;
  c.groups = 4;
  c.latent_dim = 4;
  c.codebook_size = 32;
  c.token_sides = {3, 4, 5, 6, 7, 8};
  c.seed = 11;
  return c;
}

dataio::PyramidSample tiny_sample(std::uint32_t seed = 3) {
  dataio::PhantomSpec spec = dataio::phantom_spec_for(dataio::Contrast::t1_like, 32, 32, seed);
  ComplexImage img = dataio::gen_phantom(spec);
  fourier::CoilSensitivities sens = fourier::make_coil_maps(1, 32, 32, 90 + seed);
  return dataio::make_pyramid_sample(img, fourier::Pattern::gaussian_vd,
                                     dataio::Contrast::t1_like, seed + 1, sens);
}

double l2(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

// Rotation-trick vector-Jacobian product computed from first principles:
// dz = lambda * (g - 2 r (r.g) + 2 zhat (qhat.g)).
std::vector<double> rotation_vjp(const std::vector<double>& z, const std::vector<double>& q,
                                 const std::vector<double>& g) {
  const std::size_t d = z.size();
  const double nz = l2(z), nq = l2(q);
  std::vector<double> zh(d), qh(d), r(d);
  for (std::size_t i = 0; i < d; ++i) {
    zh[i] = z[i] / nz;
    qh[i] = q[i] / nq;
    r[i] = zh[i] + qh[i];
  }
  const double nr = l2(r);
  for (auto& x : r) x /= nr;
  const double lam = nq / nz;
  const double rg = dot(r, g), qg = dot(qh, g);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = lam * (g[i] - 2.0 * r[i] * rg + 2.0 * zh[i] * qg);
  return out;
}

// The frozen surrogate map f(v) = lambda0 * R0 v with R0, lambda0 computed
// once at z0: R0 v = v - 2 r (r.v) + 2 qhat (zhat.v).
std::vector<double> rotation_forward_frozen(const std::vector<double>& z0,
                                            const std::vector<double>& q,
                                            const std::vector<double>& v) {
  const std::size_t d = z0.size();
  const double nz = l2(z0), nq = l2(q);
  std::vector<double> zh(d), qh(d), r(d);
  for (std::size_t i = 0; i < d; ++i) {
    zh[i] = z0[i] / nz;
    qh[i] = q[i] / nq;
    r[i] = zh[i] + qh[i];
  }
  const double nr = l2(r);
  for (auto& x : r) x /= nr;
  const double lam = nq / nz;
  const double rv = dot(r, v), zv = dot(zh, v);
  std::vector<double> out(d);
  for (std::size_t i = 0; i < d; ++i) out[i] = lam * (v[i] - 2.0 * r[i] * rv + 2.0 * qh[i] * zv);
  return out;
}

double f32(double x) { return static_cast<double>(static_cast<float>(x)); }

struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() / ("nasp_test_" + tag);
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace

// ---------------------------------------------------------------------------
// Codebook and nearest-neighbor assignment
// ---------------------------------------------------------------------------

TEST_CASE("codebook entry quantizes to its own index with zero error") {
  aqvae::Codebook cb = random_codebook(32, 8, 101);
  const double* row = cb.vectors.data() + 17 * cb.dim;
  CHECK(aqvae::nearest_code(cb, row) == 17);
  Tensor z = Tensor::from_data({cb.dim, 1, 1},
                               std::vector<double>(row, row + cb.dim));
  aqvae::QuantizeOut out = aqvae::quantize(cb, z, 1, 1, false);
  REQUIRE(out.tokens.indices.size() == 1);
  CHECK(out.tokens.indices[0] == 17);
  double err = 0.0;
  for (int i = 0; i < cb.dim; ++i) err += std::abs(out.quantized.values()[i] - row[i]);
  CHECK(err == 0.0);
}

TEST_CASE("nearest code agrees with an exhaustive reference scan") {
  aqvae::Codebook cb = random_codebook(64, 8, 202);
  Rng rng(7);
  for (int t = 0; t < 1000; ++t) {
    std::vector<double> z = random_vec(rng, cb.dim, 0.8);
    int best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (int v = 0; v < cb.size; ++v) {
      double d2 = 0.0;
      for (int i = 0; i < cb.dim; ++i) {
        double diff = z[static_cast<std::size_t>(i)] - cb.vectors[static_cast<std::size_t>(v) * cb.dim + i];
        d2 += diff * diff;
      }
      if (d2 < best_d) {
        best_d = d2;
        best = v;
      }
    }
    CHECK(aqvae::nearest_code(cb, z.data()) == best);
  }
}

TEST_CASE("nearest code ties resolve to the lowest index") {
  aqvae::Codebook cb = random_codebook(8, 4, 303);
  for (int i = 0; i < cb.dim; ++i) cb.vectors[static_cast<std::size_t>(5) * cb.dim + i] =
      cb.vectors[static_cast<std::size_t>(2) * cb.dim + i];
  const double* row = cb.vectors.data() + 5 * cb.dim;
  CHECK(aqvae::nearest_code(cb, row) == 2);
}

TEST_CASE("quantize downsamples by area averaging and emits codebook rows") {
  aqvae::Codebook cb = random_codebook(16, 4, 404);
  Rng rng(5);
  Tensor z = Tensor::from_data({4, 8, 8}, random_vec(rng, 4 * 8 * 8, 0.6));
  aqvae::QuantizeOut out = aqvae::quantize(cb, z, 4, 2, false);
  CHECK(out.tokens.side == 4);
  CHECK(out.tokens.accel == 2);

  Tensor pooled = ad::adaptive_avg_pool(z, 4, 4);
  REQUIRE(out.z_down.values().size() == pooled.values().size());
  for (std::size_t i = 0; i < pooled.values().size(); ++i)
    CHECK(out.z_down.values()[i] == doctest::Approx(pooled.values()[i]).epsilon(1e-14));

  const int n = 16;
  for (int p = 0; p < n; ++p) {
    std::vector<double> zp(4);
    for (int c = 0; c < 4; ++c) zp[static_cast<std::size_t>(c)] = pooled.values()[static_cast<std::size_t>(c) * n + p];
    const int idx = aqvae::nearest_code(cb, zp.data());
    CHECK(out.tokens.indices[static_cast<std::size_t>(p)] == idx);
    for (int c = 0; c < 4; ++c)
      CHECK(out.quantized.values()[static_cast<std::size_t>(c) * n + p] ==
            cb.vectors[static_cast<std::size_t>(idx) * cb.dim + c]);
  }
}

TEST_CASE("quantize rejects bad geometry") {
  aqvae::Codebook cb = random_codebook(16, 4, 11);
  Rng rng(6);
  Tensor z = Tensor::from_data({4, 4, 4}, random_vec(rng, 64));
  CHECK_THROWS(aqvae::quantize(cb, z, 8, 1, false));  // target above input side
  Tensor bad = Tensor::from_data({3, 4, 4}, random_vec(rng, 48));
  CHECK_THROWS(aqvae::quantize(cb, bad, 2, 1, false));  // channel/dim mismatch
  Tensor flat = Tensor::from_data({4, 16}, random_vec(rng, 64));
  CHECK_THROWS(aqvae::quantize(cb, flat, 2, 1, false));  // rank
}

TEST_CASE("quantize train and eval forwards are bitwise identical") {
  aqvae::Codebook cb = random_codebook(16, 6, 505);
  Rng rng(9);
  std::vector<double> data = random_vec(rng, 6 * 4 * 4, 0.7);
  Tensor ze = Tensor::from_data({6, 4, 4}, data);
  Tensor zt = Tensor::from_data({6, 4, 4}, data, /*requires_grad=*/true);
  aqvae::QuantizeOut a = aqvae::quantize(cb, ze, 2, 4, false);
  aqvae::QuantizeOut b = aqvae::quantize(cb, zt, 2, 4, true);
  REQUIRE(a.quantized.values().size() == b.quantized.values().size());
  for (std::size_t i = 0; i < a.quantized.values().size(); ++i)
    CHECK(a.quantized.values()[i] == b.quantized.values()[i]);
  CHECK(a.tokens.indices == b.tokens.indices);
}

TEST_CASE("rotation-trick gradient matches the frozen surrogate") {
  const int d = 8;
  aqvae::Codebook cb = random_codebook(16, d, 606);
  Rng rng(13);
  std::vector<double> z0 = random_vec(rng, d, 0.9);
  std::vector<double> g = random_vec(rng, d);

  Tensor z = Tensor::from_data({d, 1, 1}, z0, /*requires_grad=*/true);
  aqvae::QuantizeOut out = aqvae::quantize(cb, z, 1, 1, true);
  const int idx = out.tokens.indices[0];
  std::vector<double> q(cb.vectors.begin() + static_cast<std::ptrdiff_t>(idx) * d,
                        cb.vectors.begin() + static_cast<std::ptrdiff_t>(idx + 1) * d);

  // Forward value is exactly the selected code (the rotation maps zhat onto
  // qhat and the scale matches the norms).
  for (int i = 0; i < d; ++i) CHECK(out.quantized.values()[static_cast<std::size_t>(i)] == q[static_cast<std::size_t>(i)]);

  Tensor w = Tensor::from_data({d, 1, 1}, g);
  ad::sum(out.quantized * w).backward();
  REQUIRE(z.node()->grad.size() == static_cast<std::size_t>(d));

  // Analytic vector-Jacobian product.
  std::vector<double> expect = rotation_vjp(z0, q, g);
  for (int i = 0; i < d; ++i)
    CHECK(z.node()->grad[static_cast<std::size_t>(i)] ==
          doctest::Approx(expect[static_cast<std::size_t>(i)]).epsilon(1e-9));

  // Central finite differences through the frozen surrogate map.
  const double h = 1e-3;
  std::vector<double> fd(static_cast<std::size_t>(d));
  for (int j = 0; j < d; ++j) {
    std::vector<double> zp = z0, zm = z0;
    zp[static_cast<std::size_t>(j)] += h;
    zm[static_cast<std::size_t>(j)] -= h;
    std::vector<double> fp = rotation_forward_frozen(z0, q, zp);
    std::vector<double> fm = rotation_forward_frozen(z0, q, zm);
    double acc = 0.0;
    for (int i = 0; i < d; ++i)
      acc += g[static_cast<std::size_t>(i)] *
             (fp[static_cast<std::size_t>(i)] - fm[static_cast<std::size_t>(i)]) / (2.0 * h);
    fd[static_cast<std::size_t>(j)] = acc;
  }
  for (int j = 0; j < d; ++j) {
    const double a = z.node()->grad[static_cast<std::size_t>(j)];
    const double b = fd[static_cast<std::size_t>(j)];
    CHECK(std::abs(a - b) <= 1e-4 * std::max(1.0, std::abs(b)));
  }
}

TEST_CASE("rotation-trick gradient composes with the area downsample") {
  const int d = 4;
  aqvae::Codebook cb = random_codebook(16, d, 707);
  Rng rng(21);
  std::vector<double> zdata = random_vec(rng, d * 4 * 4, 0.8);
  std::vector<double> wdata = random_vec(rng, d * 2 * 2);
  Tensor z = Tensor::from_data({d, 4, 4}, zdata, /*requires_grad=*/true);
  Tensor w = Tensor::from_data({d, 2, 2}, wdata);
  aqvae::QuantizeOut out = aqvae::quantize(cb, z, 2, 1, true);
  ad::sum(out.quantized * w).backward();

  // Expected: per output position p, the rotation VJP of that position's
  // pooled vector, spread evenly over its 2x2 source block.
  for (int pi = 0; pi < 2; ++pi) {
    for (int pj = 0; pj < 2; ++pj) {
      const int p = pi * 2 + pj;
      std::vector<double> zp(static_cast<std::size_t>(d)), gp(static_cast<std::size_t>(d));
      for (int c = 0; c < d; ++c) {
        gp[static_cast<std::size_t>(c)] = wdata[static_cast<std::size_t>(c) * 4 + p];
        double acc = 0.0;
        for (int di = 0; di < 2; ++di)
          for (int dj = 0; dj < 2; ++dj)
            acc += zdata[static_cast<std::size_t>(c) * 16 + (2 * pi + di) * 4 + (2 * pj + dj)];
        zp[static_cast<std::size_t>(c)] = acc / 4.0;
      }
      const int idx = out.tokens.indices[static_cast<std::size_t>(p)];
      std::vector<double> q(cb.vectors.begin() + static_cast<std::ptrdiff_t>(idx) * d,
                            cb.vectors.begin() + static_cast<std::ptrdiff_t>(idx + 1) * d);
      std::vector<double> vjp = rotation_vjp(zp, q, gp);
      for (int c = 0; c < d; ++c) {
        for (int di = 0; di < 2; ++di) {
          for (int dj = 0; dj < 2; ++dj) {
            const std::size_t at =
                static_cast<std::size_t>(c) * 16 + (2 * pi + di) * 4 + (2 * pj + dj);
            CHECK(z.node()->grad[at] ==
                  doctest::Approx(vjp[static_cast<std::size_t>(c)] / 4.0).epsilon(1e-9));
          }
        }
      }
    }
  }
}

TEST_CASE("degenerate quantize geometry falls back to a pass-through gradient") {
  const int d = 6;
  aqvae::Codebook cb = random_codebook(8, d, 808);
  Rng rng(31);
  std::vector<double> g = random_vec(rng, d);
  Tensor z = Tensor::from_data({d, 1, 1}, std::vector<double>(static_cast<std::size_t>(d), 0.0),
                               /*requires_grad=*/true);
  aqvae::QuantizeOut out = aqvae::quantize(cb, z, 1, 1, true);
  Tensor w = Tensor::from_data({d, 1, 1}, g);
  ad::sum(out.quantized * w).backward();
  for (int i = 0; i < d; ++i)
    CHECK(z.node()->grad[static_cast<std::size_t>(i)] ==
          doctest::Approx(g[static_cast<std::size_t>(i)]).epsilon(1e-15));
}

// ---------------------------------------------------------------------------
// EMA codebook maintenance
// ---------------------------------------------------------------------------

TEST_CASE("zero-decay EMA update recovers per-cluster means") {
  Rng rng(41);
  aqvae::Codebook cb = random_codebook(4, 3, 909);
  cb.decay = 0.0;
  aqvae::Assignments batch;
  std::map<int, std::pair<int, std::vector<double>>> clusters;
  for (int n = 0; n < 200; ++n) {
    const int v = static_cast<int>(rng.uniform_int(4));
    std::vector<double> x = random_vec(rng, 3, 0.5);
    batch.indices.push_back(v);
    batch.vectors.insert(batch.vectors.end(), x.begin(), x.end());
    auto& slot = clusters[v];
    if (slot.second.empty()) slot.second.assign(3, 0.0);
    slot.first += 1;
    for (int i = 0; i < 3; ++i) slot.second[static_cast<std::size_t>(i)] += x[static_cast<std::size_t>(i)];
  }
  aqvae::ema_update(cb, batch);
  for (const auto& [v, acc] : clusters) {
    for (int i = 0; i < 3; ++i) {
      const double mean = acc.second[static_cast<std::size_t>(i)] / acc.first;
      CHECK(cb.vectors[static_cast<std::size_t>(v) * 3 + i] == doctest::Approx(mean).epsilon(1e-6));
    }
  }
}

TEST_CASE("EMA table satisfies vectors*(counts+eps)=sums across random updates") {
  Rng rng(51);
  aqvae::Codebook cb = random_codebook(16, 4, 111);
  for (int round = 0; round < 100; ++round) {
    aqvae::Assignments batch;
    const int n = 32;
    for (int k = 0; k < n; ++k) {
      batch.indices.push_back(static_cast<int>(rng.uniform_int(16)));
      std::vector<double> x = random_vec(rng, 4, 0.5);
      batch.vectors.insert(batch.vectors.end(), x.begin(), x.end());
    }
    aqvae::ema_update(cb, batch);
    for (int v = 0; v < 16; ++v) {
      for (int i = 0; i < 4; ++i) {
        const double lhs = cb.vectors[static_cast<std::size_t>(v) * 4 + i] *
                           (cb.ema_counts[static_cast<std::size_t>(v)] + cb.epsilon);
        const double rhs = cb.ema_sums[static_cast<std::size_t>(v) * 4 + i];
        CHECK(std::abs(lhs - rhs) <= 1e-5 * std::max(1.0, std::abs(rhs)));
      }
    }
  }
}

TEST_CASE("unassigned codes keep their sums-to-counts ratio under decay") {
  Rng rng(61);
  aqvae::Codebook cb = random_codebook(8, 4, 222);
  const int dead = 6;
  std::vector<double> ratio0(4);
  for (int i = 0; i < 4; ++i)
    ratio0[static_cast<std::size_t>(i)] =
        cb.ema_sums[static_cast<std::size_t>(dead) * 4 + i] / cb.ema_counts[static_cast<std::size_t>(dead)];
  for (int round = 0; round < 20; ++round) {
    aqvae::Assignments batch;
    for (int k = 0; k < 16; ++k) {
      int v = static_cast<int>(rng.uniform_int(8));
      if (v == dead) v = 0;
      batch.indices.push_back(v);
      std::vector<double> x = random_vec(rng, 4, 0.5);
      batch.vectors.insert(batch.vectors.end(), x.begin(), x.end());
    }
    aqvae::ema_update(cb, batch);
  }
  for (int i = 0; i < 4; ++i) {
    const double ratio =
        cb.ema_sums[static_cast<std::size_t>(dead) * 4 + i] / cb.ema_counts[static_cast<std::size_t>(dead)];
    CHECK(ratio == doctest::Approx(ratio0[static_cast<std::size_t>(i)]).epsilon(1e-12));
  }
}

TEST_CASE("EMA update matches an independent reference implementation") {
  aqvae::Codebook cb = random_codebook(8, 3, 333);
  std::vector<double> rc = cb.ema_counts, rs = cb.ema_sums, rv = cb.vectors;
  Rng rng(71);
  for (int round = 0; round < 5; ++round) {
    aqvae::Assignments batch;
    for (int k = 0; k < 24; ++k) {
      batch.indices.push_back(static_cast<int>(rng.uniform_int(8)));
      std::vector<double> x = random_vec(rng, 3, 0.4);
      batch.vectors.insert(batch.vectors.end(), x.begin(), x.end());
    }
    aqvae::ema_update(cb, batch);

    std::vector<double> n(8, 0.0), s(8 * 3, 0.0);
    for (std::size_t k = 0; k < batch.indices.size(); ++k) {
      const int v = batch.indices[k];
      n[static_cast<std::size_t>(v)] += 1.0;
      for (int i = 0; i < 3; ++i)
        s[static_cast<std::size_t>(v) * 3 + i] += batch.vectors[k * 3 + static_cast<std::size_t>(i)];
    }
    for (int v = 0; v < 8; ++v) {
      rc[static_cast<std::size_t>(v)] =
          cb.decay * rc[static_cast<std::size_t>(v)] + (1.0 - cb.decay) * n[static_cast<std::size_t>(v)];
      for (int i = 0; i < 3; ++i) {
        const std::size_t at = static_cast<std::size_t>(v) * 3 + i;
        rs[at] = cb.decay * rs[at] + (1.0 - cb.decay) * s[at];
        rv[at] = f32(rs[at] / (rc[static_cast<std::size_t>(v)] + cb.epsilon));
      }
    }
    for (std::size_t i = 0; i < rv.size(); ++i) {
      CHECK(cb.vectors[i] == doctest::Approx(rv[i]).epsilon(1e-6));
      CHECK(cb.ema_sums[i] == doctest::Approx(rs[i]).epsilon(1e-12));
    }
    for (std::size_t v = 0; v < rc.size(); ++v)
      CHECK(cb.ema_counts[v] == doctest::Approx(rc[v]).epsilon(1e-12));
  }
}

TEST_CASE("EMA update rejects out-of-range assignments") {
  aqvae::Codebook cb = random_codebook(4, 2, 444);
  aqvae::Assignments bad;
  bad.indices = {0, 4};
  bad.vectors = {0.1, 0.2, 0.3, 0.4};
  CHECK_THROWS(aqvae::ema_update(cb, bad));
  bad.indices = {0, -1};
  CHECK_THROWS(aqvae::ema_update(cb, bad));
}

TEST_CASE("codebook perplexity of uniform usage equals the code count") {
  std::vector<std::int64_t> uni(16, 25);
  CHECK(aqvae::codebook_perplexity(uni) == doctest::Approx(16.0).epsilon(1e-12));
  std::vector<std::int64_t> one(16, 0);
  one[3] = 100;
  CHECK(aqvae::codebook_perplexity(one) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(aqvae::codebook_perplexity(std::vector<std::int64_t>(16, 0)) == 0.0);
  std::vector<std::int64_t> neg(4, 1);
  neg[0] = -1;
  CHECK_THROWS(aqvae::codebook_perplexity(neg));
}

TEST_CASE("codebook file round-trips bitwise and rejects corrupt blobs") {
  TempDir dir("mrcb");
  aqvae::Codebook cb = random_codebook(16, 4, 555);
  // Drift the table away from its initial state so the round trip is non-trivial.
  Rng rng(81);
  aqvae::Assignments batch;
  for (int k = 0; k < 32; ++k) {
    batch.indices.push_back(static_cast<int>(rng.uniform_int(16)));
    std::vector<double> x = random_vec(rng, 4, 0.5);
    batch.vectors.insert(batch.vectors.end(), x.begin(), x.end());
  }
  aqvae::ema_update(cb, batch);

  const std::string path = (dir.path / "book.mrcb").string();
  aqvae::write_codebook(path, cb);
  aqvae::Codebook back = aqvae::read_codebook(path);
  CHECK(back.size == cb.size);
  CHECK(back.dim == cb.dim);
  REQUIRE(back.vectors.size() == cb.vectors.size());
  for (std::size_t i = 0; i < cb.vectors.size(); ++i) CHECK(back.vectors[i] == cb.vectors[i]);
  // The synthesized EMA state must satisfy the table invariant.
  for (int v = 0; v < back.size; ++v)
    for (int i = 0; i < back.dim; ++i)
      CHECK(back.vectors[static_cast<std::size_t>(v) * back.dim + i] *
                (back.ema_counts[static_cast<std::size_t>(v)] + back.epsilon) ==
            doctest::Approx(back.ema_sums[static_cast<std::size_t>(v) * back.dim + i]).epsilon(1e-12));

  auto slurp = [&]() {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  };
  auto spit = [&](const std::string& name, const std::string& bytes) {
    std::ofstream f((dir.path / name).string(), std::ios::binary);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  };
  const std::string good = slurp();

  std::string bad_magic = good;
  bad_magic[0] = 'X';
  spit("bad_magic.mrcb", bad_magic);
  CHECK_THROWS(aqvae::read_codebook((dir.path / "bad_magic.mrcb").string()));

  spit("trunc.mrcb", good.substr(0, good.size() - 3));
  CHECK_THROWS(aqvae::read_codebook((dir.path / "trunc.mrcb").string()));

  spit("trail.mrcb", good + "zz");
  CHECK_THROWS(aqvae::read_codebook((dir.path / "trail.mrcb").string()));

  CHECK_THROWS(aqvae::read_codebook((dir.path / "missing.mrcb").string()));
}

// ---------------------------------------------------------------------------
// Labels and configuration
// ---------------------------------------------------------------------------

TEST_CASE("acquisition label ids are bijective over patterns and levels") {
  std::vector<int> seen;
  for (int p = 0; p < 4; ++p) {
    for (int accel : aqvae::kLevels) {
      aqvae::AcquisitionLabel lab{static_cast<fourier::Pattern>(p), accel};
      const int id = lab.id();
      CHECK(id >= 0);
      CHECK(id < 24);
      seen.push_back(id);
    }
  }
  std::sort(seen.begin(), seen.end());
  seen.erase(std::unique(seen.begin(), seen.end()), seen.end());
  CHECK(seen.size() == 24);
  // The fully sampled level occupies the last slot of each pattern block.
  for (int p = 0; p < 4; ++p) {
    aqvae::AcquisitionLabel fs{static_cast<fourier::Pattern>(p), 1};
    CHECK(fs.id() == p * 6 + 5);
  }
  CHECK_THROWS(aqvae::level_index(7));
  CHECK(aqvae::level_index(32) == 0);
  CHECK(aqvae::level_index(1) == 5);
}

TEST_CASE("tokenizer config validation rejects inconsistent geometry") {
  CHECK_NOTHROW(tiny_cfg().validate());
  CHECK_NOTHROW(aqvae::TokenizerConfig{}.validate());

  auto broken = [](auto&& mutate) {
    aqvae::TokenizerConfig c = tiny_cfg();
    mutate(c);
    return c;
  };
  CHECK_THROWS(broken([](auto& c) { c.in_channels = 3; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.token_sides = {3, 4, 5, 6, 7, 9}; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.token_sides = {3, 4, 5}; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.image_side = 64; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.base_width = 6; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.channel_mults = {1}; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.n_labels = 10; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.rho = -0.1; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.ema_decay = 1.0; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.ema_epsilon = 0.0; }).validate());
  CHECK_THROWS(broken([](auto& c) { c.codebook_size = 0; }).validate());
}

TEST_CASE("tokenizer config survives a json round trip and rejects unknown keys") {
  aqvae::TokenizerConfig c = tiny_cfg();
  nlohmann::json j = c.to_json();
  aqvae::TokenizerConfig back = aqvae::TokenizerConfig::from_json(j);
  CHECK(back.to_json().dump() == j.dump());
  j["mystery"] = 1;
  CHECK_THROWS(aqvae::TokenizerConfig::from_json(j));
}

TEST_CASE("complex image and tensor bridges round-trip") {
  dataio::PhantomSpec spec = dataio::phantom_spec_for(dataio::Contrast::t2_like, 32, 32, 9);
  ComplexImage img = dataio::gen_phantom(spec);
  Tensor t = aqvae::image_to_tensor(img);
  CHECK(t.shape() == ad::Shape{2, 32, 32});
  ComplexImage back = aqvae::tensor_to_image(t);
  REQUIRE(back.data.size() == img.data.size());
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(back.data[i] == img.data[i]);
}

// ---------------------------------------------------------------------------
// Encoder / decoder / refine / fuse geometry
// ---------------------------------------------------------------------------

TEST_CASE("encoder emits the base-side latent and three feature scales") {
  aqvae::Tokenizer tok(tiny_cfg());
  dataio::PyramidSample s = tiny_sample();
  Tensor img = aqvae::image_to_tensor(s.levels[0].zero_fill);
  aqvae::Encoder::Out out = tok.encoder.forward(img, 3);
  CHECK(out.latent.shape() == ad::Shape{4, 8, 8});
  REQUIRE(out.features.size() == 3);
  CHECK(out.features[0].shape()[1] == 32);
  CHECK(out.features[1].shape()[1] == 16);
  CHECK(out.features[2].shape()[1] == 8);
}

TEST_CASE("encoder rejects un-normalized input") {
  aqvae::Tokenizer tok(tiny_cfg());
  std::vector<double> data(2 * 32 * 32, 0.0);
  data[5] = 1.2;  // real channel alone exceeds unit magnitude
  Tensor img = Tensor::from_data({2, 32, 32}, data);
  CHECK_THROWS(tok.encoder.forward(img, 0));
}

TEST_CASE("freshly initialized encoder ignores the label; trained film does not") {
  aqvae::Tokenizer tok(tiny_cfg());
  dataio::PyramidSample s = tiny_sample();
  Tensor img = aqvae::image_to_tensor(s.levels[2].zero_fill);
  aqvae::Encoder::Out a = tok.encoder.forward(img, 0);
  aqvae::Encoder::Out b = tok.encoder.forward(img, 13);
  REQUIRE(a.latent.values().size() == b.latent.values().size());
  for (std::size_t i = 0; i < a.latent.values().size(); ++i)
    CHECK(a.latent.values()[i] == b.latent.values()[i]);

  // Perturb every parameter as training would (the residual branches end in
  // zero-initialized convolutions, so film noise alone cannot propagate);
  // distinct labels must now produce distinct latents.
  Rng rng(17);
  nn::ParamList ps;
  tok.encoder.collect(ps, "enc");
  for (auto& [name, t] : ps)
    for (auto& v : t.values()) v += 0.05 * rng.normal(0.0, 1.0);
  aqvae::Encoder::Out c = tok.encoder.forward(img, 0);
  aqvae::Encoder::Out d = tok.encoder.forward(img, 13);
  double dist = 0.0;
  for (std::size_t i = 0; i < c.latent.values().size(); ++i) {
    const double diff = c.latent.values()[i] - d.latent.values()[i];
    dist += diff * diff;
  }
  CHECK(std::sqrt(dist) > 1e-6);
}

TEST_CASE("decoder output is a normalized two-channel image") {
  aqvae::Tokenizer tok(tiny_cfg());
  Rng rng(23);
  Tensor fused = Tensor::from_data({4, 8, 8}, random_vec(rng, 4 * 8 * 8, 0.5));
  Tensor raw = tok.decoder.forward_raw(fused);
  CHECK(raw.shape() == ad::Shape{3, 32, 32});
  Tensor out = tok.decoder.forward(fused);
  CHECK(out.shape() == ad::Shape{2, 32, 32});
  double peak = 0.0;
  for (int p = 0; p < 32 * 32; ++p) {
    const double re = out.values()[static_cast<std::size_t>(p)];
    const double im = out.values()[static_cast<std::size_t>(p) + 32 * 32];
    peak = std::max(peak, std::hypot(re, im));
  }
  CHECK(peak <= 1.0 + 1e-9);
  CHECK(peak > 0.0);
}

TEST_CASE("post-quantization refinement is the identity at initialization") {
  aqvae::Tokenizer tok(tiny_cfg());
  Rng rng(29);
  for (std::size_t li = 0; li < aqvae::kLevels.size(); ++li) {
    const int accel = aqvae::kLevels[li];
    const int side = tok.config().token_sides[li];
    Tensor q = Tensor::from_data({4, side, side},
                                 random_vec(rng, 4 * side * side, 0.5));
    Tensor up = side == 8 ? q : ad::bilinear_resize(q, 8, 8);
    Tensor ref = tok.refine(q, accel);
    CHECK(ref.shape() == ad::Shape{4, 8, 8});
    REQUIRE(ref.values().size() == up.values().size());
    for (std::size_t i = 0; i < up.values().size(); ++i)
      CHECK(ref.values()[i] == up.values()[i]);
  }
  CHECK_THROWS(tok.refine(Tensor::zeros({4, 3, 3}), 7));  // unknown level

  aqvae::TokenizerConfig c0 = tiny_cfg();
  c0.rho = 0.0;
  aqvae::Tokenizer bypass(c0);
  // Make the residual convolution nonzero; rho = 0 must still bypass it.
  for (auto& conv : bypass.refine_convs)
    for (auto& v : conv.weight.values()) v = 0.3;
  Tensor q = Tensor::from_data({4, 5, 5}, random_vec(rng, 100, 0.5));
  Tensor up = ad::bilinear_resize(q, 8, 8);
  Tensor ref = bypass.refine(q, 8);
  for (std::size_t i = 0; i < up.values().size(); ++i) CHECK(ref.values()[i] == up.values()[i]);
}

TEST_CASE("fusion averages refined latents elementwise") {
  aqvae::Tokenizer tok(tiny_cfg());
  Rng rng(37);
  std::vector<Tensor> parts;
  for (int k = 0; k < 6; ++k)
    parts.push_back(Tensor::from_data({4, 8, 8}, random_vec(rng, 4 * 8 * 8, 0.5)));

  Tensor one = tok.fuse({parts[0]});
  for (std::size_t i = 0; i < one.values().size(); ++i)
    CHECK(one.values()[i] == parts[0].values()[i]);

  Tensor six = tok.fuse(parts);
  for (std::size_t i = 0; i < six.values().size(); ++i) {
    double mean = 0.0;
    for (int k = 0; k < 6; ++k) mean += parts[static_cast<std::size_t>(k)].values()[i];
    mean /= 6.0;
    CHECK(six.values()[i] == doctest::Approx(mean).epsilon(1e-12));
  }

  CHECK_THROWS(tok.fuse({}));
  CHECK_THROWS(tok.fuse({Tensor::zeros({4, 5, 5})}));
}

TEST_CASE("token maps decode deterministically and validate their schedule") {
  aqvae::Tokenizer tok(tiny_cfg());
  dataio::PyramidSample s = tiny_sample();
  std::vector<aqvae::TokenMap> maps = tok.tokenize(s);
  REQUIRE(maps.size() == 6);
  for (std::size_t k = 0; k < maps.size(); ++k) {
    CHECK(maps[k].accel == aqvae::kLevels[k]);
    CHECK(maps[k].side == tok.config().token_sides[k]);
    CHECK(maps[k].indices.size() ==
          static_cast<std::size_t>(maps[k].side) * static_cast<std::size_t>(maps[k].side));
    for (int idx : maps[k].indices) {
      CHECK(idx >= 0);
      CHECK(idx < tok.config().codebook_size);
    }
  }

  Tensor a = tok.decode_token_maps(maps);
  Tensor b = tok.decode_token_maps(maps);
  CHECK(a.shape() == ad::Shape{2, 32, 32});
  for (std::size_t i = 0; i < a.values().size(); ++i) CHECK(a.values()[i] == b.values()[i]);

  std::vector<aqvae::TokenMap> bad_side = maps;
  bad_side[2].side = 6;
  bad_side[2].indices.assign(36, 0);
  CHECK_THROWS(tok.decode_token_maps(bad_side));

  std::vector<aqvae::TokenMap> bad_idx = maps;
  bad_idx[0].indices[0] = tok.config().codebook_size;
  CHECK_THROWS(tok.decode_token_maps(bad_idx));
}

TEST_CASE("reconstruction matches the input geometry and normalization") {
  aqvae::Tokenizer tok(tiny_cfg());
  dataio::PyramidSample s = tiny_sample();
  ComplexImage rec = tok.reconstruct(s);
  CHECK(rec.height == 32);
  CHECK(rec.width == 32);
  double peak = 0.0;
  for (const auto& z : rec.data) peak = std::max(peak, std::abs(z));
  CHECK(peak <= 1.0 + 1e-9);
}

TEST_CASE("tokenizer state round-trips through the checkpoint dictionary") {
  aqvae::Tokenizer tok(tiny_cfg());
  // Make the state distinctive before snapshotting.
  Rng rng(43);
  nn::ParamList ps = tok.generator_params();
  for (auto& [name, t] : ps)
    for (auto& v : t.values()) v += 0.02 * rng.normal(0.0, 1.0);
  aqvae::Assignments batch;
  for (int k = 0; k < 16; ++k) {
    batch.indices.push_back(static_cast<int>(rng.uniform_int(32)));
    std::vector<double> x = random_vec(rng, 4, 0.5);
    batch.vectors.insert(batch.vectors.end(), x.begin(), x.end());
  }
  aqvae::ema_update(tok.codebook, batch);

  dataio::StateDict sd = tok.state();
  aqvae::Tokenizer other(tiny_cfg());
  other.load_state(sd);
  CHECK(other.codebook.vectors == tok.codebook.vectors);
  CHECK(other.codebook.ema_counts == tok.codebook.ema_counts);
  CHECK(other.codebook.ema_sums == tok.codebook.ema_sums);

  dataio::PyramidSample s = tiny_sample(4);
  ComplexImage ra = tok.reconstruct(s);
  ComplexImage rb = other.reconstruct(s);
  for (std::size_t i = 0; i < ra.data.size(); ++i) CHECK(ra.data[i] == rb.data[i]);

  dataio::StateDict missing = sd;
  missing.erase(missing.begin());
  aqvae::Tokenizer strict(tiny_cfg());
  CHECK_THROWS(strict.load_state(missing));
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

TEST_CASE("commitment loss closed forms") {
  aqvae::QuantizeOut q1;
  q1.z_down = Tensor::from_data({2, 1, 1}, {0.5, -0.25}, /*requires_grad=*/true);
  q1.quantized = Tensor::from_data({2, 1, 1}, {0.5, -0.25});
  CHECK(aqvae::commitment_loss({q1}).item() == doctest::Approx(0.0).epsilon(1e-15));

  // A constant gap of 2 in every coordinate gives MSE 4; with the 0.25
  // commitment weight the contribution is exactly 1.
  aqvae::QuantizeOut q2;
  q2.z_down = Tensor::from_data({2, 1, 1}, {2.0, 2.0}, /*requires_grad=*/true);
  q2.quantized = Tensor::from_data({2, 1, 1}, {0.0, 0.0});
  Tensor com = aqvae::commitment_loss({q2});
  CHECK(com.item() == doctest::Approx(4.0).epsilon(1e-15));
  aqvae::LossWeights w;
  CHECK(w.w_commit * com.item() == doctest::Approx(1.0).epsilon(1e-15));

  // Gradient flows into the continuous latent only: d/dz mean((z-q)^2).
  com.backward();
  REQUIRE(q2.z_down.node()->grad.size() == 2);
  CHECK(q2.z_down.node()->grad[0] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(q2.z_down.node()->grad[1] == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(q2.quantized.node()->grad.empty());

  // Mean over levels.
  Tensor two = aqvae::commitment_loss({q1, q2});
  CHECK(two.item() == doctest::Approx(2.0).epsilon(1e-15));
}

TEST_CASE("constant-half discriminator yields unit LSGAN losses") {
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  REQUIRE(disc.conv1.size() == 4);
  for (std::size_t h = 0; h < disc.conv1.size(); ++h) {
    std::fill(disc.conv1[h].weight.values().begin(), disc.conv1[h].weight.values().end(), 0.0);
    std::fill(disc.conv1[h].bias.values().begin(), disc.conv1[h].bias.values().end(), 0.0);
    std::fill(disc.conv2[h].weight.values().begin(), disc.conv2[h].weight.values().end(), 0.0);
    std::fill(disc.conv2[h].bias.values().begin(), disc.conv2[h].bias.values().end(), 0.5);
  }
  Rng rng(47);
  std::vector<double> mag(32 * 32);
  for (auto& v : mag) v = rng.uniform01();
  Tensor x = Tensor::from_data({1, 32, 32}, mag);
  std::vector<Tensor> real = disc.forward(phi, x);
  std::vector<Tensor> fake = disc.forward(phi, x);
  REQUIRE(real.size() == 4);
  for (const Tensor& s : real)
    for (double v : s.values()) CHECK(v == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(aqvae::lsgan_d_loss(real, fake).item() == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(aqvae::lsgan_g_loss(fake).item() == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("discriminator loss trains heads without touching the generator") {
  aqvae::Tokenizer tok(tiny_cfg());
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  dataio::PyramidSample s = tiny_sample(6);

  aqvae::SliceLoss sl = aqvae::tokenizer_loss(tok, disc, phi, s, aqvae::LossWeights{});
  // Replay the fake magnitude as a constant, as the training loop does.
  Tensor fake_mag = metrics::magnitude_t(sl.recon);
  Tensor fake = Tensor::from_data({1, 32, 32},
                                  std::vector<double>(fake_mag.values().begin(), fake_mag.values().end()));
  Tensor real = Tensor::from_data({1, 32, 32},
                                  [&] {
                                    std::vector<double> m(32 * 32);
                                    for (int p = 0; p < 32 * 32; ++p) m[static_cast<std::size_t>(p)] = std::abs(s.target.data[static_cast<std::size_t>(p)]);
                                    return m;
                                  }());
  Tensor ld = aqvae::lsgan_d_loss(disc.forward(phi, real), disc.forward(phi, fake));
  ld.backward();

  bool disc_has_grad = false;
  for (auto& [name, t] : disc.params())
    if (!t.node()->grad.empty()) disc_has_grad = true;
  CHECK(disc_has_grad);
  for (auto& [name, t] : tok.generator_params()) CHECK(t.node()->grad.empty());
}

TEST_CASE("tokenizer loss echoes its weights and separates its terms") {
  aqvae::Tokenizer tok(tiny_cfg());
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  dataio::PyramidSample s = tiny_sample(7);

  aqvae::LossWeights w;
  aqvae::SliceLoss sl = aqvae::tokenizer_loss(tok, disc, phi, s, w);
  CHECK(sl.detail.weights.w_ssim == 1.0);
  CHECK(sl.detail.weights.w_adv == 0.1);
  CHECK(sl.detail.weights.w_perc == 0.1);
  CHECK(sl.detail.weights.w_commit == 0.25);
  const double recombined = w.w_ssim * sl.detail.l_ssim + w.w_adv * sl.detail.l_adv +
                            w.w_perc * sl.detail.l_perc + w.w_commit * sl.detail.l_commit;
  CHECK(std::abs(sl.detail.total - recombined) <= 1e-12);
  CHECK(sl.detail.total == doctest::Approx(sl.total.item()).epsilon(1e-15));
  CHECK(sl.recon.shape() == ad::Shape{2, 32, 32});
  CHECK(sl.quants.size() == 6);
  CHECK(std::isfinite(sl.detail.l_ssim));
  CHECK(sl.detail.l_commit >= 0.0);
}

TEST_CASE("tokenizer loss backward leaves the codebook untouched") {
  aqvae::Tokenizer tok(tiny_cfg());
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  dataio::PyramidSample s = tiny_sample(8);
  const std::vector<double> before = tok.codebook.vectors;
  aqvae::SliceLoss sl = aqvae::tokenizer_loss(tok, disc, phi, s, aqvae::LossWeights{});
  sl.total.backward();
  CHECK(tok.codebook.vectors == before);
  // The encoder received gradient through commitment and the rotation trick.
  bool enc_grad = false;
  nn::ParamList ps;
  tok.encoder.collect(ps, "enc");
  for (auto& [name, t] : ps)
    if (!t.node()->grad.empty()) enc_grad = true;
  CHECK(enc_grad);
}

TEST_CASE("full loss gradient w.r.t. a decoder weight matches finite differences") {
  aqvae::Tokenizer tok(tiny_cfg());
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  dataio::PyramidSample s = tiny_sample(9);
  aqvae::LossWeights w;

  aqvae::SliceLoss sl = aqvae::tokenizer_loss(tok, disc, phi, s, w);
  sl.total.backward();
  Tensor& theta = tok.decoder.out_conv.weight;
  REQUIRE(!theta.node()->grad.empty());
  std::size_t at = 0;
  for (std::size_t i = 0; i < theta.node()->grad.size(); ++i)
    if (std::abs(theta.node()->grad[i]) > std::abs(theta.node()->grad[at])) at = i;
  const double g_ad = theta.node()->grad[at];
  REQUIRE(std::abs(g_ad) > 1e-8);

  auto eval = [&]() {
    ad::NoGradGuard guard;
    return aqvae::tokenizer_loss(tok, disc, phi, s, w).detail.total;
  };
  const double h = 1e-5;
  const double kept = theta.values()[at];
  theta.values()[at] = kept + h;
  const double up = eval();
  theta.values()[at] = kept - h;
  const double dn = eval();
  theta.values()[at] = kept;
  const double g_fd = (up - dn) / (2.0 * h);
  CHECK(std::abs(g_ad - g_fd) <= 1e-3 * std::max(std::abs(g_fd), 1e-6));
}

TEST_CASE("commitment gradient w.r.t. an encoder weight matches finite differences") {
  aqvae::Tokenizer tok(tiny_cfg());
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  dataio::PyramidSample s = tiny_sample(10);
  aqvae::LossWeights w{0.0, 0.0, 0.0, 1.0};

  aqvae::SliceLoss sl = aqvae::tokenizer_loss(tok, disc, phi, s, w);
  sl.total.backward();
  Tensor& theta = tok.encoder.stem.weight;
  REQUIRE(!theta.node()->grad.empty());
  std::size_t at = 0;
  for (std::size_t i = 0; i < theta.node()->grad.size(); ++i)
    if (std::abs(theta.node()->grad[i]) > std::abs(theta.node()->grad[at])) at = i;
  const double g_ad = theta.node()->grad[at];
  REQUIRE(std::abs(g_ad) > 1e-8);

  auto eval = [&]() {
    ad::NoGradGuard guard;
    return aqvae::tokenizer_loss(tok, disc, phi, s, w).detail.total;
  };
  const double h = 1e-5;
  const double kept = theta.values()[at];
  theta.values()[at] = kept + h;
  const double up = eval();
  theta.values()[at] = kept - h;
  const double dn = eval();
  theta.values()[at] = kept;
  const double g_fd = (up - dn) / (2.0 * h);
  CHECK(std::abs(g_ad - g_fd) <= 1e-3 * std::max(std::abs(g_fd), 1e-6));
}

TEST_CASE("two hundred optimization steps halve the training loss") {
  aqvae::Tokenizer tok(tiny_cfg());
  metrics::FeatureExtractor phi(1, 5);
  aqvae::Discriminator disc(phi, 32, 19);
  dataio::PyramidSample s = tiny_sample(12);
  // Coarsest and fully sampled levels only; enough signal for the smoke run
  // at a third of the full forward cost.
  s.levels = {s.levels.front(), s.levels.back()};
  aqvae::LossWeights w;

  std::vector<Tensor> params;
  for (auto& [name, t] : tok.generator_params()) params.push_back(t);
  opt::AdamWConfig oc;
  oc.lr = 1e-3;
  opt::AdamW optim(params, oc);

  double initial = 0.0, final_loss = 0.0;
  for (int step = 0; step < 200; ++step) {
    aqvae::SliceLoss sl = aqvae::tokenizer_loss(tok, disc, phi, s, w);
    if (step == 0) initial = sl.detail.total;
    final_loss = sl.detail.total;
    optim.zero_grad();
    sl.total.backward();
    opt::clip_global_norm(params, 5.0);
    optim.step();
    aqvae::Assignments batch;
    for (const aqvae::QuantizeOut& q : sl.quants) {
      aqvae::Assignments a = aqvae::assignments_of(q);
      batch.indices.insert(batch.indices.end(), a.indices.begin(), a.indices.end());
      batch.vectors.insert(batch.vectors.end(), a.vectors.begin(), a.vectors.end());
    }
    aqvae::ema_update(tok.codebook, batch);
  }
  CHECK(std::isfinite(final_loss));
  CHECK(final_loss < 0.5 * initial);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

TEST_CASE("tokenizer training is deterministic and keeps the best checkpoint") {
  TempDir dir("tok_train");
  fourier::CoilSensitivities sens = fourier::make_coil_maps(1, 32, 32, 77);
  dataio::DatasetManifest man;
  man.height = 32;
  man.width = 32;
  for (int i = 0; i < 4; ++i) {
    dataio::PhantomSpec spec =
        dataio::phantom_spec_for(dataio::Contrast::t1_like, 32, 32, 300 + static_cast<std::uint32_t>(i));
    ComplexImage img = dataio::gen_phantom(spec);
    const std::string name = "s" + std::to_string(i) + ".mrsl";
    dataio::write_slice((dir.path / name).string(), img);
    dataio::SampleEntry e;
    e.file = name;
    e.split = i < 3 ? "train" : "val";
    e.pattern = fourier::Pattern::gaussian_vd;
    e.mask_seed = 40 + static_cast<std::uint32_t>(i);
    man.samples.push_back(e);
  }
  dataio::save_manifest((dir.path / "manifest.json").string(), man);
  dataio::Dataset data(dataio::load_manifest((dir.path / "manifest.json").string()),
                       dir.path.string(), sens);

  aqvae::TrainTokenizerConfig tc;
  tc.epochs = 2;
  tc.grad_accum = 2;
  tc.lr = 1e-3;
  tc.warmup_steps = 2;
  tc.seed = 7;

  metrics::FeatureExtractor phi(1, 5);
  auto run = [&](aqvae::Tokenizer& tok) {
    aqvae::Discriminator disc(phi, 32, 19);
    return aqvae::train_tokenizer(tok, disc, phi, data, tc);
  };

  aqvae::Tokenizer tok_a(tiny_cfg());
  aqvae::TokenizerTrainResult ra = run(tok_a);
  aqvae::Tokenizer tok_b(tiny_cfg());
  aqvae::TokenizerTrainResult rb = run(tok_b);

  REQUIRE(ra.epochs.size() == 2);
  REQUIRE(rb.epochs.size() == 2);
  for (std::size_t e = 0; e < ra.epochs.size(); ++e) {
    CHECK(ra.epochs[e].train_loss == rb.epochs[e].train_loss);
    CHECK(ra.epochs[e].val_ssim == rb.epochs[e].val_ssim);
    CHECK(ra.epochs[e].perplexity == rb.epochs[e].perplexity);
  }
  CHECK(ra.best_val_ssim == rb.best_val_ssim);
  CHECK(ra.best_epoch == rb.best_epoch);

  dataio::PyramidSample probe = data.load(data.indices("val")[0]);
  ComplexImage pa = tok_a.reconstruct(probe);
  ComplexImage pb = tok_b.reconstruct(probe);
  for (std::size_t i = 0; i < pa.data.size(); ++i) CHECK(pa.data[i] == pb.data[i]);

  // The returned best score is the max over epochs and the model holds it.
  double max_val = 0.0;
  for (const auto& e : ra.epochs) max_val = std::max(max_val, e.val_ssim);
  CHECK(ra.best_val_ssim == doctest::Approx(max_val).epsilon(1e-15));
  CHECK(ra.best_epoch >= 0);
  CHECK(aqvae::mean_split_ssim(tok_a, data, "val") ==
        doctest::Approx(ra.best_val_ssim).epsilon(1e-12));
}
