#include "nasp/aqvae/codebook.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace nasp::aqvae {

namespace {

double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

void refresh_vectors(Codebook& cb) {
  for (int v = 0; v < cb.size; ++v) {
    const double denom = cb.ema_counts[static_cast<std::size_t>(v)] + cb.epsilon;
    for (int k = 0; k < cb.dim; ++k) {
      const std::size_t i = static_cast<std::size_t>(v) * cb.dim + k;
      const double x = cb.ema_sums[i] / denom;
      if (!std::isfinite(x)) throw std::runtime_error("ema_update: non-finite codebook entry");
      cb.vectors[i] = snap_f32(x);
    }
  }
}

}  // namespace

Codebook make_codebook(int size, int dim, core::Rng& rng, double init_scale) {
  if (size <= 0 || dim <= 0) throw std::invalid_argument("make_codebook: size and dim positive");
  Codebook cb;
  cb.size = size;
  cb.dim = dim;
  cb.ema_counts.assign(static_cast<std::size_t>(size), 1.0);
  cb.ema_sums.resize(static_cast<std::size_t>(size) * dim);
  cb.vectors.resize(cb.ema_sums.size());
  for (auto& s : cb.ema_sums) s = rng.normal(0.0, init_scale);
  refresh_vectors(cb);
  return cb;
}

int nearest_code(const Codebook& cb, const double* z) {
  if (cb.size <= 0) throw std::invalid_argument("nearest_code: empty codebook");
  int best = 0;
  double best_d = 0.0;
  for (int v = 0; v < cb.size; ++v) {
    const double* c = cb.vectors.data() + static_cast<std::size_t>(v) * cb.dim;
    double d = 0.0;
    for (int k = 0; k < cb.dim; ++k) {
      const double t = z[k] - c[k];
      d += t * t;
    }
    if (v == 0 || d < best_d) {
      best = v;
      best_d = d;
    }
  }
  return best;
}

void ema_update(Codebook& cb, const Assignments& batch) {
  const std::size_t n = batch.indices.size();
  if (batch.vectors.size() != n * static_cast<std::size_t>(cb.dim))
    throw std::invalid_argument("ema_update: vector payload size mismatch");
  std::vector<double> n_v(static_cast<std::size_t>(cb.size), 0.0);
  std::vector<double> sum_v(static_cast<std::size_t>(cb.size) * cb.dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const int v = batch.indices[i];
    if (v < 0 || v >= cb.size) throw std::out_of_range("ema_update: code index out of range");
    n_v[static_cast<std::size_t>(v)] += 1.0;
    const double* z = batch.vectors.data() + i * cb.dim;
    double* s = sum_v.data() + static_cast<std::size_t>(v) * cb.dim;
    for (int k = 0; k < cb.dim; ++k) s[k] += z[k];
  }
  for (int v = 0; v < cb.size; ++v) {
    cb.ema_counts[static_cast<std::size_t>(v)] =
        cb.decay * cb.ema_counts[static_cast<std::size_t>(v)] +
        (1.0 - cb.decay) * n_v[static_cast<std::size_t>(v)];
    for (int k = 0; k < cb.dim; ++k) {
      const std::size_t i = static_cast<std::size_t>(v) * cb.dim + k;
      cb.ema_sums[i] = cb.decay * cb.ema_sums[i] + (1.0 - cb.decay) * sum_v[i];
    }
  }
  refresh_vectors(cb);
}

double codebook_perplexity(const std::vector<std::int64_t>& usage) {
  std::int64_t total = 0;
  for (std::int64_t c : usage) {
    if (c < 0) throw std::invalid_argument("codebook_perplexity: negative count");
    total += c;
  }
  if (total == 0) return 0.0;
  double h = 0.0;
  for (std::int64_t c : usage) {
    if (c == 0) continue;
    const double p = static_cast<double>(c) / static_cast<double>(total);
    h -= p * std::log(p);
  }
  return std::exp(h);
}

QuantizeOut quantize(const Codebook& cb, const ad::Tensor& z, int target_side, int accel,
                     bool train) {
  if (cb.size <= 0) throw std::invalid_argument("quantize: empty codebook");
  if (z.ndim() != 3 || z.dim(1) != z.dim(2)) throw std::invalid_argument("quantize: z not [d,S,S]");
  if (z.dim(0) != cb.dim) throw std::invalid_argument("quantize: latent dim mismatch");
  if (target_side <= 0 || target_side > z.dim(1))
    throw std::invalid_argument("quantize: target_side must be in [1, base side]");

  QuantizeOut out;
  out.z_down = target_side == z.dim(1) ? z : ad::adaptive_avg_pool(z, target_side, target_side);
  const int g = target_side, d = cb.dim;
  const std::int64_t N = static_cast<std::int64_t>(g) * g;
  out.tokens.accel = accel;
  out.tokens.side = g;
  out.tokens.indices.resize(static_cast<std::size_t>(N));

  // Gather per-position vectors (channel-major layout -> stride N).
  const double* zd = out.z_down.data();
  std::vector<double> zp(static_cast<std::size_t>(N) * d);
  for (std::int64_t p = 0; p < N; ++p) {
    for (int k = 0; k < d; ++k) zp[static_cast<std::size_t>(p) * d + k] = zd[k * N + p];
  }
  for (std::int64_t p = 0; p < N; ++p) {
    out.tokens.indices[static_cast<std::size_t>(p)] =
        nearest_code(cb, zp.data() + static_cast<std::size_t>(p) * d);
  }

  const bool wire_grad = train && out.z_down.requires_grad() && ad::grad_enabled();
  if (!wire_grad) {
    std::vector<double> qv(static_cast<std::size_t>(d) * N);
    for (std::int64_t p = 0; p < N; ++p) {
      const double* c = cb.vectors.data() +
                        static_cast<std::size_t>(out.tokens.indices[static_cast<std::size_t>(p)]) * d;
      for (int k = 0; k < d; ++k) qv[k * N + p] = c[k];
    }
    out.quantized = ad::Tensor::from_data({d, g, g}, std::move(qv));
    return out;
  }

  // Rotation-trick coefficients, frozen at forward time. Per position:
  //   q = lam * R z,  R = I - 2 r r^T + 2 qhat zhat^T
  // so the pulled-back gradient is lam * (g - 2 r (r.g) + 2 zhat (qhat.g)).
  std::vector<double> lam(static_cast<std::size_t>(N));
  std::vector<double> r(static_cast<std::size_t>(N) * d), zh(r.size()), qh(r.size());
  std::vector<std::uint8_t> ste(static_cast<std::size_t>(N), 0);
  for (std::int64_t p = 0; p < N; ++p) {
    const double* zv = zp.data() + static_cast<std::size_t>(p) * d;
    const double* c = cb.vectors.data() +
                      static_cast<std::size_t>(out.tokens.indices[static_cast<std::size_t>(p)]) * d;
    double nz = 0.0, nq = 0.0;
    for (int k = 0; k < d; ++k) {
      nz += zv[k] * zv[k];
      nq += c[k] * c[k];
    }
    nz = std::sqrt(nz);
    nq = std::sqrt(nq);
    if (nz < 1e-12 || nq < 1e-12) {
      ste[static_cast<std::size_t>(p)] = 1;
      continue;
    }
    double nr = 0.0;
    for (int k = 0; k < d; ++k) {
      const std::size_t i = static_cast<std::size_t>(p) * d + k;
      zh[i] = zv[k] / nz;
      qh[i] = c[k] / nq;
      r[i] = zh[i] + qh[i];
      nr += r[i] * r[i];
    }
    nr = std::sqrt(nr);
    if (nr < 1e-6) {
      ste[static_cast<std::size_t>(p)] = 1;
      continue;
    }
    for (int k = 0; k < d; ++k) r[static_cast<std::size_t>(p) * d + k] /= nr;
    lam[static_cast<std::size_t>(p)] = nq / nz;
  }

  ad::Tensor zin = out.z_down;
  ad::Tensor q = ad::make_node(
      {d, g, g}, {zin}, [zin, lam, r, zh, qh, ste, N, d](ad::Node& n) {
        double* dz = zin.node()->ensure_grad().data();
        const double* gr = n.grad.data();
        for (std::int64_t p = 0; p < N; ++p) {
          if (ste[static_cast<std::size_t>(p)]) {
            for (int k = 0; k < d; ++k) dz[k * N + p] += gr[k * N + p];
            continue;
          }
          const double* rp = r.data() + static_cast<std::size_t>(p) * d;
          const double* zp_ = zh.data() + static_cast<std::size_t>(p) * d;
          const double* qp = qh.data() + static_cast<std::size_t>(p) * d;
          double rg = 0.0, qg = 0.0;
          for (int k = 0; k < d; ++k) {
            rg += rp[k] * gr[k * N + p];
            qg += qp[k] * gr[k * N + p];
          }
          const double s = lam[static_cast<std::size_t>(p)];
          for (int k = 0; k < d; ++k) {
            dz[k * N + p] += s * (gr[k * N + p] - 2.0 * rp[k] * rg + 2.0 * zp_[k] * qg);
          }
        }
      });
  for (std::int64_t p = 0; p < N; ++p) {
    const double* c = cb.vectors.data() +
                      static_cast<std::size_t>(out.tokens.indices[static_cast<std::size_t>(p)]) * d;
    for (int k = 0; k < d; ++k) q.data()[k * N + p] = c[k];
  }
  out.quantized = q;
  return out;
}

Assignments assignments_of(const QuantizeOut& q) {
  Assignments a;
  const int g = q.tokens.side;
  const std::int64_t N = static_cast<std::int64_t>(g) * g;
  const int d = q.z_down.dim(0);
  a.indices = q.tokens.indices;
  a.vectors.resize(static_cast<std::size_t>(N) * d);
  const double* zd = q.z_down.data();
  for (std::int64_t p = 0; p < N; ++p) {
    for (int k = 0; k < d; ++k) a.vectors[static_cast<std::size_t>(p) * d + k] = zd[k * N + p];
  }
  return a;
}

void write_codebook(const std::string& path, const Codebook& cb) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("write_codebook: cannot open " + path);
  f.write("MRCB", 4);
  const std::uint32_t v = static_cast<std::uint32_t>(cb.size);
  const std::uint32_t d = static_cast<std::uint32_t>(cb.dim);
  f.write(reinterpret_cast<const char*>(&v), 4);
  f.write(reinterpret_cast<const char*>(&d), 4);
  std::vector<float> payload(cb.vectors.size());
  for (std::size_t i = 0; i < payload.size(); ++i) payload[i] = static_cast<float>(cb.vectors[i]);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw std::runtime_error("write_codebook: write failed for " + path);
}

Codebook read_codebook(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("read_codebook: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, "MRCB", 4) != 0)
    throw std::runtime_error("read_codebook: bad magic in " + path);
  std::uint32_t v = 0, d = 0;
  f.read(reinterpret_cast<char*>(&v), 4);
  f.read(reinterpret_cast<char*>(&d), 4);
  if (!f || v == 0 || d == 0 || v > (1u << 24) || d > (1u << 16))
    throw std::runtime_error("read_codebook: implausible header in " + path);
  Codebook cb;
  cb.size = static_cast<int>(v);
  cb.dim = static_cast<int>(d);
  std::vector<float> payload(static_cast<std::size_t>(v) * d);
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size() * sizeof(float)));
  if (!f) throw std::runtime_error("read_codebook: truncated payload in " + path);
  f.peek();
  if (!f.eof()) throw std::runtime_error("read_codebook: trailing bytes in " + path);
  cb.vectors.resize(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i) cb.vectors[i] = payload[i];
  // Interchange files carry vectors only; synthesize EMA stats consistent
  // with them so the ratio invariant holds from the first update.
  cb.ema_counts.assign(static_cast<std::size_t>(cb.size), 1.0);
  cb.ema_sums.resize(payload.size());
  for (std::size_t i = 0; i < payload.size(); ++i)
    cb.ema_sums[i] = cb.vectors[i] * (1.0 + cb.epsilon);
  return cb;
}

}  // namespace nasp::aqvae
