#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nasp/core/ops.hpp"
#include "nasp/core/rng.hpp"

namespace nasp::aqvae {

// Shared quantization codebook, maintained by EMA rather than gradients.
// Vectors are snapped to the float32 grid after every update so the MRCB
// export (float32) reproduces the live table exactly.
struct Codebook {
  int size = 0;
  int dim = 0;
  std::vector<double> vectors;     // [V,d] row-major
  std::vector<double> ema_counts;  // [V]
  std::vector<double> ema_sums;    // [V,d]
  double decay = 0.99;
  double epsilon = 1e-5;
};

Codebook make_codebook(int size, int dim, core::Rng& rng, double init_scale = 0.5);

// Exhaustive L2 nearest neighbor; ties resolve to the lowest index.
int nearest_code(const Codebook& cb, const double* z);

struct Assignments {
  std::vector<int> indices;     // [N]
  std::vector<double> vectors;  // [N,d] row-major
};

// counts <- decay*counts + (1-decay)*n_v; sums likewise with the assigned
// vector totals; then vectors[v] = sums[v] / (counts[v] + epsilon) for every
// code (unassigned codes only decay, so their sums/counts ratio is
// invariant). Throws on out-of-range indices or non-finite results.
void ema_update(Codebook& cb, const Assignments& batch);

// exp(entropy) of the usage distribution; counts may be zero.
double codebook_perplexity(const std::vector<std::int64_t>& usage);

struct TokenMap {
  int accel = 1;  // acceleration level this map encodes
  int side = 0;
  std::vector<int> indices;  // side*side row-major, each in [0, V)
};

struct QuantizeOut {
  TokenMap tokens;
  ad::Tensor quantized;  // [d,side,side]; values are the selected codes
  ad::Tensor z_down;     // [d,side,side]; area-downsampled continuous latent
};

// Area-downsamples z [d,S,S] to target_side, assigns each position to its
// nearest code, and emits the code vectors. With train=true the gradient
// from `quantized` to z treats each code as a frozen rotation-plus-scaling
// of the input vector (the rotation trick); degenerate geometry (zero-norm
// input or antiparallel unit vectors) falls back to passing the gradient
// through unchanged. Forward values are identical in both modes.
QuantizeOut quantize(const Codebook& cb, const ad::Tensor& z, int target_side, int accel,
                     bool train);

// Per-position continuous vectors of a quantize result, detached, in the
// layout ema_update expects.
Assignments assignments_of(const QuantizeOut& q);

// Codebook interchange blob: "MRCB" + u32 size + u32 dim + float32 LE
// row-major vectors.
void write_codebook(const std::string& path, const Codebook& cb);
Codebook read_codebook(const std::string& path);

}  // namespace nasp::aqvae
