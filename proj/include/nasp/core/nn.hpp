#pragma once

#include <string>
#include <utility>
#include <vector>

#include "nasp/core/ops.hpp"
#include "nasp/core/rng.hpp"

namespace nasp::nn {

using ad::Tensor;

// Ordered (name, tensor) pairs; the order fixes checkpoint blob layout.
using ParamList = std::vector<std::pair<std::string, Tensor>>;

// y = x W^T + b for x [N,in], weight [out,in].
class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features, core::Rng& rng, bool use_bias = true,
         double init_scale = 1.0, bool zero_init = false);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor weight;
  Tensor bias;  // [1,out]; unset when constructed without bias
  bool has_bias = false;
};

// Single-image convolution, x [cin,H,W] -> [cout,OH,OW].
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int cin, int cout, int kernel, int stride, int pad, core::Rng& rng,
         bool zero_init = false);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor weight;  // [cout,cin,k,k]
  Tensor bias;    // [cout]
  int stride = 1;
  int pad = 0;
};

// Group normalization with learned per-channel scale and shift.
class GroupNorm {
 public:
  GroupNorm() = default;
  GroupNorm(int channels, int groups, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;  // x [C,H,W]
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor gamma;  // [C,1,1]
  Tensor beta;   // [C,1,1]
  int groups = 1;
  double eps = 1e-5;
};

// Layer normalization over the last dim with learned affine.
class LayerNorm {
 public:
  LayerNorm() = default;
  explicit LayerNorm(int dim, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;  // [...,D]
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor gamma;  // [1,D]
  Tensor beta;   // [1,D]
  double eps = 1e-5;
};

// Residual block with label-conditioned feature modulation: each of the two
// normalizations is followed by a per-channel scale (1+g) and shift d looked
// up from a zero-initialized per-label table, so at initialization the
// modulation is the identity and the output is label-invariant. The closing
// convolution is zero-initialized, making the whole block the identity map at
// step 0. With n_labels=1 this degenerates to an unconditioned residual block
// whose post-norm affine is still learned.
class FiLMResBlock {
 public:
  FiLMResBlock() = default;
  FiLMResBlock(int channels, int n_labels, int groups, core::Rng& rng);
  Tensor forward(const Tensor& x, int label) const;  // x [C,H,W]
  void collect(ParamList& out, const std::string& prefix) const;

  Tensor film1;  // [n_labels, 2C] -> (scale offset, shift)
  Tensor film2;
  Conv2d conv1;
  Conv2d conv2;
  int channels = 0;
  int groups = 1;
  int n_labels = 1;
};

// Multi-head attention. Queries come from q_in [T,D], keys/values from
// kv_in [S,D] (pass q_in for self-attention). `mask` is additive on the
// pre-softmax scores, shape [T,S] (0 = visible, large negative = blocked);
// pass an unset Tensor for no mask.
class MultiheadAttention {
 public:
  MultiheadAttention() = default;
  MultiheadAttention(int dim, int heads, core::Rng& rng);
  Tensor forward(const Tensor& q_in, const Tensor& kv_in, const Tensor& mask) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Linear wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;
};

// Two-layer feed-forward with GELU.
class MLP {
 public:
  MLP() = default;
  MLP(int dim, int hidden, core::Rng& rng);
  Tensor forward(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;

  Linear fc1, fc2;
};

// Additive attention mask helpers (0 = visible, -1e30 = blocked).
Tensor causal_mask(int t);
inline constexpr double kMaskBlocked = -1e30;

}  // namespace nasp::nn
