#pragma once

#include "nasp/core/tensor.hpp"

namespace nasp::ad {

// Elementwise, NumPy-style broadcasting (trailing alignment, 1-dims expand).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor sadd(const Tensor& a, double s);
Tensor smul(const Tensor& a, double s);
Tensor neg(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a, double eps = 0.0);  // sqrt(a + eps)
Tensor square(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor silu(const Tensor& a);
Tensor gelu(const Tensor& a);
Tensor clamp_min(const Tensor& a, double c);
Tensor clamp_max(const Tensor& a, double c);

// Reductions.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor sum_lastdim(const Tensor& a);   // [...,D] -> [...,1]
Tensor mean_lastdim(const Tensor& a);  // [...,D] -> [...,1]

// Shape manipulation (copying; tensors are small at this scale).
Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);       // along dim 0
Tensor narrow_dim0(const Tensor& a, int start, int len);    // rows [start, start+len)
Tensor split_heads(const Tensor& a, int heads);             // [T,D] -> [H,T,D/H]
Tensor merge_heads(const Tensor& a);                        // [H,T,dh] -> [T,H*dh]

// Linear algebra. C = op_a(A) * op_b(B), op is optional transpose.
Tensor matmul(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);
Tensor bmm(const Tensor& a, const Tensor& b, bool ta = false, bool tb = false);

// Neural-net primitives.
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor pick_rows(const Tensor& a, const std::vector<int>& idx);  // [N,V],[N]->[N]
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_nearest2x(const Tensor& x);                 // [C,H,W] -> [C,2H,2W]
Tensor bilinear_resize(const Tensor& x, int oh, int ow);    // align_corners=false
Tensor adaptive_avg_pool(const Tensor& x, int oh, int ow);  // area downsample
Tensor group_norm(const Tensor& x, int groups, double eps); // [C,H,W], no affine
Tensor layer_norm_lastdim(const Tensor& x, double eps);     // no affine
Tensor embedding_row(const Tensor& table, int row);         // [V,D] -> [1,D], table gets grads
Tensor embedding_rows(const Tensor& table, const std::vector<int>& rows);  // [V,D],[N] -> [N,D]
Tensor transpose2d(const Tensor& a);                           // [R,C] -> [C,R]
Tensor gather_rows_nograd(const Tensor& table, const std::vector<int>& rows);  // detached

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }

}  // namespace nasp::ad
