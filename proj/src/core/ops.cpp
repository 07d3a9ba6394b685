#include "nasp/core/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

namespace nasp::ad {

namespace {

using MatRM = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const MatRM>;
using MMap = Eigen::Map<MatRM>;

[[noreturn]] void fail(const std::string& op, const std::string& msg) {
  throw std::invalid_argument(op + ": " + msg);
}

// Broadcast bookkeeping: per-output-dim strides into each input, 0 where the
// input dimension is broadcast.
struct BCast {
  Shape oshape;
  std::vector<std::int64_t> sa, sb;
  std::int64_t n = 0;
  bool same = false;
};

BCast make_bcast(const std::string& op, const Shape& a, const Shape& b) {
  BCast bc;
  bc.same = (a == b);
  const int nd = static_cast<int>(std::max(a.size(), b.size()));
  bc.oshape.assign(nd, 1);
  bc.sa.assign(nd, 0);
  bc.sb.assign(nd, 0);
  std::vector<std::int64_t> ca(a.size()), cb(b.size());
  std::int64_t s = 1;
  for (int i = static_cast<int>(a.size()) - 1; i >= 0; --i) { ca[i] = s; s *= a[i]; }
  s = 1;
  for (int i = static_cast<int>(b.size()) - 1; i >= 0; --i) { cb[i] = s; s *= b[i]; }
  for (int d = nd - 1; d >= 0; --d) {
    const int ad = d - (nd - static_cast<int>(a.size()));
    const int bd = d - (nd - static_cast<int>(b.size()));
    const int av = ad >= 0 ? a[ad] : 1;
    const int bv = bd >= 0 ? b[bd] : 1;
    if (av != bv && av != 1 && bv != 1)
      fail(op, "shapes " + shape_str(a) + " and " + shape_str(b) + " do not broadcast");
    bc.oshape[d] = std::max(av, bv);
    if (ad >= 0 && av != 1) bc.sa[d] = ca[ad];
    if (bd >= 0 && bv != 1) bc.sb[d] = cb[bd];
  }
  bc.n = shape_numel(bc.oshape);
  return bc;
}

template <class F>
void bc_loop(const BCast& bc, F&& body) {
  if (bc.same) {
    for (std::int64_t k = 0; k < bc.n; ++k) body(k, k, k);
    return;
  }
  const int nd = static_cast<int>(bc.oshape.size());
  std::vector<int> idx(nd, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t k = 0; k < bc.n; ++k) {
    body(k, ia, ib);
    for (int d = nd - 1; d >= 0; --d) {
      ++idx[d];
      ia += bc.sa[d];
      ib += bc.sb[d];
      if (idx[d] < bc.oshape[d]) break;
      idx[d] = 0;
      ia -= bc.sa[d] * bc.oshape[d];
      ib -= bc.sb[d] * bc.oshape[d];
    }
  }
}

// f(av,bv) forward; dfa/dfb give d(out)/d(input) at the element.
template <class F, class DFA, class DFB>
Tensor ewise2(const std::string& op, const Tensor& a, const Tensor& b, F f, DFA dfa, DFB dfb) {
  BCast bc = make_bcast(op, a.shape(), b.shape());
  Tensor out = make_node(bc.oshape, {a, b}, [a, b, bc, dfa, dfb](Node& n) {
    const double* av = a.data();
    const double* bv = b.data();
    const double* g = n.grad.data();
    double* da = a.requires_grad() ? a.node()->ensure_grad().data() : nullptr;
    double* db = b.requires_grad() ? b.node()->ensure_grad().data() : nullptr;
    bc_loop(bc, [&](std::int64_t k, std::int64_t ia, std::int64_t ib) {
      if (da) da[ia] += dfa(av[ia], bv[ib]) * g[k];
      if (db) db[ib] += dfb(av[ia], bv[ib]) * g[k];
    });
  });
  const double* av = a.data();
  const double* bv = b.data();
  double* ov = out.data();
  bc_loop(bc, [&](std::int64_t k, std::int64_t ia, std::int64_t ib) { ov[k] = f(av[ia], bv[ib]); });
  return out;
}

// df(x, y) with y the forward output, so e.g. exp can reuse it.
template <class F, class DF>
Tensor ewise1(const Tensor& a, F f, DF df) {
  Tensor out = make_node(a.shape(), {a}, [a, df](Node& n) {
    const double* av = a.data();
    const double* yv = n.value.data();
    const double* g = n.grad.data();
    double* da = a.node()->ensure_grad().data();
    const std::int64_t m = static_cast<std::int64_t>(n.value.size());
    for (std::int64_t k = 0; k < m; ++k) da[k] += df(av[k], yv[k]) * g[k];
  });
  const double* av = a.data();
  double* ov = out.data();
  const std::int64_t m = a.numel();
  for (std::int64_t k = 0; k < m; ++k) ov[k] = f(av[k]);
  return out;
}

// C = op_a(A) * op_b(B) with optional transposes on stored row-major blocks.
void gemm(const double* a, int ar, int ac, const double* b, int br, int bc, double* c,
          bool ta, bool tb) {
  CMap A(a, ar, ac), B(b, br, bc);
  const int M = ta ? ac : ar, N = tb ? br : bc;
  MMap C(c, M, N);
  if (!ta && !tb) C.noalias() = A * B;
  else if (ta && !tb) C.noalias() = A.transpose() * B;
  else if (!ta && tb) C.noalias() = A * B.transpose();
  else C.noalias() = A.transpose() * B.transpose();
}

void im2col(const double* x, int C, int H, int W, int kh, int kw, int stride, int pad,
            int OH, int OW, double* col) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        double* row = col + ((static_cast<std::int64_t>(c) * kh + u) * kw + v) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + u;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + v;
            row[oy * OW + ox] = (iy >= 0 && iy < H && ix >= 0 && ix < W)
                                    ? x[(static_cast<std::int64_t>(c) * H + iy) * W + ix]
                                    : 0.0;
          }
        }
      }
}

void col2im_add(const double* col, int C, int H, int W, int kh, int kw, int stride, int pad,
                int OH, int OW, double* dx) {
  for (int c = 0; c < C; ++c)
    for (int u = 0; u < kh; ++u)
      for (int v = 0; v < kw; ++v) {
        const double* row = col + ((static_cast<std::int64_t>(c) * kh + u) * kw + v) * OH * OW;
        for (int oy = 0; oy < OH; ++oy) {
          const int iy = oy * stride - pad + u;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < OW; ++ox) {
            const int ix = ox * stride - pad + v;
            if (ix < 0 || ix >= W) continue;
            dx[(static_cast<std::int64_t>(c) * H + iy) * W + ix] += row[oy * OW + ox];
          }
        }
      }
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  return ewise2("add", a, b, [](double x, double y) { return x + y; },
                [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return ewise2("sub", a, b, [](double x, double y) { return x - y; },
                [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return ewise2("mul", a, b, [](double x, double y) { return x * y; },
                [](double, double y) { return y; }, [](double x, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return ewise2("div", a, b, [](double x, double y) { return x / y; },
                [](double, double y) { return 1.0 / y; },
                [](double x, double y) { return -x / (y * y); });
}

Tensor sadd(const Tensor& a, double s) {
  return ewise1(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor smul(const Tensor& a, double s) {
  return ewise1(a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor neg(const Tensor& a) { return smul(a, -1.0); }

Tensor exp(const Tensor& a) {
  return ewise1(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return ewise1(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a, double eps) {
  return ewise1(a, [eps](double x) { return std::sqrt(x + eps); },
                [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return ewise1(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor sigmoid(const Tensor& a) {
  return ewise1(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                [](double, double y) { return y * (1.0 - y); });
}

Tensor silu(const Tensor& a) {
  return ewise1(a, [](double x) { return x / (1.0 + std::exp(-x)); },
                [](double x, double) {
                  const double s = 1.0 / (1.0 + std::exp(-x));
                  return s * (1.0 + x * (1.0 - s));
                });
}

Tensor gelu(const Tensor& a) {
  constexpr double kC = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double kA = 0.044715;
  return ewise1(a,
                [](double x) {
                  const double t = std::tanh(kC * (x + kA * x * x * x));
                  return 0.5 * x * (1.0 + t);
                },
                [](double x, double) {
                  const double u = kC * (x + kA * x * x * x);
                  const double t = std::tanh(u);
                  return 0.5 * (1.0 + t) +
                         0.5 * x * (1.0 - t * t) * kC * (1.0 + 3.0 * kA * x * x);
                });
}

Tensor clamp_min(const Tensor& a, double c) {
  return ewise1(a, [c](double x) { return x < c ? c : x; },
                [c](double x, double) { return x >= c ? 1.0 : 0.0; });
}

Tensor clamp_max(const Tensor& a, double c) {
  return ewise1(a, [c](double x) { return x > c ? c : x; },
                [c](double x, double) { return x <= c ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
  Tensor out = make_node({1}, {a}, [a](Node& n) {
    const double g = n.grad[0];
    double* da = a.node()->ensure_grad().data();
    const std::int64_t m = a.numel();
    for (std::int64_t k = 0; k < m; ++k) da[k] += g;
  });
  double s = 0.0;
  for (double v : a.values()) s += v;
  out.data()[0] = s;
  return out;
}

Tensor mean(const Tensor& a) { return smul(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor sum_lastdim(const Tensor& a) {
  if (a.ndim() < 1) fail("sum_lastdim", "rank must be >= 1");
  const int D = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.numel() / D;
  Shape os = a.shape();
  os.back() = 1;
  Tensor out = make_node(os, {a}, [a, rows, D](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double g = n.grad[r];
      for (int k = 0; k < D; ++k) da[r * D + k] += g;
    }
  });
  const double* av = a.data();
  double* ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int k = 0; k < D; ++k) s += av[r * D + k];
    ov[r] = s;
  }
  return out;
}

Tensor mean_lastdim(const Tensor& a) {
  return smul(sum_lastdim(a), 1.0 / static_cast<double>(a.dim(a.ndim() - 1)));
}

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel())
    fail("reshape", shape_str(a.shape()) + " -> " + shape_str(shape) + " changes element count");
  Tensor out = make_node(shape, {a}, [a](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (std::size_t k = 0; k < n.grad.size(); ++k) da[k] += n.grad[k];
  });
  out.values() = a.values();
  return out;
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_rows", "no inputs");
  const Shape& s0 = parts[0].shape();
  int rows = 0;
  for (const Tensor& p : parts) {
    if (p.ndim() != static_cast<int>(s0.size())) fail("concat_rows", "rank mismatch");
    for (std::size_t d = 1; d < s0.size(); ++d)
      if (p.shape()[d] != s0[d]) fail("concat_rows", "trailing dims mismatch");
    rows += p.dim(0);
  }
  Shape os = s0;
  os[0] = rows;
  const std::int64_t rowsz = shape_numel(s0) / s0[0];
  Tensor out = make_node(os, parts, [parts, rowsz](Node& n) {
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
      const std::int64_t m = p.numel();
      if (p.requires_grad()) {
        double* dp = p.node()->ensure_grad().data();
        for (std::int64_t k = 0; k < m; ++k) dp[k] += n.grad[off + k];
      }
      off += m;
    }
    (void)rowsz;
  });
  double* ov = out.data();
  std::int64_t off = 0;
  for (const Tensor& p : parts) {
    std::memcpy(ov + off, p.data(), sizeof(double) * static_cast<std::size_t>(p.numel()));
    off += p.numel();
  }
  return out;
}

Tensor narrow_dim0(const Tensor& a, int start, int len) {
  if (start < 0 || len < 0 || start + len > a.dim(0)) fail("narrow_dim0", "range out of bounds");
  Shape os = a.shape();
  os[0] = len;
  const std::int64_t rowsz = a.numel() / a.dim(0);
  Tensor out = make_node(os, {a}, [a, start, rowsz](Node& n) {
    double* da = a.node()->ensure_grad().data() + start * rowsz;
    for (std::size_t k = 0; k < n.grad.size(); ++k) da[k] += n.grad[k];
  });
  std::memcpy(out.data(), a.data() + start * rowsz,
              sizeof(double) * static_cast<std::size_t>(len * rowsz));
  return out;
}

Tensor split_heads(const Tensor& a, int heads) {
  if (a.ndim() != 2) fail("split_heads", "expected [T,D]");
  const int T = a.dim(0), D = a.dim(1);
  if (D % heads != 0) fail("split_heads", "heads must divide the model width");
  const int dh = D / heads;
  Tensor out = make_node({heads, T, dh}, {a}, [a, heads, T, dh](Node& n) {
    double* da = a.node()->ensure_grad().data();
    const int D = heads * dh;
    for (int h = 0; h < heads; ++h)
      for (int t = 0; t < T; ++t)
        for (int k = 0; k < dh; ++k)
          da[t * D + h * dh + k] += n.grad[(static_cast<std::int64_t>(h) * T + t) * dh + k];
  });
  const double* av = a.data();
  double* ov = out.data();
  for (int h = 0; h < heads; ++h)
    for (int t = 0; t < T; ++t)
      std::memcpy(ov + (static_cast<std::int64_t>(h) * T + t) * dh, av + t * D + h * dh,
                  sizeof(double) * static_cast<std::size_t>(dh));
  return out;
}

Tensor merge_heads(const Tensor& a) {
  if (a.ndim() != 3) fail("merge_heads", "expected [H,T,dh]");
  const int H = a.dim(0), T = a.dim(1), dh = a.dim(2);
  const int D = H * dh;
  Tensor out = make_node({T, D}, {a}, [a, H, T, dh, D](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (int h = 0; h < H; ++h)
      for (int t = 0; t < T; ++t)
        for (int k = 0; k < dh; ++k)
          da[(static_cast<std::int64_t>(h) * T + t) * dh + k] += n.grad[t * D + h * dh + k];
  });
  const double* av = a.data();
  double* ov = out.data();
  for (int h = 0; h < H; ++h)
    for (int t = 0; t < T; ++t)
      std::memcpy(ov + t * D + h * dh, av + (static_cast<std::int64_t>(h) * T + t) * dh,
                  sizeof(double) * static_cast<std::size_t>(dh));
  return out;
}

Tensor matmul(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.ndim() != 2 || b.ndim() != 2) fail("matmul", "expected 2-D operands");
  const int ar = a.dim(0), ac = a.dim(1), br = b.dim(0), bc = b.dim(1);
  const int M = ta ? ac : ar, K = ta ? ar : ac;
  const int Kb = tb ? bc : br, N = tb ? br : bc;
  if (K != Kb)
    fail("matmul", "inner dims mismatch: " + shape_str(a.shape()) + (ta ? "^T" : "") + " x " +
                       shape_str(b.shape()) + (tb ? "^T" : ""));
  Tensor out = make_node({M, N}, {a, b}, [a, b, ta, tb, ar, ac, br, bc](Node& n) {
    const double* av = a.data();
    const double* bv = b.data();
    CMap A(av, ar, ac), B(bv, br, bc);
    const int M = ta ? ac : ar, N = tb ? br : bc;
    CMap G(n.grad.data(), M, N);
    if (a.requires_grad()) {
      MMap dA(a.node()->ensure_grad().data(), ar, ac);
      if (!ta && !tb) dA.noalias() += G * B.transpose();
      else if (!ta && tb) dA.noalias() += G * B;
      else if (ta && !tb) dA.noalias() += B * G.transpose();
      else dA.noalias() += B.transpose() * G.transpose();
    }
    if (b.requires_grad()) {
      MMap dB(b.node()->ensure_grad().data(), br, bc);
      if (!tb && !ta) dB.noalias() += A.transpose() * G;
      else if (!tb && ta) dB.noalias() += A * G;
      else if (tb && !ta) dB.noalias() += G.transpose() * A;
      else dB.noalias() += G.transpose() * A.transpose();
    }
  });
  gemm(a.data(), ar, ac, b.data(), br, bc, out.data(), ta, tb);
  return out;
}

Tensor bmm(const Tensor& a, const Tensor& b, bool ta, bool tb) {
  if (a.ndim() != 3 || b.ndim() != 3 || a.dim(0) != b.dim(0))
    fail("bmm", "expected [B,?,?] x [B,?,?]");
  const int Bn = a.dim(0), ar = a.dim(1), ac = a.dim(2), br = b.dim(1), bc = b.dim(2);
  const int M = ta ? ac : ar, K = ta ? ar : ac;
  const int Kb = tb ? bc : br, N = tb ? br : bc;
  if (K != Kb) fail("bmm", "inner dims mismatch");
  Tensor out = make_node({Bn, M, N}, {a, b}, [a, b, ta, tb, Bn, ar, ac, br, bc, M, N](Node& n) {
    for (int i = 0; i < Bn; ++i) {
      const double* av = a.data() + static_cast<std::int64_t>(i) * ar * ac;
      const double* bv = b.data() + static_cast<std::int64_t>(i) * br * bc;
      CMap A(av, ar, ac), B(bv, br, bc);
      CMap G(n.grad.data() + static_cast<std::int64_t>(i) * M * N, M, N);
      if (a.requires_grad()) {
        MMap dA(a.node()->ensure_grad().data() + static_cast<std::int64_t>(i) * ar * ac, ar, ac);
        if (!ta && !tb) dA.noalias() += G * B.transpose();
        else if (!ta && tb) dA.noalias() += G * B;
        else if (ta && !tb) dA.noalias() += B * G.transpose();
        else dA.noalias() += B.transpose() * G.transpose();
      }
      if (b.requires_grad()) {
        MMap dB(b.node()->ensure_grad().data() + static_cast<std::int64_t>(i) * br * bc, br, bc);
        if (!tb && !ta) dB.noalias() += A.transpose() * G;
        else if (!tb && ta) dB.noalias() += A * G;
        else if (tb && !ta) dB.noalias() += G.transpose() * A;
        else dB.noalias() += G.transpose() * A.transpose();
      }
    }
  });
  for (int i = 0; i < Bn; ++i)
    gemm(a.data() + static_cast<std::int64_t>(i) * ar * ac, ar, ac,
         b.data() + static_cast<std::int64_t>(i) * br * bc, br, bc,
         out.data() + static_cast<std::int64_t>(i) * M * N, ta, tb);
  return out;
}

Tensor softmax_lastdim(const Tensor& a) {
  const int D = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.numel() / D;
  Tensor out = make_node(a.shape(), {a}, [a, rows, D](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * D;
      const double* g = n.grad.data() + r * D;
      double dot = 0.0;
      for (int k = 0; k < D; ++k) dot += y[k] * g[k];
      for (int k = 0; k < D; ++k) da[r * D + k] += y[k] * (g[k] - dot);
    }
  });
  const double* av = a.data();
  double* ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av + r * D;
    double m = x[0];
    for (int k = 1; k < D; ++k) m = std::max(m, x[k]);
    double s = 0.0;
    for (int k = 0; k < D; ++k) {
      ov[r * D + k] = std::exp(x[k] - m);
      s += ov[r * D + k];
    }
    for (int k = 0; k < D; ++k) ov[r * D + k] /= s;
  }
  return out;
}

Tensor log_softmax_lastdim(const Tensor& a) {
  const int D = a.dim(a.ndim() - 1);
  const std::int64_t rows = a.numel() / D;
  Tensor out = make_node(a.shape(), {a}, [a, rows, D](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = n.value.data() + r * D;
      const double* g = n.grad.data() + r * D;
      double gs = 0.0;
      for (int k = 0; k < D; ++k) gs += g[k];
      for (int k = 0; k < D; ++k) da[r * D + k] += g[k] - std::exp(y[k]) * gs;
    }
  });
  const double* av = a.data();
  double* ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = av + r * D;
    double m = x[0];
    for (int k = 1; k < D; ++k) m = std::max(m, x[k]);
    double s = 0.0;
    for (int k = 0; k < D; ++k) s += std::exp(x[k] - m);
    const double lse = m + std::log(s);
    for (int k = 0; k < D; ++k) ov[r * D + k] = x[k] - lse;
  }
  return out;
}

Tensor pick_rows(const Tensor& a, const std::vector<int>& idx) {
  if (a.ndim() != 2) fail("pick_rows", "expected [N,V]");
  const int N = a.dim(0), V = a.dim(1);
  if (static_cast<int>(idx.size()) != N) fail("pick_rows", "index count mismatch");
  for (int i : idx)
    if (i < 0 || i >= V) fail("pick_rows", "index out of range");
  Tensor out = make_node({N}, {a}, [a, idx, V](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (std::size_t r = 0; r < idx.size(); ++r)
      da[r * V + idx[r]] += n.grad[r];
  });
  const double* av = a.data();
  double* ov = out.data();
  for (int r = 0; r < N; ++r) ov[r] = av[static_cast<std::int64_t>(r) * V + idx[r]];
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.ndim() != 3 || w.ndim() != 4) fail("conv2d", "expected x [C,H,W], w [O,C,kh,kw]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int O = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  if (w.dim(1) != C) fail("conv2d", "channel mismatch");
  if (b.numel() != O) fail("conv2d", "bias size mismatch");
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  if (OH <= 0 || OW <= 0) fail("conv2d", "empty output");
  const int CKK = C * kh * kw;
  Tensor out = make_node(
      {O, OH, OW}, {x, w, b}, [x, w, b, stride, pad, C, H, W, O, kh, kw, OH, OW, CKK](Node& n) {
        const std::int64_t P = static_cast<std::int64_t>(OH) * OW;
        const double* g = n.grad.data();
        if (b.requires_grad()) {
          double* db = b.node()->ensure_grad().data();
          for (int o = 0; o < O; ++o) {
            double s = 0.0;
            for (std::int64_t k = 0; k < P; ++k) s += g[o * P + k];
            db[o] += s;
          }
        }
        std::vector<double> col;
        if (w.requires_grad()) {
          col.resize(static_cast<std::size_t>(CKK) * P);
          im2col(x.data(), C, H, W, kh, kw, stride, pad, OH, OW, col.data());
          // dW [O,CKK] += G [O,P] * col^T [P,CKK]
          CMap G(g, O, static_cast<int>(P));
          CMap Col(col.data(), CKK, static_cast<int>(P));
          MMap dW(w.node()->ensure_grad().data(), O, CKK);
          dW.noalias() += G * Col.transpose();
        }
        if (x.requires_grad()) {
          std::vector<double> dcol(static_cast<std::size_t>(CKK) * P);
          CMap G(g, O, static_cast<int>(P));
          CMap Wm(w.data(), O, CKK);
          MMap dCol(dcol.data(), CKK, static_cast<int>(P));
          dCol.noalias() = Wm.transpose() * G;
          col2im_add(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                     x.node()->ensure_grad().data());
        }
      });
  const std::int64_t P = static_cast<std::int64_t>(OH) * OW;
  std::vector<double> col(static_cast<std::size_t>(CKK) * P);
  im2col(x.data(), C, H, W, kh, kw, stride, pad, OH, OW, col.data());
  gemm(w.data(), O, CKK, col.data(), CKK, static_cast<int>(P), out.data(), false, false);
  double* ov = out.data();
  const double* bv = b.data();
  for (int o = 0; o < O; ++o)
    for (std::int64_t k = 0; k < P; ++k) ov[o * P + k] += bv[o];
  return out;
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.ndim() != 3) fail("upsample_nearest2x", "expected [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  Tensor out = make_node({C, 2 * H, 2 * W}, {x}, [x, C, H, W](Node& n) {
    double* dx = x.node()->ensure_grad().data();
    const int OW = 2 * W;
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H; ++i)
        for (int j = 0; j < W; ++j) {
          const std::int64_t base = (static_cast<std::int64_t>(c) * 2 * H + 2 * i) * OW + 2 * j;
          dx[(static_cast<std::int64_t>(c) * H + i) * W + j] +=
              n.grad[base] + n.grad[base + 1] + n.grad[base + OW] + n.grad[base + OW + 1];
        }
  });
  const double* xv = x.data();
  double* ov = out.data();
  const int OW = 2 * W;
  for (int c = 0; c < C; ++c)
    for (int i = 0; i < H; ++i)
      for (int j = 0; j < W; ++j) {
        const double v = xv[(static_cast<std::int64_t>(c) * H + i) * W + j];
        const std::int64_t base = (static_cast<std::int64_t>(c) * 2 * H + 2 * i) * OW + 2 * j;
        ov[base] = v;
        ov[base + 1] = v;
        ov[base + OW] = v;
        ov[base + OW + 1] = v;
      }
  return out;
}

namespace {
// align_corners=false source coordinate with edge clamping.
inline void lin_coef(int o, int in, int out, int& i0, int& i1, double& t) {
  double src = (o + 0.5) * static_cast<double>(in) / out - 0.5;
  src = std::min(std::max(src, 0.0), static_cast<double>(in - 1));
  i0 = static_cast<int>(src);
  i1 = std::min(i0 + 1, in - 1);
  t = src - i0;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, int oh, int ow) {
  if (x.ndim() != 3) fail("bilinear_resize", "expected [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (oh == H && ow == W) return reshape(x, x.shape());
  Tensor out = make_node({C, oh, ow}, {x}, [x, C, H, W, oh, ow](Node& n) {
    double* dx = x.node()->ensure_grad().data();
    for (int oy = 0; oy < oh; ++oy) {
      int y0, y1;
      double ty;
      lin_coef(oy, H, oh, y0, y1, ty);
      for (int ox = 0; ox < ow; ++ox) {
        int x0, x1;
        double tx;
        lin_coef(ox, W, ow, x0, x1, tx);
        for (int c = 0; c < C; ++c) {
          const double g = n.grad[(static_cast<std::int64_t>(c) * oh + oy) * ow + ox];
          const std::int64_t p = static_cast<std::int64_t>(c) * H;
          dx[(p + y0) * W + x0] += (1 - ty) * (1 - tx) * g;
          dx[(p + y0) * W + x1] += (1 - ty) * tx * g;
          dx[(p + y1) * W + x0] += ty * (1 - tx) * g;
          dx[(p + y1) * W + x1] += ty * tx * g;
        }
      }
    }
  });
  const double* xv = x.data();
  double* ov = out.data();
  for (int oy = 0; oy < oh; ++oy) {
    int y0, y1;
    double ty;
    lin_coef(oy, H, oh, y0, y1, ty);
    for (int ox = 0; ox < ow; ++ox) {
      int x0, x1;
      double tx;
      lin_coef(ox, W, ow, x0, x1, tx);
      for (int c = 0; c < C; ++c) {
        const std::int64_t p = static_cast<std::int64_t>(c) * H;
        const double v = (1 - ty) * ((1 - tx) * xv[(p + y0) * W + x0] + tx * xv[(p + y0) * W + x1]) +
                         ty * ((1 - tx) * xv[(p + y1) * W + x0] + tx * xv[(p + y1) * W + x1]);
        ov[(static_cast<std::int64_t>(c) * oh + oy) * ow + ox] = v;
      }
    }
  }
  return out;
}

Tensor adaptive_avg_pool(const Tensor& x, int oh, int ow) {
  if (x.ndim() != 3) fail("adaptive_avg_pool", "expected [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  auto lo = [](int o, int in, int out) { return (o * in) / out; };
  auto hi = [](int o, int in, int out) { return ((o + 1) * in + out - 1) / out; };
  Tensor out = make_node({C, oh, ow}, {x}, [x, C, H, W, oh, ow, lo, hi](Node& n) {
    double* dx = x.node()->ensure_grad().data();
    for (int oy = 0; oy < oh; ++oy) {
      const int y0 = lo(oy, H, oh), y1 = hi(oy, H, oh);
      for (int ox = 0; ox < ow; ++ox) {
        const int x0 = lo(ox, W, ow), x1 = hi(ox, W, ow);
        const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
        for (int c = 0; c < C; ++c) {
          const double g = n.grad[(static_cast<std::int64_t>(c) * oh + oy) * ow + ox] * inv;
          for (int iy = y0; iy < y1; ++iy)
            for (int ix = x0; ix < x1; ++ix)
              dx[(static_cast<std::int64_t>(c) * H + iy) * W + ix] += g;
        }
      }
    }
  });
  const double* xv = x.data();
  double* ov = out.data();
  for (int oy = 0; oy < oh; ++oy) {
    const int y0 = lo(oy, H, oh), y1 = hi(oy, H, oh);
    for (int ox = 0; ox < ow; ++ox) {
      const int x0 = lo(ox, W, ow), x1 = hi(ox, W, ow);
      const double inv = 1.0 / ((y1 - y0) * (x1 - x0));
      for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int iy = y0; iy < y1; ++iy)
          for (int ix = x0; ix < x1; ++ix)
            s += xv[(static_cast<std::int64_t>(c) * H + iy) * W + ix];
        ov[(static_cast<std::int64_t>(c) * oh + oy) * ow + ox] = s * inv;
      }
    }
  }
  return out;
}

Tensor group_norm(const Tensor& x, int groups, double eps) {
  if (x.ndim() != 3) fail("group_norm", "expected [C,H,W]");
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (C % groups != 0) fail("group_norm", "groups must divide channels");
  const std::int64_t m = static_cast<std::int64_t>(C / groups) * H * W;
  Tensor out = make_node(x.shape(), {x}, [x, groups, eps, m](Node& n) {
    const double* xv = x.data();
    double* dx = x.node()->ensure_grad().data();
    for (int gi = 0; gi < groups; ++gi) {
      const double* xg = xv + gi * m;
      const double* yg = n.value.data() + gi * m;
      const double* gg = n.grad.data() + gi * m;
      double* dg = dx + gi * m;
      double mu = 0.0;
      for (std::int64_t k = 0; k < m; ++k) mu += xg[k];
      mu /= m;
      double var = 0.0;
      for (std::int64_t k = 0; k < m; ++k) var += (xg[k] - mu) * (xg[k] - mu);
      var /= m;
      const double inv = 1.0 / std::sqrt(var + eps);
      double gmean = 0.0, gymean = 0.0;
      for (std::int64_t k = 0; k < m; ++k) {
        gmean += gg[k];
        gymean += gg[k] * yg[k];
      }
      gmean /= m;
      gymean /= m;
      for (std::int64_t k = 0; k < m; ++k)
        dg[k] += inv * (gg[k] - gmean - yg[k] * gymean);
    }
  });
  const double* xv = x.data();
  double* ov = out.data();
  for (int gi = 0; gi < groups; ++gi) {
    const double* xg = xv + gi * m;
    double* og = ov + gi * m;
    double mu = 0.0;
    for (std::int64_t k = 0; k < m; ++k) mu += xg[k];
    mu /= m;
    double var = 0.0;
    for (std::int64_t k = 0; k < m; ++k) var += (xg[k] - mu) * (xg[k] - mu);
    var /= m;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::int64_t k = 0; k < m; ++k) og[k] = (xg[k] - mu) * inv;
  }
  return out;
}

Tensor layer_norm_lastdim(const Tensor& x, double eps) {
  const int D = x.dim(x.ndim() - 1);
  const std::int64_t rows = x.numel() / D;
  Tensor out = make_node(x.shape(), {x}, [x, rows, D, eps](Node& n) {
    const double* xv = x.data();
    double* dx = x.node()->ensure_grad().data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* xr = xv + r * D;
      const double* yr = n.value.data() + r * D;
      const double* gr = n.grad.data() + r * D;
      double mu = 0.0;
      for (int k = 0; k < D; ++k) mu += xr[k];
      mu /= D;
      double var = 0.0;
      for (int k = 0; k < D; ++k) var += (xr[k] - mu) * (xr[k] - mu);
      var /= D;
      const double inv = 1.0 / std::sqrt(var + eps);
      double gmean = 0.0, gymean = 0.0;
      for (int k = 0; k < D; ++k) {
        gmean += gr[k];
        gymean += gr[k] * yr[k];
      }
      gmean /= D;
      gymean /= D;
      for (int k = 0; k < D; ++k) dx[r * D + k] += inv * (gr[k] - gmean - yr[k] * gymean);
    }
  });
  const double* xv = x.data();
  double* ov = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = xv + r * D;
    double mu = 0.0;
    for (int k = 0; k < D; ++k) mu += xr[k];
    mu /= D;
    double var = 0.0;
    for (int k = 0; k < D; ++k) var += (xr[k] - mu) * (xr[k] - mu);
    var /= D;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int k = 0; k < D; ++k) ov[r * D + k] = (xr[k] - mu) * inv;
  }
  return out;
}

Tensor embedding_row(const Tensor& table, int row) {
  if (table.ndim() != 2) fail("embedding_row", "expected [V,D]");
  const int V = table.dim(0), D = table.dim(1);
  if (row < 0 || row >= V) fail("embedding_row", "row out of range");
  Tensor out = make_node({1, D}, {table}, [table, row, D](Node& n) {
    double* dt = table.node()->ensure_grad().data() + static_cast<std::int64_t>(row) * D;
    for (int k = 0; k < D; ++k) dt[k] += n.grad[k];
  });
  std::memcpy(out.data(), table.data() + static_cast<std::int64_t>(row) * D,
              sizeof(double) * static_cast<std::size_t>(D));
  return out;
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& rows) {
  if (table.ndim() != 2) fail("embedding_rows", "expected [V,D]");
  const int V = table.dim(0), D = table.dim(1);
  const int N = static_cast<int>(rows.size());
  if (N == 0) fail("embedding_rows", "empty row list");
  for (int r : rows) {
    if (r < 0 || r >= V) fail("embedding_rows", "row out of range");
  }
  Tensor out = make_node({N, D}, {table}, [table, rows, D](Node& n) {
    double* dt = table.node()->ensure_grad().data();
    for (std::size_t r = 0; r < rows.size(); ++r) {
      const double* g = n.grad.data() + static_cast<std::int64_t>(r) * D;
      double* row = dt + static_cast<std::int64_t>(rows[r]) * D;
      for (int k = 0; k < D; ++k) row[k] += g[k];
    }
  });
  for (int r = 0; r < N; ++r) {
    std::memcpy(out.data() + static_cast<std::int64_t>(r) * D,
                table.data() + static_cast<std::int64_t>(rows[r]) * D,
                sizeof(double) * static_cast<std::size_t>(D));
  }
  return out;
}

Tensor transpose2d(const Tensor& a) {
  if (a.ndim() != 2) fail("transpose2d", "expected [R,C]");
  const int R = a.dim(0), C = a.dim(1);
  Tensor out = make_node({C, R}, {a}, [a, R, C](Node& n) {
    double* da = a.node()->ensure_grad().data();
    for (int r = 0; r < R; ++r) {
      for (int c = 0; c < C; ++c) {
        da[static_cast<std::int64_t>(r) * C + c] += n.grad[static_cast<std::int64_t>(c) * R + r];
      }
    }
  });
  for (int r = 0; r < R; ++r) {
    for (int c = 0; c < C; ++c) {
      out.data()[static_cast<std::int64_t>(c) * R + r] = a.data()[static_cast<std::int64_t>(r) * C + c];
    }
  }
  return out;
}

Tensor gather_rows_nograd(const Tensor& table, const std::vector<int>& rows) {
  if (table.ndim() != 2) fail("gather_rows_nograd", "expected [V,D]");
  const int V = table.dim(0), D = table.dim(1);
  const int N = static_cast<int>(rows.size());
  std::vector<double> out(static_cast<std::size_t>(N) * D);
  for (int r = 0; r < N; ++r) {
    if (rows[r] < 0 || rows[r] >= V) fail("gather_rows_nograd", "row out of range");
    std::memcpy(out.data() + static_cast<std::int64_t>(r) * D,
                table.data() + static_cast<std::int64_t>(rows[r]) * D,
                sizeof(double) * static_cast<std::size_t>(D));
  }
  return Tensor::from_data({N, D}, std::move(out));
}

}  // namespace nasp::ad
