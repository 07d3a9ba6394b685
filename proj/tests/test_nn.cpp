#include <cmath>
#include <vector>

#include "doctest.h"
#include "gradcheck.hpp"
#include "nasp/core/nn.hpp"
#include "nasp/core/optim.hpp"
#include "nasp/core/rng.hpp"
#include "nasp/dataio/checkpoint.hpp"

using nasp::ad::Tensor;
namespace ad = nasp::ad;
namespace nn = nasp::nn;
namespace opt = nasp::opt;

namespace {

Tensor randt(nasp::core::Rng& rng, ad::Shape shape, bool rg = false, double scale = 1.0) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> v(static_cast<std::size_t>(n));
  for (auto& x : v) x = rng.normal(0.0, scale);
  return Tensor::from_data(std::move(shape), std::move(v), rg);
}

void randomize(Tensor t, nasp::core::Rng& rng, double scale = 0.5) {
  for (std::int64_t i = 0; i < t.numel(); ++i) t.data()[i] = rng.normal(0.0, scale);
}

}  // namespace

TEST_CASE("linear matches a hand-computed affine map") {
  nasp::core::Rng rng(1);
  nn::Linear lin(2, 3, rng);
  // w [3,2], b [1,3] set explicitly.
  const double w[6] = {1.0, 2.0, -1.0, 0.5, 3.0, -2.0};
  const double b[3] = {0.1, -0.2, 0.3};
  for (int i = 0; i < 6; ++i) lin.weight.data()[i] = w[i];
  for (int i = 0; i < 3; ++i) lin.bias.data()[i] = b[i];
  Tensor x = Tensor::from_data({2, 2}, {1.0, 1.0, 2.0, -1.0});
  Tensor y = lin.forward(x);
  REQUIRE(y.shape() == ad::Shape{2, 3});
  for (int n = 0; n < 2; ++n) {
    for (int o = 0; o < 3; ++o) {
      const double want = x.data()[n * 2] * w[o * 2] + x.data()[n * 2 + 1] * w[o * 2 + 1] + b[o];
      CHECK(y.data()[n * 3 + o] == doctest::Approx(want).epsilon(1e-12));
    }
  }
}

TEST_CASE("linear without bias leaves no bias parameter") {
  nasp::core::Rng rng(2);
  nn::Linear lin(4, 4, rng, /*use_bias=*/false);
  nn::ParamList ps;
  lin.collect(ps, "lin");
  CHECK(ps.size() == 1);
  CHECK(ps[0].first == "lin.weight");
}

TEST_CASE("linear gradcheck") {
  nasp::core::Rng rng(3);
  nn::Linear lin(3, 4, rng);
  Tensor x = randt(rng, {2, 3}, true);
  const double err = testutil::max_grad_error({x, lin.weight, lin.bias}, [&] {
    return ad::sum(ad::square(lin.forward(x)));
  });
  CHECK(err < 1e-6);
}

TEST_CASE("conv2d layer wraps the conv primitive with correct geometry") {
  nasp::core::Rng rng(4);
  nn::Conv2d conv(3, 5, 3, 2, 1, rng);
  Tensor x = randt(rng, {3, 8, 8});
  Tensor y = conv.forward(x);
  CHECK(y.shape() == ad::Shape{5, 4, 4});
  Tensor y2 = ad::conv2d(x, conv.weight, conv.bias, 2, 1);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == y2.data()[i]);
}

TEST_CASE("zero-initialized conv outputs zero") {
  nasp::core::Rng rng(5);
  nn::Conv2d conv(2, 2, 3, 1, 1, rng, /*zero_init=*/true);
  Tensor x = randt(rng, {2, 6, 6});
  Tensor y = conv.forward(x);
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == 0.0);
}

TEST_CASE("group norm affine applies learned scale and shift") {
  nasp::core::Rng rng(6);
  nn::GroupNorm gn(4, 2);
  for (int c = 0; c < 4; ++c) {
    gn.gamma.data()[c] = 2.0;
    gn.beta.data()[c] = 0.5;
  }
  Tensor x = randt(rng, {4, 5, 5});
  Tensor y = gn.forward(x);
  Tensor base = ad::group_norm(x, 2, 1e-5);
  for (std::int64_t i = 0; i < y.numel(); ++i) {
    CHECK(y.data()[i] == doctest::Approx(2.0 * base.data()[i] + 0.5).epsilon(1e-12));
  }
}

TEST_CASE("group norm gradcheck through affine") {
  nasp::core::Rng rng(7);
  nn::GroupNorm gn(4, 2);
  randomize(gn.gamma, rng);
  randomize(gn.beta, rng);
  Tensor x = randt(rng, {4, 3, 3}, true);
  const double err = testutil::max_grad_error({x, gn.gamma, gn.beta}, [&] {
    return ad::sum(ad::square(gn.forward(x)));
  });
  CHECK(err < 5e-6);
}

TEST_CASE("layer norm gradcheck and affine") {
  nasp::core::Rng rng(8);
  nn::LayerNorm ln(6);
  randomize(ln.gamma, rng);
  randomize(ln.beta, rng);
  Tensor x = randt(rng, {4, 6}, true);
  const double err = testutil::max_grad_error({x, ln.gamma, ln.beta}, [&] {
    return ad::sum(ad::square(ln.forward(x)));
  });
  CHECK(err < 5e-6);
}

TEST_CASE("film residual block is the identity at initialization") {
  nasp::core::Rng rng(9);
  nn::FiLMResBlock block(4, 24, 2, rng);
  Tensor x = randt(rng, {4, 6, 6});
  Tensor y = block.forward(x, 7);
  REQUIRE(y.shape() == x.shape());
  for (std::int64_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("film residual block is label-invariant while tables are zero") {
  nasp::core::Rng rng(10);
  nn::FiLMResBlock block(4, 24, 2, rng);
  randomize(block.conv2.weight, rng);  // break identity, keep FiLM tables zero
  randomize(block.conv2.bias, rng);
  Tensor x = randt(rng, {4, 6, 6});
  Tensor ya = block.forward(x, 0);
  Tensor yb = block.forward(x, 19);
  double md = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i)
    md = std::max(md, std::abs(ya.data()[i] - yb.data()[i]));
  CHECK(md < 1e-6);
}

TEST_CASE("film residual block responds to labels once tables are nonzero") {
  nasp::core::Rng rng(11);
  nn::FiLMResBlock block(4, 24, 2, rng);
  randomize(block.film1, rng);
  randomize(block.film2, rng);
  randomize(block.conv2.weight, rng);
  Tensor x = randt(rng, {4, 6, 6});
  Tensor ya = block.forward(x, 0);
  Tensor yb = block.forward(x, 19);
  double md = 0.0;
  for (std::int64_t i = 0; i < x.numel(); ++i)
    md = std::max(md, std::abs(ya.data()[i] - yb.data()[i]));
  CHECK(md > 1e-6);
}

TEST_CASE("film residual block gradcheck") {
  nasp::core::Rng rng(12);
  nn::FiLMResBlock block(2, 3, 1, rng);
  randomize(block.film1, rng, 0.2);
  randomize(block.film2, rng, 0.2);
  randomize(block.conv2.weight, rng, 0.3);
  Tensor x = randt(rng, {2, 4, 4}, true);
  const double err =
      testutil::max_grad_error({x, block.film1, block.film2, block.conv1.weight,
                                block.conv2.weight},
                               [&] { return ad::sum(ad::square(block.forward(x, 1))); });
  CHECK(err < 5e-6);
}

TEST_CASE("film residual block rejects out-of-range labels") {
  nasp::core::Rng rng(13);
  nn::FiLMResBlock block(2, 3, 1, rng);
  Tensor x = randt(rng, {2, 4, 4});
  CHECK_THROWS(block.forward(x, 3));
  CHECK_THROWS(block.forward(x, -1));
}

namespace {

// Straight-line reference attention: explicit loops over heads and positions.
std::vector<double> naive_attention(const nn::MultiheadAttention& mha, const Tensor& q_in,
                                    const Tensor& kv_in, const std::vector<double>* mask) {
  const int T = q_in.dim(0), S = kv_in.dim(0), D = q_in.dim(1);
  const int H = mha.heads, dh = D / H;
  auto proj = [&](const nn::Linear& lin, const Tensor& x, int rows) {
    std::vector<double> out(static_cast<std::size_t>(rows) * D, 0.0);
    for (int t = 0; t < rows; ++t) {
      for (int o = 0; o < D; ++o) {
        double s = lin.bias.data()[o];
        for (int i = 0; i < D; ++i) s += x.data()[t * D + i] * lin.weight.data()[o * D + i];
        out[static_cast<std::size_t>(t) * D + o] = s;
      }
    }
    return out;
  };
  const auto q = proj(mha.wq, q_in, T);
  const auto k = proj(mha.wk, kv_in, S);
  const auto v = proj(mha.wv, kv_in, S);
  std::vector<double> merged(static_cast<std::size_t>(T) * D, 0.0);
  for (int h = 0; h < H; ++h) {
    for (int t = 0; t < T; ++t) {
      std::vector<double> score(static_cast<std::size_t>(S));
      double mx = -1e300;
      for (int s = 0; s < S; ++s) {
        double dot = 0.0;
        for (int c = 0; c < dh; ++c)
          dot += q[static_cast<std::size_t>(t) * D + h * dh + c] *
                 k[static_cast<std::size_t>(s) * D + h * dh + c];
        score[static_cast<std::size_t>(s)] = dot / std::sqrt(static_cast<double>(dh)) +
                                             (mask ? (*mask)[static_cast<std::size_t>(t) * S + s]
                                                   : 0.0);
        mx = std::max(mx, score[static_cast<std::size_t>(s)]);
      }
      double z = 0.0;
      for (double& sc : score) {
        sc = std::exp(sc - mx);
        z += sc;
      }
      for (int c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (int s = 0; s < S; ++s)
          acc += score[static_cast<std::size_t>(s)] / z *
                 v[static_cast<std::size_t>(s) * D + h * dh + c];
        merged[static_cast<std::size_t>(t) * D + h * dh + c] = acc;
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(T) * D, 0.0);
  for (int t = 0; t < T; ++t) {
    for (int o = 0; o < D; ++o) {
      double s = mha.wo.bias.data()[o];
      for (int i = 0; i < D; ++i)
        s += merged[static_cast<std::size_t>(t) * D + i] * mha.wo.weight.data()[o * D + i];
      out[static_cast<std::size_t>(t) * D + o] = s;
    }
  }
  return out;
}

}  // namespace

TEST_CASE("multi-head attention matches a straight-line reference") {
  nasp::core::Rng rng(14);
  nn::MultiheadAttention mha(8, 2, rng);
  Tensor q = randt(rng, {5, 8});
  Tensor kv = randt(rng, {7, 8});
  SUBCASE("cross attention, no mask") {
    Tensor y = mha.forward(q, kv, Tensor());
    const auto ref = naive_attention(mha, q, kv, nullptr);
    REQUIRE(y.shape() == ad::Shape{5, 8});
    for (std::int64_t i = 0; i < y.numel(); ++i)
      CHECK(y.data()[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }
  SUBCASE("self attention with causal mask") {
    Tensor m = nn::causal_mask(5);
    Tensor y = mha.forward(q, q, m);
    std::vector<double> mv(m.data(), m.data() + m.numel());
    const auto ref = naive_attention(mha, q, q, &mv);
    for (std::int64_t i = 0; i < y.numel(); ++i)
      CHECK(y.data()[i] == doctest::Approx(ref[static_cast<std::size_t>(i)]).epsilon(1e-10));
  }
}

TEST_CASE("causal mask blocks information flow from the future") {
  nasp::core::Rng rng(15);
  nn::MultiheadAttention mha(8, 4, rng);
  Tensor x = randt(rng, {6, 8});
  Tensor m = nn::causal_mask(6);
  Tensor y1 = mha.forward(x, x, m);
  // Perturb the last position; outputs at earlier positions must not move.
  Tensor x2 = Tensor::from_data(x.shape(), std::vector<double>(x.data(), x.data() + x.numel()));
  for (int c = 0; c < 8; ++c) x2.data()[5 * 8 + c] += 3.0;
  Tensor y2 = mha.forward(x2, x2, m);
  for (int t = 0; t < 5; ++t) {
    for (int c = 0; c < 8; ++c) {
      CHECK(y1.data()[t * 8 + c] == doctest::Approx(y2.data()[t * 8 + c]).epsilon(1e-12));
    }
  }
}

TEST_CASE("multi-head attention gradcheck") {
  nasp::core::Rng rng(16);
  nn::MultiheadAttention mha(4, 2, rng);
  Tensor q = randt(rng, {3, 4}, true);
  Tensor kv = randt(rng, {4, 4}, true);
  const double err = testutil::max_grad_error(
      {q, kv, mha.wq.weight, mha.wk.weight, mha.wv.weight, mha.wo.weight, mha.wo.bias},
      [&] { return ad::sum(ad::square(mha.forward(q, kv, Tensor()))); });
  CHECK(err < 5e-6);
}

TEST_CASE("mlp gradcheck") {
  nasp::core::Rng rng(17);
  nn::MLP mlp(4, 8, rng);
  Tensor x = randt(rng, {3, 4}, true);
  const double err = testutil::max_grad_error(
      {x, mlp.fc1.weight, mlp.fc1.bias, mlp.fc2.weight},
      [&] { return ad::sum(ad::square(mlp.forward(x))); });
  CHECK(err < 5e-6);
}

TEST_CASE("parameter collection round-trips through a state dict") {
  nasp::core::Rng rng(18);
  nn::MultiheadAttention mha(8, 2, rng);
  nn::ParamList ps;
  mha.collect(ps, "attn");
  CHECK(ps.size() == 8);  // 4 linears x (weight, bias)
  auto state = nasp::dataio::dump_params(ps);
  // Perturb live weights, then restore from the dump.
  randomize(mha.wq.weight, rng);
  nasp::dataio::load_params(ps, state);
  Tensor x = randt(rng, {3, 8});
  Tensor y = mha.forward(x, x, Tensor());
  nasp::dataio::load_params(ps, state);
  Tensor y2 = mha.forward(x, x, Tensor());
  for (std::int64_t i = 0; i < y.numel(); ++i) CHECK(y.data()[i] == y2.data()[i]);
  // Strictness: dropping a blob or bending a shape is rejected.
  auto broken = state;
  broken.erase(broken.begin()->first);
  CHECK_THROWS(nasp::dataio::load_params(ps, broken));
  auto bent = state;
  bent.begin()->second.shape[0] += 1;
  CHECK_THROWS(nasp::dataio::load_params(ps, bent));
}

TEST_CASE("embedding_rows gathers with gradient scatter-add") {
  nasp::core::Rng rng(19);
  Tensor table = randt(rng, {5, 3}, true);
  const std::vector<int> rows = {4, 0, 4};
  Tensor e = ad::embedding_rows(table, rows);
  REQUIRE(e.shape() == ad::Shape{3, 3});
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) CHECK(e.data()[r * 3 + c] == table.data()[rows[r] * 3 + c]);
  }
  const double err = testutil::max_grad_error(
      {table}, [&] { return ad::sum(ad::square(ad::embedding_rows(table, rows))); });
  CHECK(err < 1e-6);
  CHECK_THROWS(ad::embedding_rows(table, {5}));
  CHECK_THROWS(ad::embedding_rows(table, {}));
}

TEST_CASE("adamw single step matches the closed form") {
  Tensor p = Tensor::from_data({2}, {1.0, -2.0}, true);
  opt::AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.beta1 = 0.9;
  cfg.beta2 = 0.999;
  cfg.eps = 1e-8;
  cfg.weight_decay = 0.0;
  opt::AdamW opt({p}, cfg);
  p.node()->ensure_grad();
  p.node()->grad = {0.5, -1.5};
  opt.step();
  // First step: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps).
  const double g0 = 0.5, g1 = -1.5;
  CHECK(p.data()[0] ==
        doctest::Approx(1.0 - 0.1 * g0 / (std::sqrt(g0 * g0) + 1e-8)).epsilon(1e-12));
  CHECK(p.data()[1] ==
        doctest::Approx(-2.0 - 0.1 * g1 / (std::sqrt(g1 * g1) + 1e-8)).epsilon(1e-12));
}

TEST_CASE("adamw two steps match a scalar reference recursion") {
  Tensor p = Tensor::from_data({1}, {0.7}, true);
  opt::AdamWConfig cfg;
  cfg.lr = 0.05;
  cfg.beta1 = 0.8;
  cfg.beta2 = 0.9;
  cfg.eps = 1e-8;
  opt::AdamW opt({p}, cfg);
  const double grads[2] = {0.3, -0.4};
  double m = 0.0, v = 0.0, x = 0.7;
  for (int t = 1; t <= 2; ++t) {
    const double g = grads[t - 1];
    p.zero_grad();
    p.node()->ensure_grad();
    p.node()->grad = {g};
    opt.step();
    m = 0.8 * m + 0.2 * g;
    v = 0.9 * v + 0.1 * g * g;
    const double mh = m / (1.0 - std::pow(0.8, t));
    const double vh = v / (1.0 - std::pow(0.9, t));
    x -= 0.05 * mh / (std::sqrt(vh) + 1e-8);
    CHECK(p.data()[0] == doctest::Approx(x).epsilon(1e-12));
  }
}

TEST_CASE("adamw weight decay is decoupled from the gradient") {
  Tensor p = Tensor::from_data({1}, {2.0}, true);
  opt::AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.5;
  opt::AdamW opt({p}, cfg);
  p.node()->ensure_grad();
  p.node()->grad = {0.0};
  opt.step();
  // Zero gradient -> pure decay: p <- p - lr * wd * p.
  CHECK(p.data()[0] == doctest::Approx(2.0 * (1.0 - 0.1 * 0.5)).epsilon(1e-12));
}

TEST_CASE("adamw skips parameters that have no gradient") {
  Tensor p = Tensor::from_data({1}, {3.0}, true);
  opt::AdamWConfig cfg;
  cfg.weight_decay = 1.0;
  opt::AdamW opt({p}, cfg);
  opt.step();
  CHECK(p.data()[0] == 3.0);
}

TEST_CASE("global norm clipping scales gradients to the threshold") {
  Tensor a = Tensor::from_data({2}, {0.0, 0.0}, true);
  Tensor b = Tensor::from_data({1}, {0.0}, true);
  a.node()->ensure_grad();
  b.node()->ensure_grad();
  a.node()->grad = {3.0, 0.0};
  b.node()->grad = {4.0};
  const double pre = opt::clip_global_norm({a, b}, 2.0);
  CHECK(pre == doctest::Approx(5.0).epsilon(1e-12));
  CHECK(opt::global_grad_norm({a, b}) == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(a.node()->grad[0] == doctest::Approx(3.0 * 2.0 / 5.0).epsilon(1e-12));
  // Below the threshold nothing changes.
  const double pre2 = opt::clip_global_norm({a, b}, 10.0);
  CHECK(pre2 == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(a.node()->grad[0] == doctest::Approx(3.0 * 2.0 / 5.0).epsilon(1e-12));
}

TEST_CASE("warmup cosine schedule shape") {
  const double base = 1e-3, floor = 1e-6;
  CHECK(opt::warmup_cosine_lr(0, 100, base, 10, floor) == doctest::Approx(base / 10.0));
  CHECK(opt::warmup_cosine_lr(9, 100, base, 10, floor) == doctest::Approx(base));
  CHECK(opt::warmup_cosine_lr(10, 100, base, 10, floor) == doctest::Approx(base));
  // Midpoint of the decay span: cos factor 0.5.
  CHECK(opt::warmup_cosine_lr(55, 100, base, 10, floor) ==
        doctest::Approx(floor + (base - floor) * 0.5).epsilon(1e-9));
  CHECK(opt::warmup_cosine_lr(100, 100, base, 10, floor) == doctest::Approx(floor));
  CHECK(opt::warmup_cosine_lr(250, 100, base, 10, floor) == doctest::Approx(floor));
  // Monotone nonincreasing after warmup.
  double prev = 1e9;
  for (int s = 10; s <= 100; ++s) {
    const double lr = opt::warmup_cosine_lr(s, 100, base, 10, floor);
    CHECK(lr <= prev + 1e-15);
    prev = lr;
  }
}

TEST_CASE("warmup linear schedule shape") {
  const double base = 2e-4, floor = 1e-6;
  CHECK(opt::warmup_linear_lr(0, 50, base, 5, floor) == doctest::Approx(base / 5.0));
  CHECK(opt::warmup_linear_lr(4, 50, base, 5, floor) == doctest::Approx(base));
  // Exactly halfway through the decay span.
  const double mid = opt::warmup_linear_lr(5 + 45 / 2 + 1, 50, base, 5, floor);
  CHECK(mid < base);
  CHECK(mid > floor);
  CHECK(opt::warmup_linear_lr(50, 50, base, 5, floor) == doctest::Approx(floor));
  CHECK(opt::warmup_linear_lr(0, 50, base, 0, floor) == doctest::Approx(base));
}

TEST_CASE("adamw reduces a quadratic loss") {
  nasp::core::Rng rng(20);
  Tensor w = randt(rng, {4}, true);
  opt::AdamWConfig cfg;
  cfg.lr = 0.05;
  opt::AdamW opt({w}, cfg);
  auto loss_val = [&] {
    Tensor loss = ad::sum(ad::square(w));
    return loss;
  };
  const double init = loss_val().item();
  for (int i = 0; i < 50; ++i) {
    opt.zero_grad();
    Tensor loss = ad::sum(ad::square(w));
    loss.backward();
    opt.step();
  }
  CHECK(loss_val().item() < 0.1 * init);
}
