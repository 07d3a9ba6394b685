#include "nasp/core/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace nasp::nn {

namespace {

Tensor init_normal(ad::Shape shape, core::Rng& rng, double stddev, bool zero_init) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<std::size_t>(n), 0.0);
  if (!zero_init) {
    for (auto& v : data) v = rng.normal(0.0, stddev);
  }
  return Tensor::from_data(std::move(shape), std::move(data), true);
}

}  // namespace

Linear::Linear(int in_features, int out_features, core::Rng& rng, bool use_bias,
               double init_scale, bool zero_init) {
  if (in_features <= 0 || out_features <= 0) {
    throw std::invalid_argument("Linear: features must be positive");
  }
  const double stddev = init_scale / std::sqrt(static_cast<double>(in_features));
  weight = init_normal({out_features, in_features}, rng, stddev, zero_init);
  has_bias = use_bias;
  if (use_bias) bias = Tensor::zeros({1, out_features}, true);
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = ad::matmul(x, weight, false, true);
  if (has_bias) y = ad::add(y, bias);
  return y;
}

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  if (has_bias) out.emplace_back(prefix + ".bias", bias);
}

Conv2d::Conv2d(int cin, int cout, int kernel, int stride_, int pad_, core::Rng& rng,
               bool zero_init)
    : stride(stride_), pad(pad_) {
  if (cin <= 0 || cout <= 0 || kernel <= 0) {
    throw std::invalid_argument("Conv2d: channels and kernel must be positive");
  }
  const double fan_in = static_cast<double>(cin) * kernel * kernel;
  weight = init_normal({cout, cin, kernel, kernel}, rng, 1.0 / std::sqrt(fan_in), zero_init);
  bias = Tensor::zeros({cout}, true);
}

Tensor Conv2d::forward(const Tensor& x) const {
  return ad::conv2d(x, weight, bias, stride, pad);
}

void Conv2d::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".weight", weight);
  out.emplace_back(prefix + ".bias", bias);
}

GroupNorm::GroupNorm(int channels, int groups_, double eps_) : groups(groups_), eps(eps_) {
  if (channels <= 0 || groups <= 0 || channels % groups != 0) {
    throw std::invalid_argument("GroupNorm: channels must be a positive multiple of groups");
  }
  gamma = Tensor::full({channels, 1, 1}, 1.0, true);
  beta = Tensor::zeros({channels, 1, 1}, true);
}

Tensor GroupNorm::forward(const Tensor& x) const {
  return ad::add(ad::mul(ad::group_norm(x, groups, eps), gamma), beta);
}

void GroupNorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

LayerNorm::LayerNorm(int dim, double eps_) : eps(eps_) {
  if (dim <= 0) throw std::invalid_argument("LayerNorm: dim must be positive");
  gamma = Tensor::full({1, dim}, 1.0, true);
  beta = Tensor::zeros({1, dim}, true);
}

Tensor LayerNorm::forward(const Tensor& x) const {
  return ad::add(ad::mul(ad::layer_norm_lastdim(x, eps), gamma), beta);
}

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".gamma", gamma);
  out.emplace_back(prefix + ".beta", beta);
}

FiLMResBlock::FiLMResBlock(int channels_, int n_labels_, int groups_, core::Rng& rng)
    : channels(channels_), groups(groups_), n_labels(n_labels_) {
  if (n_labels <= 0) throw std::invalid_argument("FiLMResBlock: n_labels must be positive");
  if (channels <= 0 || channels % groups != 0) {
    throw std::invalid_argument("FiLMResBlock: channels must be a positive multiple of groups");
  }
  film1 = Tensor::zeros({n_labels, 2 * channels}, true);
  film2 = Tensor::zeros({n_labels, 2 * channels}, true);
  conv1 = Conv2d(channels, channels, 3, 1, 1, rng);
  conv2 = Conv2d(channels, channels, 3, 1, 1, rng, /*zero_init=*/true);
}

namespace {

// (1 + g) * h + d with g,d the two channel-sized halves of the label's row.
Tensor modulate(const Tensor& h, const Tensor& table, int label, int channels) {
  Tensor row = ad::embedding_row(table, label);  // [1, 2C]
  Tensor g = ad::reshape(ad::narrow_dim0(ad::reshape(row, {2, channels}), 0, 1),
                         {channels, 1, 1});
  Tensor d = ad::reshape(ad::narrow_dim0(ad::reshape(row, {2, channels}), 1, 1),
                         {channels, 1, 1});
  return ad::add(ad::mul(h, ad::sadd(g, 1.0)), d);
}

}  // namespace

Tensor FiLMResBlock::forward(const Tensor& x, int label) const {
  if (label < 0 || label >= n_labels) {
    throw std::invalid_argument("FiLMResBlock: label out of range");
  }
  Tensor h = modulate(ad::group_norm(x, groups, 1e-5), film1, label, channels);
  h = conv1.forward(ad::silu(h));
  h = modulate(ad::group_norm(h, groups, 1e-5), film2, label, channels);
  h = conv2.forward(ad::silu(h));
  return ad::add(x, h);
}

void FiLMResBlock::collect(ParamList& out, const std::string& prefix) const {
  out.emplace_back(prefix + ".film1", film1);
  out.emplace_back(prefix + ".film2", film2);
  conv1.collect(out, prefix + ".conv1");
  conv2.collect(out, prefix + ".conv2");
}

MultiheadAttention::MultiheadAttention(int dim_, int heads_, core::Rng& rng)
    : heads(heads_), dim(dim_) {
  if (dim <= 0 || heads <= 0 || dim % heads != 0) {
    throw std::invalid_argument("MultiheadAttention: dim must be a positive multiple of heads");
  }
  wq = Linear(dim, dim, rng);
  wk = Linear(dim, dim, rng);
  wv = Linear(dim, dim, rng);
  wo = Linear(dim, dim, rng);
}

Tensor MultiheadAttention::forward(const Tensor& q_in, const Tensor& kv_in,
                                   const Tensor& mask) const {
  const int dh = dim / heads;
  Tensor q = ad::split_heads(wq.forward(q_in), heads);  // [H,T,dh]
  Tensor k = ad::split_heads(wk.forward(kv_in), heads);
  Tensor v = ad::split_heads(wv.forward(kv_in), heads);
  Tensor scores = ad::smul(ad::bmm(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (mask.defined()) scores = ad::add(scores, mask);  // [H,T,S] + [T,S]
  Tensor attn = ad::softmax_lastdim(scores);
  return wo.forward(ad::merge_heads(ad::bmm(attn, v)));
}

void MultiheadAttention::collect(ParamList& out, const std::string& prefix) const {
  wq.collect(out, prefix + ".wq");
  wk.collect(out, prefix + ".wk");
  wv.collect(out, prefix + ".wv");
  wo.collect(out, prefix + ".wo");
}

MLP::MLP(int dim, int hidden, core::Rng& rng) {
  fc1 = Linear(dim, hidden, rng);
  fc2 = Linear(hidden, dim, rng);
}

Tensor MLP::forward(const Tensor& x) const { return fc2.forward(ad::gelu(fc1.forward(x))); }

void MLP::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

Tensor causal_mask(int t) {
  std::vector<double> m(static_cast<std::size_t>(t) * t, 0.0);
  for (int i = 0; i < t; ++i) {
    for (int j = i + 1; j < t; ++j) m[static_cast<std::size_t>(i) * t + j] = kMaskBlocked;
  }
  return Tensor::from_data({t, t}, std::move(m));
}

}  // namespace nasp::nn
