#include "nasp/metrics/perceptual.hpp"

#include <cmath>
#include <stdexcept>

#include "nasp/core/rng.hpp"

namespace nasp::metrics {

using namespace nasp::ad;
using nasp::core::Rng;

FeatureExtractor::FeatureExtractor(int in_channels, std::uint32_t seed, int n_stages)
    : in_channels_(in_channels) {
  if (in_channels < 1 || n_stages < 1)
    throw std::invalid_argument("FeatureExtractor: bad channel/stage count");
  Rng root(seed);
  int cin = in_channels;
  int cout = 12;
  for (int s = 0; s < n_stages; ++s) {
    Rng rng = root.child(static_cast<std::uint64_t>(s));
    const double std_w = 1.0 / std::sqrt(static_cast<double>(cin) * 9);
    std::vector<double> w(static_cast<std::size_t>(cout) * cin * 9);
    for (auto& v : w) v = rng.normal() * std_w;
    Stage st;
    st.w = Tensor::from_data({cout, cin, 3, 3}, std::move(w));
    st.b = Tensor::zeros({cout});
    st.stride = s == 0 ? 1 : 2;
    stages_.push_back(std::move(st));
    cin = cout;
    cout *= 2;
  }
}

std::vector<Tensor> FeatureExtractor::features(const Tensor& x) const {
  if (x.ndim() != 3 || x.dim(0) != in_channels_)
    throw std::invalid_argument("FeatureExtractor: expected [" + std::to_string(in_channels_) +
                                ",H,W] input");
  std::vector<Tensor> out;
  Tensor h = x;
  for (const Stage& st : stages_) {
    h = silu(conv2d(h, st.w, st.b, st.stride, 1));
    out.push_back(h);
  }
  return out;
}

Tensor perceptual_distance_t(const Tensor& x, const Tensor& ref, const FeatureExtractor& ext) {
  const std::vector<Tensor> fx = ext.features(x);
  const std::vector<Tensor> fr = ext.features(ref);
  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t k = 0; k < fx.size(); ++k) {
    Tensor a = reshape(fx[k], {static_cast<int>(fx[k].numel())});
    Tensor b = reshape(fr[k], {static_cast<int>(fr[k].numel())});
    Tensor ua = div(a, sqrt(sum(square(a)), 1e-24));
    Tensor ub = div(b, sqrt(sum(square(b)), 1e-24));
    acc = add(acc, sum(square(sub(ua, ub))));
  }
  return smul(acc, 1.0 / static_cast<double>(fx.size()));
}

double perceptual_distance(const std::vector<double>& x_mag, const std::vector<double>& ref_mag,
                           int height, int width, const FeatureExtractor& ext) {
  if (x_mag.size() != ref_mag.size() ||
      static_cast<std::int64_t>(x_mag.size()) != static_cast<std::int64_t>(height) * width)
    throw std::invalid_argument("perceptual_distance: shape mismatch");
  NoGradGuard ng;
  Tensor x = Tensor::from_data({1, height, width}, x_mag);
  Tensor r = Tensor::from_data({1, height, width}, ref_mag);
  return perceptual_distance_t(x, r, ext).item();
}

}  // namespace nasp::metrics
