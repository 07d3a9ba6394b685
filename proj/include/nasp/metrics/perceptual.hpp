#pragma once

#include <cstdint>
#include <vector>

#include "nasp/core/ops.hpp"

namespace nasp::metrics {

// Fixed random-weight convolutional feature extractor: the pluggable
// stand-in for pretrained perceptual backbones ("proxy-perceptual"). Weights
// are frozen at construction; features are exposed after every stage. Built
// on autodiff tensors so training losses can differentiate through it.
class FeatureExtractor {
 public:
  FeatureExtractor(int in_channels, std::uint32_t seed, int n_stages = 4);

  // x: [C,H,W]; returns one feature map per stage.
  std::vector<nasp::ad::Tensor> features(const nasp::ad::Tensor& x) const;
  int n_stages() const { return static_cast<int>(stages_.size()); }
  int in_channels() const { return in_channels_; }

 private:
  struct Stage {
    nasp::ad::Tensor w, b;
    int stride;
  };
  int in_channels_;
  std::vector<Stage> stages_;
};

// Mean over depths of the squared distance between unit-normalized feature
// vectors. Zero iff features agree; symmetric.
nasp::ad::Tensor perceptual_distance_t(const nasp::ad::Tensor& x, const nasp::ad::Tensor& ref,
                                       const FeatureExtractor& ext);
double perceptual_distance(const std::vector<double>& x_mag, const std::vector<double>& ref_mag,
                           int height, int width, const FeatureExtractor& ext);

}  // namespace nasp::metrics
