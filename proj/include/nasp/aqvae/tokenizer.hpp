#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasp/aqvae/codebook.hpp"
#include "nasp/core/nn.hpp"
#include "nasp/dataio/checkpoint.hpp"
#include "nasp/dataio/dataset.hpp"
#include "nasp/fourier/fourier.hpp"
#include "nasp/metrics/perceptual.hpp"

namespace nasp::aqvae {

// Acceleration levels in pyramid order; index 5 (R=1) is fully sampled.
inline constexpr std::array<int, 6> kLevels = {32, 16, 8, 4, 2, 1};
inline constexpr int kNumLevels = 6;

int level_index(int accel);  // 32->0 ... 1->5; throws on unknown accel

// Conditioning identity of one measurement: which mask family and which
// acceleration level produced the input.
struct AcquisitionLabel {
  fourier::Pattern pattern = fourier::Pattern::cartesian_x;
  int accel = 1;
  int id() const { return static_cast<int>(pattern) * kNumLevels + level_index(accel); }
};

struct TokenizerConfig {
  int image_side = 64;
  int in_channels = 2;  // real, imaginary
  int base_width = 32;
  std::vector<int> channel_mults = {1, 1, 2, 2};
  int res_blocks_per_stage = 1;
  int groups = 8;
  int latent_dim = 16;
  int codebook_size = 512;
  std::vector<int> token_sides = {3, 4, 5, 6, 7, 8};
  int n_labels = 24;  // 4 patterns x 6 levels
  double rho = 0.5;   // post-quantization residual strength
  double ema_decay = 0.99;
  double ema_epsilon = 1e-5;
  double codebook_init_scale = 0.5;
  std::uint64_t seed = 1;

  int n_stages() const { return static_cast<int>(channel_mults.size()); }
  int base_side() const { return token_sides.back(); }
  int stage_width(int s) const { return base_width * channel_mults[static_cast<std::size_t>(s)]; }
  void validate() const;  // throws on inconsistent geometry

  nlohmann::json to_json() const;
  static TokenizerConfig from_json(const nlohmann::json& j);
};

// Tensor <-> complex image bridges ([2,H,W] real/imag channels).
ad::Tensor image_to_tensor(const fourier::ComplexImage& img);
fourier::ComplexImage tensor_to_image(const ad::Tensor& two_channel);

// Label-conditioned convolutional encoder. Downsamples by 2 between stages;
// the outputs of the last three stages (sides 4b, 2b, b for base side b) are
// exposed for later cross-attention.
class Encoder {
 public:
  Encoder() = default;
  Encoder(const TokenizerConfig& cfg, core::Rng& rng);

  struct Out {
    ad::Tensor latent;                 // [d, b, b]
    std::vector<ad::Tensor> features;  // 3 maps, coarsest (side b) last
  };
  // image: [2,H,W] with max complex magnitude <= 1 + 1e-3 (rejects
  // un-normalized inputs).
  Out forward(const ad::Tensor& image, int label_id) const;
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Conv2d stem;
  std::vector<std::vector<nn::FiLMResBlock>> stages;
  std::vector<nn::Conv2d> downs;
  nn::GroupNorm final_norm;
  nn::Conv2d proj;
};

// Mirror decoder, unconditioned. Produces 3 channels; channels 0,1 are
// (re, im) and channel 2 is discarded. The complex output is clamped to
// magnitude <= 1.5 per pixel and then rescaled by its (detached) max
// magnitude so downstream consumers see a normalized image.
class Decoder {
 public:
  Decoder() = default;
  Decoder(const TokenizerConfig& cfg, core::Rng& rng);

  ad::Tensor forward_raw(const ad::Tensor& fused) const;  // [3,H,W]
  ad::Tensor forward(const ad::Tensor& fused) const;      // [2,H,W], normalized
  void collect(nn::ParamList& out, const std::string& prefix) const;

  nn::Conv2d stem;
  std::vector<std::vector<nn::FiLMResBlock>> stages;
  std::vector<nn::Conv2d> ups;
  nn::GroupNorm final_norm;
  nn::Conv2d out_conv;
};

// The full additive multi-input quantized autoencoder.
class Tokenizer {
 public:
  Tokenizer() = default;
  explicit Tokenizer(const TokenizerConfig& cfg);

  const TokenizerConfig& config() const { return cfg_; }

  struct LevelForward {
    Encoder::Out enc;
    QuantizeOut quant;
  };
  // Encode one level's zero-filled input and quantize at that level's grid.
  LevelForward forward_level(const ad::Tensor& image, const AcquisitionLabel& label,
                             bool train) const;

  // Q~ = up(Q) + rho * phi_k(up(Q)); identity at init (phi zero-initialized).
  ad::Tensor refine(const ad::Tensor& quantized, int accel) const;
  // Elementwise mean over >= 1 refined latents at base side.
  ad::Tensor fuse(const std::vector<ad::Tensor>& refined) const;
  ad::Tensor decode(const ad::Tensor& fused) const { return decoder.forward(fused); }

  // Token maps -> refined/fused latents -> image, no encoder involved.
  ad::Tensor decode_token_maps(const std::vector<TokenMap>& maps) const;
  // Eval-mode tokenization of a pyramid sample (all six levels).
  std::vector<TokenMap> tokenize(const dataio::PyramidSample& sample) const;
  // Eval-mode reconstruction fusing all levels of a pyramid sample.
  fourier::ComplexImage reconstruct(const dataio::PyramidSample& sample) const;

  nn::ParamList generator_params();  // everything trained by gradient
  dataio::StateDict state();         // parameters + codebook tables
  void load_state(const dataio::StateDict& sd);

  Encoder encoder;
  Decoder decoder;
  std::vector<nn::Conv2d> refine_convs;  // one per level
  Codebook codebook;

 private:
  TokenizerConfig cfg_;
};

// One lightweight LSGAN head per extractor depth: conv -> silu -> 1x1 conv
// producing a patch map of real/fake scores.
class Discriminator {
 public:
  Discriminator() = default;
  Discriminator(const metrics::FeatureExtractor& phi, int image_side, std::uint64_t seed);

  // Per-head score maps for a magnitude image [1,H,W].
  std::vector<ad::Tensor> forward(const metrics::FeatureExtractor& phi,
                                  const ad::Tensor& magnitude) const;
  nn::ParamList params();

  std::vector<nn::Conv2d> conv1, conv2;
};

// Least-squares GAN objectives, summed over heads: the discriminator drives
// real scores to 1 and (detached) fake scores to 0; the generator drives
// fake scores to 1.
ad::Tensor lsgan_d_loss(const std::vector<ad::Tensor>& real_scores,
                        const std::vector<ad::Tensor>& fake_scores);
ad::Tensor lsgan_g_loss(const std::vector<ad::Tensor>& fake_scores);

// Mean over levels of MSE(Z_k, stopgrad(Q_k)); gradient reaches only Z.
ad::Tensor commitment_loss(const std::vector<QuantizeOut>& quants);

struct LossWeights {
  double w_ssim = 1.0;
  double w_adv = 0.1;
  double w_perc = 0.1;
  double w_commit = 0.25;  // the commitment beta, applied exactly once
};

struct LossBreakdown {
  double total = 0.0;
  double l_ssim = 0.0;    // 1 - SSIM(|xhat|, |x|)
  double l_adv = 0.0;
  double l_perc = 0.0;
  double l_commit = 0.0;  // unweighted commitment component
  LossWeights weights;
};

struct SliceLoss {
  ad::Tensor total;                 // graph output for backward
  ad::Tensor recon;                 // [2,H,W]
  std::vector<QuantizeOut> quants;  // per level, for EMA assignments
  LossBreakdown detail;
};

// Full training objective on one pyramid sample: encodes all six levels,
// fuses, decodes, and combines w_ssim*(1-SSIM) + w_adv*L_adv + w_perc*L_perc
// + w_commit*L_com. Throws if any component is non-finite.
SliceLoss tokenizer_loss(const Tokenizer& tok, const Discriminator& disc,
                         const metrics::FeatureExtractor& phi,
                         const dataio::PyramidSample& sample, const LossWeights& w);

}  // namespace nasp::aqvae
