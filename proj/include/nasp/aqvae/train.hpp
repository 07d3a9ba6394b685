#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "nasp/aqvae/tokenizer.hpp"
#include "nasp/dataio/dataset.hpp"

namespace nasp::aqvae {

struct TrainTokenizerConfig {
  int epochs = 12;
  int grad_accum = 4;  // slices averaged per optimizer step
  double lr = 2e-3;
  double disc_lr = 5e-4;
  int warmup_steps = 10;
  double floor_lr = 1e-6;
  double weight_decay = 1e-4;
  double clip_gen = 5.0;
  double clip_disc = 1.0;
  std::uint64_t seed = 7;
  LossWeights weights;

  nlohmann::json to_json() const;
  static TrainTokenizerConfig from_json(const nlohmann::json& j);
};

struct TokenizerEpochLog {
  double train_loss = 0.0;  // mean total over slices
  double l_ssim = 0.0, l_adv = 0.0, l_perc = 0.0, l_commit = 0.0;
  double val_ssim = 0.0;
  double perplexity = 0.0;  // codebook usage over the epoch
};

struct TokenizerTrainResult {
  std::vector<TokenizerEpochLog> epochs;
  double best_val_ssim = 0.0;
  int best_epoch = -1;  // 0-based; the model is left holding this state
};

// Alternating generator/discriminator training with EMA codebook updates,
// deterministic under the config seed. The tokenizer ends loaded with the
// best-validation-SSIM snapshot.
TokenizerTrainResult train_tokenizer(Tokenizer& tok, Discriminator& disc,
                                     const metrics::FeatureExtractor& phi,
                                     const dataio::Dataset& data,
                                     const TrainTokenizerConfig& cfg);

// Mean eval-mode reconstruction SSIM over one split ("val", "train", ...).
double mean_split_ssim(const Tokenizer& tok, const dataio::Dataset& data,
                       const std::string& split);

}  // namespace nasp::aqvae
