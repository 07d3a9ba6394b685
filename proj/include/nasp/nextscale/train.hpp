#pragma once

#include <cstdint>
#include <vector>

#include "json.hpp"
#include "nasp/dataio/dataset.hpp"
#include "nasp/nextscale/ar_model.hpp"
#include "nasp/nextscale/decode.hpp"

namespace nasp::nextscale {

// Independently replaces each token of the five context maps with a uniform
// random codebook index with probability p_replace (a replacement may draw
// the original index again). The finest map, and with it every prediction
// target, passes through untouched.
std::vector<aqvae::TokenMap> randomize_prefix(const std::vector<aqvae::TokenMap>& maps,
                                              double p_replace, int vocab, core::Rng& rng);

struct TrainARConfig {
  int steps = 500;
  int grad_accum = 1;  // slices averaged per optimizer step
  double lr = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.95;
  int warmup_steps = 20;
  double floor_lr = 1e-6;
  double clip = 1.0;
  double p_replace = 0.15;  // teacher context corruption
  std::uint64_t seed = 9;

  nlohmann::json to_json() const;
  static TrainARConfig from_json(const nlohmann::json& j);
};

struct TrainARResult {
  std::vector<double> student_ce;  // per optimizer step, mean over the group
  std::vector<double> teacher_ce;  // empty when no teacher is trained
  double final_student_ce = 0.0;
  double final_teacher_ce = 0.0;
};

// Teacher-forced training against frozen tokenizer pyramids. The student
// conditions on 32x features only; the optional teacher also cross-attends
// to fully sampled features and sees randomize_prefix-corrupted context.
// Deterministic under the config seed. Throws on non-finite loss.
TrainARResult train_ar(ARModel& student, ARModel* teacher, const aqvae::Tokenizer& tok,
                       const dataio::Dataset& data, const TrainARConfig& cfg);

// Mean teacher-forced cross-entropy over one split. use_fs routes the fully
// sampled image through the privileged branch (required for such models).
double eval_ce(const ARModel& model, const aqvae::Tokenizer& tok, const dataio::Dataset& data,
               const std::string& split, bool use_fs);

struct ARReconstruction {
  fourier::ComplexImage image;
  std::vector<aqvae::TokenMap> maps;  // six maps, coarse to fine
};

// Full inference from a 32x measurement alone: zero-fill, tokenize the
// coarsest scale, autoregressively decode the remaining five scales (each in
// one parallel step), then refine/fuse/decode all six latents.
ARReconstruction ar_reconstruct(const fourier::KSpaceMeasurement& y32,
                                const fourier::CoilSensitivities& sens,
                                const aqvae::Tokenizer& tok, const ARModel& model,
                                const DecodeStrategy& strategy);

}  // namespace nasp::nextscale
