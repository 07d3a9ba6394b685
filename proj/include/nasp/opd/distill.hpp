#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "nasp/dataio/dataset.hpp"
#include "nasp/nextscale/ar_model.hpp"
#include "nasp/nextscale/decode.hpp"

namespace nasp::opd {

// One student-generated trajectory with aligned per-scale logit blocks. The
// student entries carry gradients; the teacher entries are detached values.
struct RolloutTrajectory {
  std::vector<aqvae::TokenMap> maps;       // coarsest from the tokenizer + five sampled
  std::vector<ad::Tensor> student_logits;  // per scale, [side^2, vocab]
  std::vector<ad::Tensor> teacher_logits;  // same shapes, no graph
  std::uint64_t seed = 0;
};

// Default rollout sampling: plain multinomial at temperature 1.
nextscale::DecodeStrategy rollout_strategy(std::uint64_t seed, double temperature = 1.0);

// Samples the five fine scales from the student scale by scale, feeding each
// sampled map back as context, then scores the identical history with the
// student (gradients on) and the privileged teacher (gradients off, extra
// cross-attention over the fully sampled image).
RolloutTrajectory rollout(const nextscale::ARModel& student, const nextscale::ARModel& teacher,
                          const aqvae::Tokenizer& tok, const fourier::KSpaceMeasurement& y32,
                          const fourier::ComplexImage& x_fs,
                          const fourier::CoilSensitivities& sens,
                          const nextscale::DecodeStrategy& strategy);

// Mean over rows of sum_v p_s(v) (log p_s(v) - log p_t(v)) for one aligned
// block. Probabilities are floored at 1e-12 inside the teacher log, so a
// narrow teacher cannot produce log(0); the result can undershoot zero by at
// most vocab * 1e-12. Gradients flow through the student side only.
ad::Tensor reverse_kl_rows(const ad::Tensor& student_logits, const ad::Tensor& teacher_logits);

// Mean over positions within each scale, then over the scale blocks.
ad::Tensor reverse_kl(const std::vector<ad::Tensor>& student_logits,
                      const std::vector<ad::Tensor>& teacher_logits);

struct DistillConfig {
  int steps = 200;
  double lr = 1e-5;  // cosine-decayed
  int warmup_steps = 0;
  double floor_lr = 1e-7;
  double clip = 1.0;
  int n_rollouts = 1;     // rollouts averaged per step
  double ce_mix = 0.0;    // optional teacher-forced CE on the clean pyramid
  double temperature = 1.0;
  std::string sampling = "multinomial";  // rollout decoding kind
  int eval_every = 50;    // held-out rollout KL cadence (always runs at the end)
  std::string eval_split = "val";
  std::uint64_t seed = 13;

  nlohmann::json to_json() const;
  static DistillConfig from_json(const nlohmann::json& j);
};

struct DistillStep {
  int step = 0;
  double rkl = 0.0;
  double lr = 0.0;
  std::array<double, 5> scale_rkl{};  // coarse to fine
};

struct DistillResult {
  std::vector<DistillStep> steps;
  std::vector<std::pair<int, double>> held_out;  // (step, rollout reverse KL)
  double best_held_out = 0.0;
  int best_step = -1;
  dataio::StateDict best_state;  // student weights at the best evaluation
  std::string teacher_hash;      // verified unchanged over the run
};

// On-policy distillation: rollout, reverse KL, gradient step on the student
// only. The teacher state hash is re-checked at every evaluation and the run
// aborts on drift. On return the student holds the best held-out weights.
DistillResult distill(nextscale::ARModel& student, const nextscale::ARModel& teacher,
                      const aqvae::Tokenizer& tok, const dataio::Dataset& data,
                      const DistillConfig& cfg);

// Mean rollout reverse KL over one split, sampling seeded per slice index so
// before/after comparisons are paired.
double eval_rollout_rkl(const nextscale::ARModel& student, const nextscale::ARModel& teacher,
                        const aqvae::Tokenizer& tok, const dataio::Dataset& data,
                        const std::string& split, std::uint64_t seed, double temperature = 1.0);

}  // namespace nasp::opd
