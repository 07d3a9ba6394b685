#pragma once

#include <cstdint>
#include <vector>

#include "nasp/core/tensor.hpp"

namespace nasp::opt {

struct AdamWConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

// AdamW with decoupled weight decay:
//   p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
// Parameters whose gradient buffer is empty at step() time are skipped
// entirely (no moment update, no decay).
class AdamW {
 public:
  AdamW(std::vector<ad::Tensor> params, AdamWConfig cfg);

  void set_lr(double lr) { cfg_.lr = lr; }
  double lr() const { return cfg_.lr; }
  std::int64_t steps_taken() const { return t_; }

  void step();
  void zero_grad();

 private:
  std::vector<ad::Tensor> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  std::int64_t t_ = 0;
};

// L2 norm over all gradients jointly; params without gradients contribute 0.
double global_grad_norm(const std::vector<ad::Tensor>& params);

// Scales gradients so the global norm is at most max_norm; returns the
// pre-clip norm.
double clip_global_norm(const std::vector<ad::Tensor>& params, double max_norm);

// Learning-rate schedules, step-indexed from 0. Linear warmup from
// base_lr/warmup_steps up to base_lr over the first warmup_steps updates,
// then decay toward floor_lr, reaching it at total_steps.
double warmup_cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                        std::int64_t warmup_steps, double floor_lr = 1e-6);
double warmup_linear_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                        std::int64_t warmup_steps, double floor_lr = 1e-6);

}  // namespace nasp::opt
