#include "nasp/core/optim.hpp"

#include <cmath>
#include <numbers>
#include <stdexcept>

namespace nasp::opt {

AdamW::AdamW(std::vector<ad::Tensor> params, AdamWConfig cfg)
    : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0) || !(cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0)) {
    throw std::invalid_argument("AdamW: betas must lie in [0,1)");
  }
  if (cfg_.eps <= 0.0) throw std::invalid_argument("AdamW: eps must be positive");
  m_.resize(params_.size());
  v_.resize(params_.size());
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<std::size_t>(params_[i].numel());
    m_[i].assign(n, 0.0);
    v_[i].assign(n, 0.0);
  }
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    ad::Tensor& p = params_[i];
    const std::vector<double>& g = p.node()->grad;
    if (g.empty()) continue;
    double* pd = p.data();
    const auto n = static_cast<std::size_t>(p.numel());
    for (std::size_t k = 0; k < n; ++k) {
      m_[i][k] = cfg_.beta1 * m_[i][k] + (1.0 - cfg_.beta1) * g[k];
      v_[i][k] = cfg_.beta2 * v_[i][k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double m_hat = m_[i][k] / bc1;
      const double v_hat = v_[i][k] / bc2;
      pd[k] -= cfg_.lr * (m_hat / (std::sqrt(v_hat) + cfg_.eps) + cfg_.weight_decay * pd[k]);
    }
  }
}

void AdamW::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

double global_grad_norm(const std::vector<ad::Tensor>& params) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.node()->grad) sq += g * g;
  }
  return std::sqrt(sq);
}

double clip_global_norm(const std::vector<ad::Tensor>& params, double max_norm) {
  if (max_norm <= 0.0) throw std::invalid_argument("clip_global_norm: max_norm must be positive");
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      for (double& g : p.node()->grad) g *= scale;
    }
  }
  return norm;
}

namespace {

double warmup_or_progress(std::int64_t step, std::int64_t total_steps, double base_lr,
                          std::int64_t warmup_steps, double* progress) {
  if (total_steps <= 0) throw std::invalid_argument("schedule: total_steps must be positive");
  if (step < 0 || warmup_steps < 0) throw std::invalid_argument("schedule: negative step");
  if (step < warmup_steps) {
    *progress = -1.0;
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const std::int64_t span = total_steps - warmup_steps;
  *progress = span <= 0 ? 1.0
                        : std::min(1.0, static_cast<double>(step - warmup_steps) /
                                            static_cast<double>(span));
  return base_lr;
}

}  // namespace

double warmup_cosine_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                        std::int64_t warmup_steps, double floor_lr) {
  double progress = 0.0;
  const double lr = warmup_or_progress(step, total_steps, base_lr, warmup_steps, &progress);
  if (progress < 0.0) return lr;
  const double cos_factor = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
  return floor_lr + (base_lr - floor_lr) * cos_factor;
}

double warmup_linear_lr(std::int64_t step, std::int64_t total_steps, double base_lr,
                        std::int64_t warmup_steps, double floor_lr) {
  double progress = 0.0;
  const double lr = warmup_or_progress(step, total_steps, base_lr, warmup_steps, &progress);
  if (progress < 0.0) return lr;
  return floor_lr + (base_lr - floor_lr) * (1.0 - progress);
}

}  // namespace nasp::opt
