#include "nasp/opd/distill.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "nasp/aqvae/tokenizer.hpp"
#include "nasp/core/optim.hpp"
#include "nasp/dataio/checkpoint.hpp"
#include "nasp/nextscale/train.hpp"

namespace nasp::opd {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("opd: " + msg); }

constexpr double kProbFloor = 1e-12;

void check_finite(const ad::Tensor& t, const char* what) {
  for (std::int64_t i = 0; i < t.numel(); ++i) {
    if (!std::isfinite(t.data()[i])) fail(std::string(what) + ": non-finite logits");
  }
}

}  // namespace

nextscale::DecodeStrategy rollout_strategy(std::uint64_t seed, double temperature) {
  nextscale::DecodeStrategy s;
  s.kind = nextscale::DecodeKind::multinomial;
  s.temperature = temperature;
  s.seed = seed;
  return s;
}

RolloutTrajectory rollout(const nextscale::ARModel& student, const nextscale::ARModel& teacher,
                          const aqvae::Tokenizer& tok, const fourier::KSpaceMeasurement& y32,
                          const fourier::ComplexImage& x_fs,
                          const fourier::CoilSensitivities& sens,
                          const nextscale::DecodeStrategy& strategy) {
  if (student.config().privileged) fail("rollout: the student must not be privileged");
  if (!teacher.config().privileged) fail("rollout: the teacher must be privileged");
  if (y32.mask.accel != 32) fail("rollout: expected a 32x measurement");
  const fourier::Pattern pattern = y32.mask.pattern;
  const auto& sides = tok.config().token_sides;

  RolloutTrajectory traj;
  traj.seed = strategy.seed;

  ad::Tensor img32, img_fs;
  {
    ad::NoGradGuard guard;
    img32 = aqvae::image_to_tensor(fourier::zero_filled(y32, sens));
    img_fs = aqvae::image_to_tensor(x_fs);

    // Scale-by-scale generation, each sampled map fed back as context.
    core::Rng rng(strategy.seed);
    traj.maps.push_back(
        tok.forward_level(img32, aqvae::AcquisitionLabel{pattern, 32}, /*train=*/false)
            .quant.tokens);
    const std::vector<ad::Tensor> feats =
        student.context_features(img32, aqvae::AcquisitionLabel{pattern, 32}.id());
    for (int scale = 1; scale < 6; ++scale) {
      ad::Tensor logits = student.scale_logits(traj.maps, scale, tok.codebook, feats);
      aqvae::TokenMap m;
      m.accel = aqvae::kLevels[static_cast<std::size_t>(scale)];
      m.side = sides[static_cast<std::size_t>(scale)];
      m.indices = nextscale::decode_tokens(logits, strategy, rng);
      traj.maps.push_back(std::move(m));
    }
  }

  // Gradient-carrying student pass over the visited history.
  const int label32 = aqvae::AcquisitionLabel{pattern, 32}.id();
  std::vector<ad::Tensor> s_feats = student.context_features(img32, label32);
  ad::Tensor s_all = student.forward_all(traj.maps, tok.codebook, s_feats);

  // Frozen teacher pass on the identical history.
  ad::Tensor t_all;
  {
    ad::NoGradGuard guard;
    std::vector<ad::Tensor> t_ctx = teacher.context_features(img32, label32);
    std::vector<ad::Tensor> t_fs =
        teacher.context_features(img_fs, aqvae::AcquisitionLabel{pattern, 1}.id());
    t_all = teacher.forward_all(traj.maps, tok.codebook, t_ctx, &t_fs);
  }

  int offset = 0;
  for (int scale = 1; scale < 6; ++scale) {
    const int len = sides[static_cast<std::size_t>(scale)] * sides[static_cast<std::size_t>(scale)];
    traj.student_logits.push_back(ad::narrow_dim0(s_all, offset, len));
    traj.teacher_logits.push_back(ad::narrow_dim0(t_all, offset, len));
    offset += len;
  }
  return traj;
}

ad::Tensor reverse_kl_rows(const ad::Tensor& student_logits, const ad::Tensor& teacher_logits) {
  if (student_logits.ndim() != 2 || teacher_logits.ndim() != 2 ||
      student_logits.shape() != teacher_logits.shape())
    fail("reverse_kl: logit blocks must share an [N,V] shape");
  check_finite(student_logits, "reverse_kl student");
  check_finite(teacher_logits, "reverse_kl teacher");
  const int v = student_logits.dim(1);

  // Teacher term as a constant: gradients belong to the student alone.
  ad::Tensor log_q;
  {
    ad::NoGradGuard guard;
    ad::Tensor q = ad::softmax_lastdim(
        ad::Tensor::from_data(teacher_logits.shape(),
                              std::vector<double>(teacher_logits.data(),
                                                  teacher_logits.data() + teacher_logits.numel())));
    log_q = ad::log(ad::clamp_min(q, kProbFloor));
  }
  ad::Tensor p = ad::softmax_lastdim(student_logits);
  ad::Tensor log_p = ad::log_softmax_lastdim(student_logits);
  return ad::smul(ad::mean(ad::mul(p, ad::sub(log_p, log_q))), static_cast<double>(v));
}

ad::Tensor reverse_kl(const std::vector<ad::Tensor>& student_logits,
                      const std::vector<ad::Tensor>& teacher_logits) {
  if (student_logits.empty() || student_logits.size() != teacher_logits.size())
    fail("reverse_kl: need matching non-empty logit lists");
  ad::Tensor total;
  for (std::size_t k = 0; k < student_logits.size(); ++k) {
    ad::Tensor term = reverse_kl_rows(student_logits[k], teacher_logits[k]);
    total = k == 0 ? term : ad::add(total, term);
  }
  return ad::smul(total, 1.0 / static_cast<double>(student_logits.size()));
}

nlohmann::json DistillConfig::to_json() const {
  return nlohmann::json{{"steps", steps},
                        {"lr", lr},
                        {"warmup_steps", warmup_steps},
                        {"floor_lr", floor_lr},
                        {"clip", clip},
                        {"n_rollouts", n_rollouts},
                        {"ce_mix", ce_mix},
                        {"temperature", temperature},
                        {"sampling", sampling},
                        {"eval_every", eval_every},
                        {"eval_split", eval_split},
                        {"seed", seed}};
}

DistillConfig DistillConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> keys = {
      "steps",       "lr",       "warmup_steps", "floor_lr",   "clip",       "n_rollouts",
      "ce_mix",      "temperature", "sampling",  "eval_every", "eval_split", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      fail("distill config: unknown key '" + it.key() + "'");
  }
  DistillConfig c;
  c.steps = j.at("steps").get<int>();
  c.lr = j.at("lr").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.floor_lr = j.at("floor_lr").get<double>();
  c.clip = j.at("clip").get<double>();
  c.n_rollouts = j.at("n_rollouts").get<int>();
  c.ce_mix = j.at("ce_mix").get<double>();
  c.temperature = j.at("temperature").get<double>();
  c.sampling = j.at("sampling").get<std::string>();
  c.eval_every = j.at("eval_every").get<int>();
  c.eval_split = j.at("eval_split").get<std::string>();
  c.seed = j.at("seed").get<std::uint64_t>();
  if (c.steps < 1 || c.n_rollouts < 1 || c.eval_every < 1)
    fail("distill config: steps, n_rollouts and eval_every must be positive");
  if (c.lr <= 0.0 || c.temperature <= 0.0) fail("distill config: lr and temperature must be positive");
  if (c.ce_mix < 0.0) fail("distill config: ce_mix must be non-negative");
  nextscale::decode_kind_from_string(c.sampling);
  return c;
}

DistillResult distill(nextscale::ARModel& student, const nextscale::ARModel& teacher,
                      const aqvae::Tokenizer& tok, const dataio::Dataset& data,
                      const DistillConfig& cfg) {
  if (cfg.steps < 1 || cfg.n_rollouts < 1 || cfg.eval_every < 1)
    fail("distill: steps, n_rollouts and eval_every must be positive");
  if (student.config().privileged) fail("distill: the student must not be privileged");
  if (!teacher.config().privileged) fail("distill: the teacher must be privileged");
  const std::vector<int> train_idx = data.indices("train");
  if (train_idx.empty()) fail("distill: empty train split");

  const std::string teacher_hash = dataio::state_hash_hex(teacher.state());
  auto check_teacher = [&]() {
    if (dataio::state_hash_hex(teacher.state()) != teacher_hash)
      fail("distill: teacher parameters drifted");
  };

  nn::ParamList named = student.params();
  std::vector<ad::Tensor> params;
  for (auto& [name, t] : named) params.push_back(t);
  opt::AdamWConfig oc;
  oc.lr = cfg.lr;
  opt::AdamW optimizer(params, oc);

  core::Rng root(cfg.seed);
  core::Rng seed_rng = root.child(1);

  std::vector<int> order;
  std::uint64_t pass = 0;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      order = data.epoch_order("train", cfg.seed * 7919 + pass);
      ++pass;
      cursor = 0;
    }
    return order[cursor++];
  };

  nextscale::DecodeStrategy strategy = rollout_strategy(0, cfg.temperature);
  strategy.kind = nextscale::decode_kind_from_string(cfg.sampling);

  DistillResult res;
  res.teacher_hash = teacher_hash;
  const double inv_n = 1.0 / cfg.n_rollouts;
  for (int step = 0; step < cfg.steps; ++step) {
    optimizer.zero_grad();
    DistillStep rec;
    rec.step = step;
    for (int r = 0; r < cfg.n_rollouts; ++r) {
      const dataio::PyramidSample sample = data.load(next_index());
      strategy.seed = seed_rng.uniform_int(std::uint64_t(1) << 62);
      RolloutTrajectory traj = rollout(student, teacher, tok, sample.levels.front().y,
                                       sample.levels.back().zero_fill, data.sens(), strategy);

      std::vector<ad::Tensor> scale_terms;
      for (std::size_t k = 0; k < traj.student_logits.size(); ++k)
        scale_terms.push_back(reverse_kl_rows(traj.student_logits[k], traj.teacher_logits[k]));
      ad::Tensor loss;
      for (std::size_t k = 0; k < scale_terms.size(); ++k) {
        rec.scale_rkl[k] += scale_terms[k].item() * inv_n;
        loss = k == 0 ? scale_terms[k] : ad::add(loss, scale_terms[k]);
      }
      loss = ad::smul(loss, 1.0 / static_cast<double>(scale_terms.size()));
      if (!std::isfinite(loss.item())) fail("distill: non-finite reverse KL");
      rec.rkl += loss.item() * inv_n;

      if (cfg.ce_mix > 0.0) {
        std::vector<aqvae::TokenMap> clean;
        std::vector<int> targets;
        {
          ad::NoGradGuard guard;
          clean = tok.tokenize(sample);
          targets = nextscale::build_sequence(clean).targets;
        }
        const int label32 =
            aqvae::AcquisitionLabel{sample.pattern, sample.levels.front().accel}.id();
        ad::Tensor img32 = aqvae::image_to_tensor(sample.levels.front().zero_fill);
        std::vector<ad::Tensor> feats = student.context_features(img32, label32);
        ad::Tensor ce =
            nextscale::cross_entropy(student.forward_all(clean, tok.codebook, feats), targets);
        loss = ad::add(loss, ad::smul(ce, cfg.ce_mix));
      }
      ad::smul(loss, inv_n).backward();
    }
    const double lr =
        opt::warmup_cosine_lr(step, cfg.steps, cfg.lr, cfg.warmup_steps, cfg.floor_lr);
    optimizer.set_lr(lr);
    opt::clip_global_norm(params, cfg.clip);
    optimizer.step();
    rec.lr = lr;
    res.steps.push_back(rec);

    if ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps) {
      const double held = eval_rollout_rkl(student, teacher, tok, data, cfg.eval_split,
                                           cfg.seed ^ 0x9e3779b9, cfg.temperature);
      res.held_out.emplace_back(step, held);
      if (res.best_step < 0 || held < res.best_held_out) {
        res.best_held_out = held;
        res.best_step = step;
        res.best_state = student.state();
      }
      check_teacher();
    }
  }
  check_teacher();
  student.load_state(res.best_state);
  return res;
}

double eval_rollout_rkl(const nextscale::ARModel& student, const nextscale::ARModel& teacher,
                        const aqvae::Tokenizer& tok, const dataio::Dataset& data,
                        const std::string& split, std::uint64_t seed, double temperature) {
  ad::NoGradGuard guard;
  const std::vector<int> idx = data.indices(split);
  if (idx.empty()) fail("eval_rollout_rkl: empty split '" + split + "'");
  double total = 0.0;
  for (int i : idx) {
    const dataio::PyramidSample sample = data.load(i);
    nextscale::DecodeStrategy strategy =
        rollout_strategy(seed + static_cast<std::uint64_t>(i) * 101, temperature);
    RolloutTrajectory traj = rollout(student, teacher, tok, sample.levels.front().y,
                                     sample.levels.back().zero_fill, data.sens(), strategy);
    total += reverse_kl(traj.student_logits, traj.teacher_logits).item();
  }
  return total / static_cast<double>(idx.size());
}

}  // namespace nasp::opd
