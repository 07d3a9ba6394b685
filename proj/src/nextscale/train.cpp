#include "nasp/nextscale/train.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <stdexcept>

#include "nasp/core/optim.hpp"

namespace nasp::nextscale {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("nextscale: " + msg); }

}  // namespace

std::vector<aqvae::TokenMap> randomize_prefix(const std::vector<aqvae::TokenMap>& maps,
                                              double p_replace, int vocab, core::Rng& rng) {
  if (p_replace < 0.0 || p_replace > 1.0) fail("randomize_prefix: probability out of range");
  if (vocab < 1) fail("randomize_prefix: empty vocabulary");
  std::vector<aqvae::TokenMap> out = maps;
  const std::size_t context_scales = out.empty() ? 0 : out.size() - 1;
  for (std::size_t s = 0; s < context_scales; ++s) {
    for (int& idx : out[s].indices) {
      if (rng.uniform01() < p_replace) idx = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(vocab)));
    }
  }
  return out;
}

nlohmann::json TrainARConfig::to_json() const {
  return nlohmann::json{{"steps", steps},
                        {"grad_accum", grad_accum},
                        {"lr", lr},
                        {"weight_decay", weight_decay},
                        {"beta1", beta1},
                        {"beta2", beta2},
                        {"warmup_steps", warmup_steps},
                        {"floor_lr", floor_lr},
                        {"clip", clip},
                        {"p_replace", p_replace},
                        {"seed", seed}};
}

TrainARConfig TrainARConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> keys = {
      "steps",    "grad_accum",   "lr",   "weight_decay", "beta1", "beta2",
      "warmup_steps", "floor_lr", "clip", "p_replace",    "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      fail("train config: unknown key '" + it.key() + "'");
  }
  TrainARConfig c;
  c.steps = j.at("steps").get<int>();
  c.grad_accum = j.at("grad_accum").get<int>();
  c.lr = j.at("lr").get<double>();
  c.weight_decay = j.at("weight_decay").get<double>();
  c.beta1 = j.at("beta1").get<double>();
  c.beta2 = j.at("beta2").get<double>();
  c.warmup_steps = j.at("warmup_steps").get<int>();
  c.floor_lr = j.at("floor_lr").get<double>();
  c.clip = j.at("clip").get<double>();
  c.p_replace = j.at("p_replace").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  if (c.steps < 1 || c.grad_accum < 1) fail("train config: steps and grad_accum must be positive");
  return c;
}

namespace {

// Frozen per-slice inputs: token pyramid, targets, and the network-ready
// zero-filled images. Tokenization is deterministic, so caching is safe.
struct SliceCache {
  std::vector<aqvae::TokenMap> maps;
  std::vector<int> targets;
  ad::Tensor img32, img_fs;
  int label32 = 0, label_fs = 0;
};

SliceCache build_cache(const aqvae::Tokenizer& tok, const dataio::PyramidSample& sample) {
  ad::NoGradGuard guard;
  SliceCache c;
  c.maps = tok.tokenize(sample);
  c.targets = build_sequence(c.maps).targets;
  c.img32 = aqvae::image_to_tensor(sample.levels.front().zero_fill);
  c.img_fs = aqvae::image_to_tensor(sample.levels.back().zero_fill);
  c.label32 = aqvae::AcquisitionLabel{sample.pattern, sample.levels.front().accel}.id();
  c.label_fs = aqvae::AcquisitionLabel{sample.pattern, sample.levels.back().accel}.id();
  return c;
}

}  // namespace

TrainARResult train_ar(ARModel& student, ARModel* teacher, const aqvae::Tokenizer& tok,
                       const dataio::Dataset& data, const TrainARConfig& cfg) {
  if (student.config().privileged) fail("train_ar: the student must not be privileged");
  if (teacher != nullptr && !teacher->config().privileged)
    fail("train_ar: the teacher must have the privileged branch");

  const std::vector<int> train_idx = data.indices("train");
  if (train_idx.empty()) fail("train_ar: empty train split");

  nn::ParamList s_named = student.params();
  std::vector<ad::Tensor> s_params;
  for (auto& [name, t] : s_named) s_params.push_back(t);
  opt::AdamWConfig oc;
  oc.lr = cfg.lr;
  oc.beta1 = cfg.beta1;
  oc.beta2 = cfg.beta2;
  oc.weight_decay = cfg.weight_decay;
  opt::AdamW s_opt(s_params, oc);

  std::vector<ad::Tensor> t_params;
  std::unique_ptr<opt::AdamW> t_opt;
  if (teacher != nullptr) {
    nn::ParamList t_named = teacher->params();
    for (auto& [name, t] : t_named) t_params.push_back(t);
    t_opt = std::make_unique<opt::AdamW>(t_params, oc);
  }

  core::Rng root(cfg.seed);
  core::Rng prefix_rng = root.child(1);
  core::Rng droppath_rng = root.child(2);

  std::map<int, SliceCache> cache;
  auto cached = [&](int idx) -> const SliceCache& {
    auto it = cache.find(idx);
    if (it == cache.end()) it = cache.emplace(idx, build_cache(tok, data.load(idx))).first;
    return it->second;
  };

  TrainARResult res;
  std::vector<int> order;
  std::uint64_t pass = 0;
  std::size_t cursor = 0;
  auto next_index = [&]() {
    if (cursor >= order.size()) {
      order = data.epoch_order("train", cfg.seed * 1000 + pass);
      ++pass;
      cursor = 0;
    }
    return order[cursor++];
  };

  const double inv_n = 1.0 / cfg.grad_accum;
  for (int step = 0; step < cfg.steps; ++step) {
    s_opt.zero_grad();
    if (t_opt) t_opt->zero_grad();
    double s_ce = 0.0, t_ce = 0.0;
    for (int a = 0; a < cfg.grad_accum; ++a) {
      const SliceCache& sc = cached(next_index());

      std::vector<ad::Tensor> feats = student.context_features(sc.img32, sc.label32);
      ad::Tensor logits = student.forward_all(sc.maps, tok.codebook, feats, nullptr, &droppath_rng);
      ad::Tensor ce = cross_entropy(logits, sc.targets);
      if (!std::isfinite(ce.item())) fail("train_ar: non-finite student loss");
      s_ce += ce.item();
      ad::smul(ce, inv_n).backward();

      if (teacher != nullptr) {
        std::vector<aqvae::TokenMap> corrupted =
            randomize_prefix(sc.maps, cfg.p_replace, tok.config().codebook_size, prefix_rng);
        std::vector<ad::Tensor> t_ctx = teacher->context_features(sc.img32, sc.label32);
        std::vector<ad::Tensor> t_fs = teacher->context_features(sc.img_fs, sc.label_fs);
        ad::Tensor t_logits = teacher->forward_all(corrupted, tok.codebook, t_ctx, &t_fs, &droppath_rng);
        ad::Tensor t_loss = cross_entropy(t_logits, sc.targets);
        if (!std::isfinite(t_loss.item())) fail("train_ar: non-finite teacher loss");
        t_ce += t_loss.item();
        ad::smul(t_loss, inv_n).backward();
      }
    }
    const double lr = opt::warmup_linear_lr(step, cfg.steps, cfg.lr, cfg.warmup_steps, cfg.floor_lr);
    s_opt.set_lr(lr);
    opt::clip_global_norm(s_params, cfg.clip);
    s_opt.step();
    res.student_ce.push_back(s_ce * inv_n);
    if (t_opt) {
      t_opt->set_lr(lr);
      opt::clip_global_norm(t_params, cfg.clip);
      t_opt->step();
      res.teacher_ce.push_back(t_ce * inv_n);
    }
  }
  res.final_student_ce = res.student_ce.empty() ? 0.0 : res.student_ce.back();
  res.final_teacher_ce = res.teacher_ce.empty() ? 0.0 : res.teacher_ce.back();
  return res;
}

double eval_ce(const ARModel& model, const aqvae::Tokenizer& tok, const dataio::Dataset& data,
               const std::string& split, bool use_fs) {
  ad::NoGradGuard guard;
  const std::vector<int> idx = data.indices(split);
  if (idx.empty()) fail("eval_ce: empty split '" + split + "'");
  double total = 0.0;
  for (int i : idx) {
    const SliceCache sc = build_cache(tok, data.load(i));
    std::vector<ad::Tensor> feats = model.context_features(sc.img32, sc.label32);
    std::vector<ad::Tensor> fs;
    if (use_fs) fs = model.context_features(sc.img_fs, sc.label_fs);
    ad::Tensor logits =
        model.forward_all(sc.maps, tok.codebook, feats, use_fs ? &fs : nullptr, nullptr);
    total += cross_entropy(logits, sc.targets).item();
  }
  return total / static_cast<double>(idx.size());
}

ARReconstruction ar_reconstruct(const fourier::KSpaceMeasurement& y32,
                                const fourier::CoilSensitivities& sens,
                                const aqvae::Tokenizer& tok, const ARModel& model,
                                const DecodeStrategy& strategy) {
  if (y32.mask.accel != 32) fail("ar_reconstruct: expected a 32x measurement");
  ad::NoGradGuard guard;
  core::Rng rng(strategy.seed);

  const fourier::ComplexImage zf = fourier::zero_filled(y32, sens);
  const ad::Tensor img = aqvae::image_to_tensor(zf);
  const fourier::Pattern pattern = y32.mask.pattern;

  ARReconstruction out;
  aqvae::Tokenizer::LevelForward lf =
      tok.forward_level(img, aqvae::AcquisitionLabel{pattern, 32}, /*train=*/false);
  out.maps.push_back(lf.quant.tokens);

  const std::vector<ad::Tensor> feats =
      model.context_features(img, aqvae::AcquisitionLabel{pattern, 32}.id());
  for (int scale = 1; scale < 6; ++scale) {
    ad::Tensor logits = model.scale_logits(out.maps, scale, tok.codebook, feats);
    aqvae::TokenMap m;
    m.accel = aqvae::kLevels[static_cast<std::size_t>(scale)];
    m.side = tok.config().token_sides[static_cast<std::size_t>(scale)];
    m.indices = decode_tokens(logits, strategy, rng);
    out.maps.push_back(std::move(m));
  }
  out.image = aqvae::tensor_to_image(tok.decode_token_maps(out.maps));
  return out;
}

}  // namespace nasp::nextscale
