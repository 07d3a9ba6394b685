#include "nasp/aqvae/train.hpp"

#include <cmath>
#include <stdexcept>

#include "nasp/core/optim.hpp"
#include "nasp/metrics/metrics.hpp"

namespace nasp::aqvae {

nlohmann::json TrainTokenizerConfig::to_json() const {
  return nlohmann::json{{"epochs", epochs},
                        {"grad_accum", grad_accum},
                        {"lr", lr},
                        {"disc_lr", disc_lr},
                        {"warmup_steps", warmup_steps},
                        {"floor_lr", floor_lr},
                        {"weight_decay", weight_decay},
                        {"clip_gen", clip_gen},
                        {"clip_disc", clip_disc},
                        {"seed", seed},
                        {"w_ssim", weights.w_ssim},
                        {"w_adv", weights.w_adv},
                        {"w_perc", weights.w_perc},
                        {"w_commit", weights.w_commit}};
}

TrainTokenizerConfig TrainTokenizerConfig::from_json(const nlohmann::json& j) {
  TrainTokenizerConfig c;
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key))
      throw std::invalid_argument("tokenizer train config: unknown key '" + key + "'");
    (void)value;
  }
  c.epochs = j.value("epochs", c.epochs);
  c.grad_accum = j.value("grad_accum", c.grad_accum);
  c.lr = j.value("lr", c.lr);
  c.disc_lr = j.value("disc_lr", c.disc_lr);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.floor_lr = j.value("floor_lr", c.floor_lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_gen = j.value("clip_gen", c.clip_gen);
  c.clip_disc = j.value("clip_disc", c.clip_disc);
  c.seed = j.value("seed", c.seed);
  c.weights.w_ssim = j.value("w_ssim", c.weights.w_ssim);
  c.weights.w_adv = j.value("w_adv", c.weights.w_adv);
  c.weights.w_perc = j.value("w_perc", c.weights.w_perc);
  c.weights.w_commit = j.value("w_commit", c.weights.w_commit);
  if (c.epochs <= 0 || c.grad_accum <= 0)
    throw std::invalid_argument("tokenizer train config: epochs and grad_accum must be positive");
  return c;
}

double mean_split_ssim(const Tokenizer& tok, const dataio::Dataset& data,
                       const std::string& split) {
  const std::vector<int> idx = data.indices(split);
  if (idx.empty()) throw std::invalid_argument("mean_split_ssim: empty split '" + split + "'");
  double acc = 0.0;
  for (int i : idx) {
    const dataio::PyramidSample s = data.load(i);
    acc += metrics::ssim(tok.reconstruct(s), s.target);
  }
  return acc / static_cast<double>(idx.size());
}

TokenizerTrainResult train_tokenizer(Tokenizer& tok, Discriminator& disc,
                                     const metrics::FeatureExtractor& phi,
                                     const dataio::Dataset& data,
                                     const TrainTokenizerConfig& cfg) {
  const std::vector<int> train_idx = data.indices("train");
  if (train_idx.empty()) throw std::invalid_argument("train_tokenizer: empty train split");
  const bool has_val = !data.indices("val").empty();

  std::vector<ad::Tensor> gen_tensors, disc_tensors;
  for (auto& [name, t] : tok.generator_params()) gen_tensors.push_back(t);
  for (auto& [name, t] : disc.params()) disc_tensors.push_back(t);

  opt::AdamWConfig gcfg;
  gcfg.lr = cfg.lr;
  gcfg.weight_decay = cfg.weight_decay;
  opt::AdamW gopt(gen_tensors, gcfg);
  opt::AdamWConfig dcfg;
  dcfg.lr = cfg.disc_lr;
  dcfg.weight_decay = cfg.weight_decay;
  opt::AdamW dopt(disc_tensors, dcfg);

  const std::int64_t steps_per_epoch =
      (static_cast<std::int64_t>(train_idx.size()) + cfg.grad_accum - 1) / cfg.grad_accum;
  const std::int64_t total_steps = steps_per_epoch * cfg.epochs;

  TokenizerTrainResult result;
  dataio::StateDict best_state;
  std::int64_t gstep = 0;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const std::vector<int> order = data.epoch_order("train", cfg.seed + static_cast<std::uint64_t>(epoch));
    TokenizerEpochLog log;
    std::vector<std::int64_t> usage(static_cast<std::size_t>(tok.codebook.size), 0);
    std::size_t cursor = 0;
    while (cursor < order.size()) {
      const std::size_t group_end = std::min(cursor + static_cast<std::size_t>(cfg.grad_accum),
                                             order.size());
      const double inv_n = 1.0 / static_cast<double>(group_end - cursor);
      struct Replay {
        std::vector<double> target_mag;
        std::vector<double> fake_mag;
        int h = 0, w = 0;
      };
      std::vector<Replay> replays;

      gopt.zero_grad();
      dopt.zero_grad();
      Assignments batch_assign;
      for (std::size_t s = cursor; s < group_end; ++s) {
        const dataio::PyramidSample sample = data.load(order[s]);
        SliceLoss sl = tokenizer_loss(tok, disc, phi, sample, cfg.weights);
        ad::smul(sl.total, inv_n).backward();
        log.train_loss += sl.detail.total;
        log.l_ssim += sl.detail.l_ssim;
        log.l_adv += sl.detail.l_adv;
        log.l_perc += sl.detail.l_perc;
        log.l_commit += sl.detail.l_commit;
        for (const auto& q : sl.quants) {
          const Assignments a = assignments_of(q);
          for (int ix : a.indices) ++usage[static_cast<std::size_t>(ix)];
          batch_assign.indices.insert(batch_assign.indices.end(), a.indices.begin(),
                                      a.indices.end());
          batch_assign.vectors.insert(batch_assign.vectors.end(), a.vectors.begin(),
                                      a.vectors.end());
        }
        Replay rp;
        rp.h = sl.recon.dim(1);
        rp.w = sl.recon.dim(2);
        ad::NoGradGuard ng;
        ad::Tensor fm = metrics::magnitude_t(sl.recon.detach());
        rp.fake_mag.assign(fm.data(), fm.data() + fm.numel());
        ad::Tensor tm = metrics::magnitude_t(image_to_tensor(sample.target));
        rp.target_mag.assign(tm.data(), tm.data() + tm.numel());
        replays.push_back(std::move(rp));
      }
      gopt.set_lr(opt::warmup_cosine_lr(gstep, total_steps, cfg.lr, cfg.warmup_steps,
                                        cfg.floor_lr));
      opt::clip_global_norm(gen_tensors, cfg.clip_gen);
      gopt.step();
      ema_update(tok.codebook, batch_assign);

      // Discriminator phase on the frozen reconstruction values.
      gopt.zero_grad();
      dopt.zero_grad();
      for (const Replay& rp : replays) {
        ad::Tensor real = ad::Tensor::from_data({1, rp.h, rp.w}, rp.target_mag);
        ad::Tensor fake = ad::Tensor::from_data({1, rp.h, rp.w}, rp.fake_mag);
        ad::Tensor ld = lsgan_d_loss(disc.forward(phi, real), disc.forward(phi, fake));
        if (!std::isfinite(ld.item()))
          throw std::runtime_error("train_tokenizer: non-finite discriminator loss");
        ad::smul(ld, inv_n).backward();
      }
      dopt.set_lr(opt::warmup_cosine_lr(gstep, total_steps, cfg.disc_lr, cfg.warmup_steps,
                                        cfg.floor_lr));
      opt::clip_global_norm(disc_tensors, cfg.clip_disc);
      dopt.step();
      dopt.zero_grad();

      ++gstep;
      cursor = group_end;
    }
    const double n_train = static_cast<double>(order.size());
    log.train_loss /= n_train;
    log.l_ssim /= n_train;
    log.l_adv /= n_train;
    log.l_perc /= n_train;
    log.l_commit /= n_train;
    log.perplexity = codebook_perplexity(usage);
    log.val_ssim = mean_split_ssim(tok, data, has_val ? "val" : "train");
    if (result.best_epoch < 0 || log.val_ssim > result.best_val_ssim) {
      result.best_val_ssim = log.val_ssim;
      result.best_epoch = epoch;
      best_state = tok.state();
    }
    result.epochs.push_back(log);
  }
  tok.load_state(best_state);
  return result;
}

}  // namespace nasp::aqvae
