#include "nasp/aqvae/tokenizer.hpp"

#include <cmath>
#include <stdexcept>

#include "nasp/metrics/metrics.hpp"

namespace nasp::aqvae {

int level_index(int accel) {
  for (int i = 0; i < kNumLevels; ++i) {
    if (kLevels[static_cast<std::size_t>(i)] == accel) return i;
  }
  throw std::invalid_argument("level_index: unknown acceleration " + std::to_string(accel));
}

void TokenizerConfig::validate() const {
  if (in_channels != 2) throw std::invalid_argument("config: in_channels must be 2 (re, im)");
  if (token_sides.size() != kNumLevels)
    throw std::invalid_argument("config: token schedule must list six sides");
  for (std::size_t i = 1; i < token_sides.size(); ++i) {
    if (token_sides[i] != token_sides[i - 1] + 1)
      throw std::invalid_argument("config: token sides must increase by exactly 1");
  }
  if (token_sides.front() <= 0) throw std::invalid_argument("config: token sides must be positive");
  if (n_stages() < 3) throw std::invalid_argument("config: need at least 3 stages");
  if (res_blocks_per_stage <= 0) throw std::invalid_argument("config: res blocks must be >= 1");
  int side = image_side;
  for (int s = 1; s < n_stages(); ++s) {
    if (side % 2 != 0) throw std::invalid_argument("config: image side not divisible by strides");
    side /= 2;
  }
  if (side != base_side())
    throw std::invalid_argument("config: stages do not downsample image_side to the base side");
  for (int s = 0; s < n_stages(); ++s) {
    if (stage_width(s) <= 0 || stage_width(s) % groups != 0)
      throw std::invalid_argument("config: stage widths must be positive multiples of groups");
  }
  if (latent_dim <= 0 || codebook_size <= 0)
    throw std::invalid_argument("config: latent_dim and codebook_size must be positive");
  if (n_labels < 4 * kNumLevels)
    throw std::invalid_argument("config: label table smaller than pattern x level grid");
  if (rho < 0.0) throw std::invalid_argument("config: rho must be >= 0");
  if (!(ema_decay >= 0.0 && ema_decay < 1.0))
    throw std::invalid_argument("config: ema_decay must be in [0,1)");
  if (ema_epsilon <= 0.0) throw std::invalid_argument("config: ema_epsilon must be positive");
}

nlohmann::json TokenizerConfig::to_json() const {
  return nlohmann::json{{"image_side", image_side},
                        {"in_channels", in_channels},
                        {"base_width", base_width},
                        {"channel_mults", channel_mults},
                        {"res_blocks_per_stage", res_blocks_per_stage},
                        {"groups", groups},
                        {"latent_dim", latent_dim},
                        {"codebook_size", codebook_size},
                        {"token_sides", token_sides},
                        {"n_labels", n_labels},
                        {"rho", rho},
                        {"ema_decay", ema_decay},
                        {"ema_epsilon", ema_epsilon},
                        {"codebook_init_scale", codebook_init_scale},
                        {"seed", seed}};
}

TokenizerConfig TokenizerConfig::from_json(const nlohmann::json& j) {
  TokenizerConfig c;
  const nlohmann::json defaults = c.to_json();
  for (const auto& [key, value] : j.items()) {
    if (!defaults.contains(key))
      throw std::invalid_argument("tokenizer config: unknown key '" + key + "'");
    (void)value;
  }
  c.image_side = j.value("image_side", c.image_side);
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_width = j.value("base_width", c.base_width);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.res_blocks_per_stage = j.value("res_blocks_per_stage", c.res_blocks_per_stage);
  c.groups = j.value("groups", c.groups);
  c.latent_dim = j.value("latent_dim", c.latent_dim);
  c.codebook_size = j.value("codebook_size", c.codebook_size);
  c.token_sides = j.value("token_sides", c.token_sides);
  c.n_labels = j.value("n_labels", c.n_labels);
  c.rho = j.value("rho", c.rho);
  c.ema_decay = j.value("ema_decay", c.ema_decay);
  c.ema_epsilon = j.value("ema_epsilon", c.ema_epsilon);
  c.codebook_init_scale = j.value("codebook_init_scale", c.codebook_init_scale);
  c.seed = j.value("seed", c.seed);
  c.validate();
  return c;
}

ad::Tensor image_to_tensor(const fourier::ComplexImage& img) {
  const int h = img.height, w = img.width;
  std::vector<double> v(2 * static_cast<std::size_t>(h) * w);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    v[i] = img.data[i].real();
    v[static_cast<std::size_t>(h) * w + i] = img.data[i].imag();
  }
  return ad::Tensor::from_data({2, h, w}, std::move(v));
}

fourier::ComplexImage tensor_to_image(const ad::Tensor& t) {
  if (t.ndim() != 3 || t.dim(0) != 2) throw std::invalid_argument("tensor_to_image: want [2,H,W]");
  fourier::ComplexImage img(t.dim(1), t.dim(2));
  const std::size_t n = img.data.size();
  for (std::size_t i = 0; i < n; ++i) img.data[i] = {t.data()[i], t.data()[n + i]};
  return img;
}

Encoder::Encoder(const TokenizerConfig& cfg, core::Rng& rng) {
  cfg.validate();
  const int S = cfg.n_stages();
  stem = nn::Conv2d(cfg.in_channels, cfg.stage_width(0), 3, 1, 1, rng);
  stages.resize(static_cast<std::size_t>(S));
  for (int s = 0; s < S; ++s) {
    for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
      stages[static_cast<std::size_t>(s)].emplace_back(cfg.stage_width(s), cfg.n_labels,
                                                       cfg.groups, rng);
    }
    if (s + 1 < S) downs.emplace_back(cfg.stage_width(s), cfg.stage_width(s + 1), 3, 2, 1, rng);
  }
  final_norm = nn::GroupNorm(cfg.stage_width(S - 1), cfg.groups);
  proj = nn::Conv2d(cfg.stage_width(S - 1), cfg.latent_dim, 1, 1, 0, rng);
}

Encoder::Out Encoder::forward(const ad::Tensor& image, int label_id) const {
  if (image.ndim() != 3 || image.dim(0) != 2)
    throw std::invalid_argument("encoder: expected [2,H,W] input");
  const std::int64_t hw = static_cast<std::int64_t>(image.dim(1)) * image.dim(2);
  for (std::int64_t i = 0; i < hw; ++i) {
    const double re = image.data()[i], im = image.data()[hw + i];
    if (std::sqrt(re * re + im * im) > 1.0 + 1e-3)
      throw std::invalid_argument("encoder: input image is not normalized");
  }
  Encoder::Out out;
  ad::Tensor h = stem.forward(image);
  const int S = static_cast<int>(stages.size());
  for (int s = 0; s < S; ++s) {
    for (const auto& block : stages[static_cast<std::size_t>(s)]) {
      h = block.forward(h, label_id);
    }
    if (s >= S - 3) out.features.push_back(h);
    if (s + 1 < S) h = downs[static_cast<std::size_t>(s)].forward(h);
  }
  out.latent = proj.forward(ad::silu(final_norm.forward(h)));
  return out;
}

void Encoder::collect(nn::ParamList& out, const std::string& prefix) const {
  stem.collect(out, prefix + ".stem");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].collect(out, prefix + ".stage" + std::to_string(s) + ".block" +
                                    std::to_string(b));
    }
  }
  for (std::size_t s = 0; s < downs.size(); ++s) {
    downs[s].collect(out, prefix + ".down" + std::to_string(s));
  }
  final_norm.collect(out, prefix + ".norm");
  proj.collect(out, prefix + ".proj");
}

Decoder::Decoder(const TokenizerConfig& cfg, core::Rng& rng) {
  cfg.validate();
  const int S = cfg.n_stages();
  stem = nn::Conv2d(cfg.latent_dim, cfg.stage_width(S - 1), 3, 1, 1, rng);
  stages.resize(static_cast<std::size_t>(S));
  for (int i = 0; i < S; ++i) {
    const int width = cfg.stage_width(S - 1 - i);
    for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
      stages[static_cast<std::size_t>(i)].emplace_back(width, 1, cfg.groups, rng);
    }
    if (i + 1 < S) ups.emplace_back(width, cfg.stage_width(S - 2 - i), 3, 1, 1, rng);
  }
  final_norm = nn::GroupNorm(cfg.stage_width(0), cfg.groups);
  out_conv = nn::Conv2d(cfg.stage_width(0), 3, 3, 1, 1, rng);
}

ad::Tensor Decoder::forward_raw(const ad::Tensor& fused) const {
  ad::Tensor h = stem.forward(fused);
  const int S = static_cast<int>(stages.size());
  for (int i = 0; i < S; ++i) {
    for (const auto& block : stages[static_cast<std::size_t>(i)]) h = block.forward(h, 0);
    if (i + 1 < S) h = ups[static_cast<std::size_t>(i)].forward(ad::upsample_nearest2x(h));
  }
  return out_conv.forward(ad::silu(final_norm.forward(h)));
}

ad::Tensor Decoder::forward(const ad::Tensor& fused) const {
  ad::Tensor raw = forward_raw(fused);
  const int h = raw.dim(1), w = raw.dim(2);
  ad::Tensor re = ad::reshape(ad::narrow_dim0(raw, 0, 1), {h, w});
  ad::Tensor im = ad::reshape(ad::narrow_dim0(raw, 1, 1), {h, w});
  ad::Tensor mag = ad::sqrt(ad::add(ad::square(re), ad::square(im)), 1e-24);
  ad::Tensor factor = ad::div(ad::Tensor::scalar(1.5), ad::clamp_min(mag, 1.5));
  ad::Tensor cre = ad::mul(re, factor);
  ad::Tensor cim = ad::mul(im, factor);
  // Renormalize by the max magnitude. Picking the argmax pixel keeps the
  // scale differentiable (locally the max is just that pixel's magnitude).
  ad::Tensor cmag = ad::mul(mag, factor);
  int argmax = 0;
  for (std::int64_t i = 1; i < cmag.numel(); ++i) {
    if (cmag.data()[i] > cmag.data()[argmax]) argmax = static_cast<int>(i);
  }
  ad::Tensor peak = ad::clamp_min(
      ad::pick_rows(ad::reshape(cmag, {1, h * w}), {argmax}), 1e-12);
  ad::Tensor out = ad::concat_rows({ad::reshape(cre, {1, h, w}), ad::reshape(cim, {1, h, w})});
  return ad::div(out, ad::reshape(peak, {1, 1, 1}));
}

void Decoder::collect(nn::ParamList& out, const std::string& prefix) const {
  stem.collect(out, prefix + ".stem");
  for (std::size_t s = 0; s < stages.size(); ++s) {
    for (std::size_t b = 0; b < stages[s].size(); ++b) {
      stages[s][b].collect(out, prefix + ".stage" + std::to_string(s) + ".block" +
                                    std::to_string(b));
    }
  }
  for (std::size_t s = 0; s < ups.size(); ++s) {
    ups[s].collect(out, prefix + ".up" + std::to_string(s));
  }
  final_norm.collect(out, prefix + ".norm");
  out_conv.collect(out, prefix + ".out");
}

Tokenizer::Tokenizer(const TokenizerConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  core::Rng rng(cfg_.seed);
  core::Rng enc_rng = rng.child(1);
  core::Rng dec_rng = rng.child(2);
  core::Rng ref_rng = rng.child(3);
  core::Rng cb_rng = rng.child(4);
  encoder = Encoder(cfg_, enc_rng);
  decoder = Decoder(cfg_, dec_rng);
  for (int k = 0; k < kNumLevels; ++k) {
    refine_convs.emplace_back(cfg_.latent_dim, cfg_.latent_dim, 3, 1, 1, ref_rng,
                              /*zero_init=*/true);
  }
  codebook = make_codebook(cfg_.codebook_size, cfg_.latent_dim, cb_rng, cfg_.codebook_init_scale);
  codebook.decay = cfg_.ema_decay;
  codebook.epsilon = cfg_.ema_epsilon;
}

Tokenizer::LevelForward Tokenizer::forward_level(const ad::Tensor& image,
                                                 const AcquisitionLabel& label, bool train) const {
  LevelForward lf;
  lf.enc = encoder.forward(image, label.id());
  const int side = cfg_.token_sides[static_cast<std::size_t>(level_index(label.accel))];
  lf.quant = quantize(codebook, lf.enc.latent, side, label.accel, train);
  return lf;
}

ad::Tensor Tokenizer::refine(const ad::Tensor& quantized, int accel) const {
  const int k = level_index(accel);
  const int b = cfg_.base_side();
  ad::Tensor up = quantized.dim(1) == b ? quantized : ad::bilinear_resize(quantized, b, b);
  if (cfg_.rho == 0.0) return up;
  return ad::add(up, ad::smul(refine_convs[static_cast<std::size_t>(k)].forward(up), cfg_.rho));
}

ad::Tensor Tokenizer::fuse(const std::vector<ad::Tensor>& refined) const {
  if (refined.empty()) throw std::invalid_argument("fuse: no active levels");
  const int b = cfg_.base_side();
  ad::Tensor acc;
  for (const auto& r : refined) {
    if (r.ndim() != 3 || r.dim(1) != b || r.dim(2) != b)
      throw std::invalid_argument("fuse: latent not at base side");
    acc = acc.defined() ? ad::add(acc, r) : r;
  }
  return ad::smul(acc, 1.0 / static_cast<double>(refined.size()));
}

ad::Tensor Tokenizer::decode_token_maps(const std::vector<TokenMap>& maps) const {
  ad::NoGradGuard ng;
  if (maps.empty()) throw std::invalid_argument("decode_token_maps: no token maps");
  std::vector<ad::Tensor> refined;
  for (const TokenMap& m : maps) {
    const int want = cfg_.token_sides[static_cast<std::size_t>(level_index(m.accel))];
    if (m.side != want || static_cast<int>(m.indices.size()) != m.side * m.side)
      throw std::invalid_argument("decode_token_maps: token map side mismatch");
    const int d = cfg_.latent_dim;
    const std::int64_t N = static_cast<std::int64_t>(m.side) * m.side;
    std::vector<double> q(static_cast<std::size_t>(d) * N);
    for (std::int64_t p = 0; p < N; ++p) {
      const int idx = m.indices[static_cast<std::size_t>(p)];
      if (idx < 0 || idx >= codebook.size)
        throw std::invalid_argument("decode_token_maps: token index out of range");
      for (int k = 0; k < d; ++k) {
        q[static_cast<std::size_t>(k) * N + p] =
            codebook.vectors[static_cast<std::size_t>(idx) * d + k];
      }
    }
    refined.push_back(refine(ad::Tensor::from_data({d, m.side, m.side}, std::move(q)), m.accel));
  }
  return decode(fuse(refined));
}

std::vector<TokenMap> Tokenizer::tokenize(const dataio::PyramidSample& sample) const {
  ad::NoGradGuard ng;
  std::vector<TokenMap> maps;
  for (const auto& ld : sample.levels) {
    AcquisitionLabel label{sample.pattern, ld.accel};
    maps.push_back(forward_level(image_to_tensor(ld.zero_fill), label, false).quant.tokens);
  }
  return maps;
}

fourier::ComplexImage Tokenizer::reconstruct(const dataio::PyramidSample& sample) const {
  ad::NoGradGuard ng;
  std::vector<ad::Tensor> refined;
  for (const auto& ld : sample.levels) {
    AcquisitionLabel label{sample.pattern, ld.accel};
    LevelForward lf = forward_level(image_to_tensor(ld.zero_fill), label, false);
    refined.push_back(refine(lf.quant.quantized, ld.accel));
  }
  return tensor_to_image(decode(fuse(refined)));
}

nn::ParamList Tokenizer::generator_params() {
  nn::ParamList out;
  encoder.collect(out, "enc");
  decoder.collect(out, "dec");
  for (std::size_t k = 0; k < refine_convs.size(); ++k) {
    refine_convs[k].collect(out, "refine" + std::to_string(k));
  }
  return out;
}

dataio::StateDict Tokenizer::state() {
  dataio::StateDict sd = dataio::dump_params(generator_params());
  sd.emplace("codebook.vectors",
             dataio::ParamBlob{{codebook.size, codebook.dim}, codebook.vectors});
  sd.emplace("codebook.ema_counts", dataio::ParamBlob{{codebook.size}, codebook.ema_counts});
  sd.emplace("codebook.ema_sums",
             dataio::ParamBlob{{codebook.size, codebook.dim}, codebook.ema_sums});
  return sd;
}

void Tokenizer::load_state(const dataio::StateDict& sd) {
  dataio::StateDict rest = sd;
  const auto take = [&rest](const std::string& name, const ad::Shape& shape) {
    auto it = rest.find(name);
    if (it == rest.end()) throw std::runtime_error("tokenizer load: missing blob '" + name + "'");
    if (it->second.shape != shape)
      throw std::runtime_error("tokenizer load: shape mismatch for '" + name + "'");
    std::vector<double> data = std::move(it->second.data);
    rest.erase(it);
    return data;
  };
  codebook.vectors = take("codebook.vectors", {codebook.size, codebook.dim});
  codebook.ema_counts = take("codebook.ema_counts", {codebook.size});
  codebook.ema_sums = take("codebook.ema_sums", {codebook.size, codebook.dim});
  dataio::load_params(generator_params(), rest);
}

Discriminator::Discriminator(const metrics::FeatureExtractor& phi, int image_side,
                             std::uint64_t seed) {
  core::Rng rng(seed);
  ad::NoGradGuard ng;
  ad::Tensor probe = ad::Tensor::zeros({phi.in_channels(), image_side, image_side});
  const auto feats = phi.features(probe);
  for (const auto& f : feats) {
    conv1.emplace_back(f.dim(0), 8, 3, 1, 1, rng);
    conv2.emplace_back(8, 1, 1, 1, 0, rng);
  }
}

std::vector<ad::Tensor> Discriminator::forward(const metrics::FeatureExtractor& phi,
                                               const ad::Tensor& magnitude) const {
  const auto feats = phi.features(magnitude);
  if (feats.size() != conv1.size())
    throw std::invalid_argument("discriminator: extractor depth mismatch");
  std::vector<ad::Tensor> scores;
  for (std::size_t i = 0; i < feats.size(); ++i) {
    scores.push_back(conv2[i].forward(ad::silu(conv1[i].forward(feats[i]))));
  }
  return scores;
}

nn::ParamList Discriminator::params() {
  nn::ParamList out;
  for (std::size_t i = 0; i < conv1.size(); ++i) {
    conv1[i].collect(out, "head" + std::to_string(i) + ".c1");
    conv2[i].collect(out, "head" + std::to_string(i) + ".c2");
  }
  return out;
}

namespace {

ad::Tensor mse_to(const ad::Tensor& x, double target) {
  return ad::mean(ad::square(ad::sadd(x, -target)));
}

}  // namespace

ad::Tensor lsgan_d_loss(const std::vector<ad::Tensor>& real_scores,
                        const std::vector<ad::Tensor>& fake_scores) {
  if (real_scores.empty() || real_scores.size() != fake_scores.size())
    throw std::invalid_argument("lsgan_d_loss: head count mismatch");
  ad::Tensor acc;
  for (std::size_t i = 0; i < real_scores.size(); ++i) {
    ad::Tensor term = ad::add(mse_to(real_scores[i], 1.0), mse_to(fake_scores[i], 0.0));
    acc = acc.defined() ? ad::add(acc, term) : term;
  }
  return ad::smul(acc, 0.5);
}

ad::Tensor lsgan_g_loss(const std::vector<ad::Tensor>& fake_scores) {
  if (fake_scores.empty()) throw std::invalid_argument("lsgan_g_loss: no heads");
  ad::Tensor acc;
  for (const auto& s : fake_scores) {
    ad::Tensor term = mse_to(s, 1.0);
    acc = acc.defined() ? ad::add(acc, term) : term;
  }
  return acc;
}

ad::Tensor commitment_loss(const std::vector<QuantizeOut>& quants) {
  if (quants.empty()) throw std::invalid_argument("commitment_loss: no levels");
  ad::Tensor acc;
  for (const auto& q : quants) {
    if (q.z_down.shape() != q.quantized.shape())
      throw std::invalid_argument("commitment_loss: level shape mismatch");
    ad::Tensor term = ad::mean(ad::square(ad::sub(q.z_down, q.quantized.detach())));
    acc = acc.defined() ? ad::add(acc, term) : term;
  }
  return ad::smul(acc, 1.0 / static_cast<double>(quants.size()));
}

SliceLoss tokenizer_loss(const Tokenizer& tok, const Discriminator& disc,
                         const metrics::FeatureExtractor& phi,
                         const dataio::PyramidSample& sample, const LossWeights& w) {
  SliceLoss out;
  std::vector<ad::Tensor> refined;
  for (const auto& ld : sample.levels) {
    AcquisitionLabel label{sample.pattern, ld.accel};
    Tokenizer::LevelForward lf =
        tok.forward_level(image_to_tensor(ld.zero_fill), label, /*train=*/true);
    refined.push_back(tok.refine(lf.quant.quantized, ld.accel));
    out.quants.push_back(std::move(lf.quant));
  }
  out.recon = tok.decode(tok.fuse(refined));

  const int hh = out.recon.dim(1), ww = out.recon.dim(2);
  ad::Tensor target = image_to_tensor(sample.target);
  ad::Tensor target_mag = nasp::metrics::magnitude_t(target);
  ad::Tensor recon_mag = nasp::metrics::magnitude_t(out.recon);

  ad::Tensor l_ssim = ad::sadd(ad::neg(nasp::metrics::ssim_t(recon_mag, target_mag)), 1.0);
  ad::Tensor l_perc = nasp::metrics::perceptual_distance_t(
      ad::reshape(recon_mag, {1, hh, ww}), ad::reshape(target_mag, {1, hh, ww}), phi);
  ad::Tensor l_adv = lsgan_g_loss(disc.forward(phi, ad::reshape(recon_mag, {1, hh, ww})));
  ad::Tensor l_com = commitment_loss(out.quants);

  out.detail.weights = w;
  out.detail.l_ssim = l_ssim.item();
  out.detail.l_adv = l_adv.item();
  out.detail.l_perc = l_perc.item();
  out.detail.l_commit = l_com.item();
  out.total = ad::add(ad::add(ad::smul(l_ssim, w.w_ssim), ad::smul(l_adv, w.w_adv)),
                      ad::add(ad::smul(l_perc, w.w_perc), ad::smul(l_com, w.w_commit)));
  out.detail.total = out.total.item();
  const double comps[5] = {out.detail.total, out.detail.l_ssim, out.detail.l_adv,
                           out.detail.l_perc, out.detail.l_commit};
  for (double c : comps) {
    if (!std::isfinite(c)) throw std::runtime_error("tokenizer_loss: non-finite component");
  }
  return out;
}

}  // namespace nasp::aqvae
