#include "nasp/nextscale/ar_model.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace nasp::nextscale {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("nextscale: " + msg); }

ad::Tensor init_table(ad::Shape shape, core::Rng& rng, double stddev) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  std::vector<double> data(static_cast<std::size_t>(n));
  for (auto& v : data) v = rng.normal(0.0, stddev);
  return ad::Tensor::from_data(std::move(shape), std::move(data), true);
}

struct BlockDesc {
  int len = 0;
  int level = 0;  // scale index of the block
  bool is_context = false;
};

// A context block reveals its own scale; a query block may only use strictly
// earlier scales. Query tokens are never attended to.
ad::Tensor build_mask(const std::vector<BlockDesc>& blocks) {
  int total = 0;
  for (const auto& b : blocks) total += b.len;
  std::vector<double> m(static_cast<std::size_t>(total) * total, nn::kMaskBlocked);
  int roff = 0;
  for (const auto& rb : blocks) {
    const int visible = rb.is_context ? rb.level : rb.level - 1;
    int coff = 0;
    for (const auto& cb : blocks) {
      if (cb.is_context && cb.level <= visible) {
        for (int i = 0; i < rb.len; ++i) {
          double* row = m.data() + static_cast<std::size_t>(roff + i) * total + coff;
          std::fill(row, row + cb.len, 0.0);
        }
      }
      coff += cb.len;
    }
    roff += rb.len;
  }
  return ad::Tensor::from_data({total, total}, std::move(m));
}

}  // namespace

ScaleSequence build_sequence(const std::vector<aqvae::TokenMap>& maps) {
  if (maps.size() != 6) fail("build_sequence: expected six token maps");
  ScaleSequence seq;
  for (std::size_t k = 0; k < maps.size(); ++k) {
    const aqvae::TokenMap& m = maps[k];
    if (m.side <= 0) fail("build_sequence: non-positive side");
    if (k > 0 && m.side != maps[k - 1].side + 1)
      fail("build_sequence: sides must ascend by exactly 1");
    if (m.indices.size() != static_cast<std::size_t>(m.side) * static_cast<std::size_t>(m.side))
      fail("build_sequence: token count does not fill the grid");
    seq.sides.push_back(m.side);
    seq.total_tokens += m.side * m.side;
    if (k + 1 < maps.size()) {
      seq.context_maps.push_back(m.indices);
      seq.context_len += m.side * m.side;
    }
    if (k > 0) {
      seq.targets.insert(seq.targets.end(), m.indices.begin(), m.indices.end());
      seq.predicted_len += m.side * m.side;
    }
  }
  return seq;
}

ad::Tensor sequence_mask(const std::vector<int>& sides) {
  if (sides.size() != 6) fail("sequence_mask: expected six sides");
  std::vector<BlockDesc> blocks;
  for (int s = 0; s < 5; ++s) blocks.push_back({sides[static_cast<std::size_t>(s)] * sides[static_cast<std::size_t>(s)], s, true});
  for (int s = 1; s < 6; ++s) blocks.push_back({sides[static_cast<std::size_t>(s)] * sides[static_cast<std::size_t>(s)], s, false});
  return build_mask(blocks);
}

void ARModelConfig::validate() const {
  encoder.validate();
  if (depth < 1) fail("config: depth must be positive");
  if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
    fail("config: heads must divide embed_dim");
  if (mlp_ratio <= 0.0) fail("config: mlp_ratio must be positive");
  if (drop_path < 0.0 || drop_path >= 1.0) fail("config: drop_path must lie in [0,1)");
}

nlohmann::json ARModelConfig::to_json() const {
  return nlohmann::json{{"depth", depth},
                        {"embed_dim", embed_dim},
                        {"heads", heads},
                        {"mlp_ratio", mlp_ratio},
                        {"drop_path", drop_path},
                        {"privileged", privileged},
                        {"seed", seed},
                        {"encoder", encoder.to_json()}};
}

ARModelConfig ARModelConfig::from_json(const nlohmann::json& j) {
  static const std::vector<std::string> keys = {"depth",     "embed_dim",  "heads", "mlp_ratio",
                                                "drop_path", "privileged", "seed",  "encoder"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (std::find(keys.begin(), keys.end(), it.key()) == keys.end())
      fail("config: unknown key '" + it.key() + "'");
  }
  ARModelConfig c;
  c.depth = j.at("depth").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.heads = j.at("heads").get<int>();
  c.mlp_ratio = j.at("mlp_ratio").get<double>();
  c.drop_path = j.at("drop_path").get<double>();
  c.privileged = j.at("privileged").get<bool>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.encoder = aqvae::TokenizerConfig::from_json(j.at("encoder"));
  c.validate();
  return c;
}

ARModelConfig ar_config_for(const aqvae::TokenizerConfig& tok_cfg, int depth, int embed_dim,
                            int heads, bool privileged) {
  ARModelConfig c;
  c.encoder = tok_cfg;
  c.depth = depth;
  c.embed_dim = embed_dim;
  c.heads = heads;
  c.privileged = privileged;
  c.validate();
  return c;
}

ARModel::ARModel(const ARModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  core::Rng root(cfg_.seed);
  core::Rng enc_rng = root.child(1);
  context_encoder = aqvae::Encoder(cfg_.encoder, enc_rng);
  core::Rng rng = root.child(2);

  const int E = cfg_.embed_dim;
  token_proj = nn::Linear(cfg_.code_dim(), E, rng);
  scale_emb = init_table({6, E}, rng, 0.02);
  start_emb = init_table({6, E}, rng, 0.02);
  for (int side : cfg_.token_sides()) pos_embs.push_back(init_table({side * side, E}, rng, 0.02));

  blocks.resize(static_cast<std::size_t>(cfg_.depth));
  for (auto& b : blocks) {
    b.ln1 = nn::LayerNorm(E);
    b.attn = nn::MultiheadAttention(E, cfg_.heads, rng);
    b.ln2 = nn::LayerNorm(E);
    b.xattn = nn::MultiheadAttention(E, cfg_.heads, rng);
    if (cfg_.privileged) {
      b.ln_priv = nn::LayerNorm(E);
      b.xattn_priv = nn::MultiheadAttention(E, cfg_.heads, rng);
    }
    b.ln3 = nn::LayerNorm(E);
    b.mlp = nn::MLP(E, static_cast<int>(std::lround(E * cfg_.mlp_ratio)), rng);
  }

  const int S = cfg_.encoder.n_stages();
  for (int i = 0; i < 3; ++i) {
    feat_proj.emplace_back(cfg_.encoder.stage_width(S - 3 + i), E, rng);
    feat_ln.emplace_back(E);
  }
  final_ln = nn::LayerNorm(E);
  head = nn::Linear(E, cfg_.vocab(), rng, /*use_bias=*/true, 1.0, /*zero_init=*/true);
}

std::vector<ad::Tensor> ARModel::context_features(const ad::Tensor& image, int label_id) const {
  if (image.ndim() != 3 || image.dim(1) != cfg_.encoder.image_side ||
      image.dim(2) != cfg_.encoder.image_side)
    fail("context_features: image does not match the encoder geometry");
  return context_encoder.forward(image, label_id).features;
}

namespace {

// Cross-attention resolution group of one block: the first ceil(depth/3)
// blocks read the coarsest features, the last third the finest.
int resolution_group(int block, int depth) {
  const int third = (depth + 2) / 3;
  if (block < third) return 0;
  if (block < 2 * third) return 1;
  return 2;
}

}  // namespace

ad::Tensor ARModel::forward_all(const std::vector<aqvae::TokenMap>& maps,
                                const aqvae::Codebook& cb,
                                const std::vector<ad::Tensor>& ctx_feats,
                                const std::vector<ad::Tensor>* fs_feats,
                                core::Rng* droppath_rng) const {
  ScaleSequence seq = build_sequence(maps);
  if (seq.sides != cfg_.token_sides()) fail("forward_all: schedule mismatch");
  std::vector<const aqvae::TokenMap*> ctx;
  for (int s = 0; s < 5; ++s) ctx.push_back(&maps[static_cast<std::size_t>(s)]);
  std::vector<std::pair<int, const std::vector<int>*>> queries;
  for (int s = 1; s < 6; ++s) queries.emplace_back(s, nullptr);
  return run(ctx, queries, cb, ctx_feats, fs_feats, droppath_rng);
}

ad::Tensor ARModel::scale_logits(const std::vector<aqvae::TokenMap>& context_maps, int scale,
                                 const aqvae::Codebook& cb,
                                 const std::vector<ad::Tensor>& ctx_feats,
                                 const std::vector<ad::Tensor>* fs_feats,
                                 const std::vector<int>* positions) const {
  if (scale < 1 || scale > 5) fail("scale_logits: scale must lie in [1,5]");
  if (static_cast<int>(context_maps.size()) != scale)
    fail("scale_logits: need exactly the preceding scales as context");
  std::vector<const aqvae::TokenMap*> ctx;
  for (const auto& m : context_maps) ctx.push_back(&m);
  std::vector<std::pair<int, const std::vector<int>*>> queries = {{scale, positions}};
  return run(ctx, queries, cb, ctx_feats, fs_feats, nullptr);
}

ad::Tensor ARModel::run(const std::vector<const aqvae::TokenMap*>& ctx,
                        const std::vector<std::pair<int, const std::vector<int>*>>& queries,
                        const aqvae::Codebook& cb, const std::vector<ad::Tensor>& ctx_feats,
                        const std::vector<ad::Tensor>* fs_feats, core::Rng* droppath_rng) const {
  if (cb.size != cfg_.vocab() || cb.dim != cfg_.code_dim())
    fail("run: codebook does not match the configured vocabulary");
  if (cfg_.privileged && fs_feats == nullptr)
    fail("run: privileged model requires fully sampled features");
  if (!cfg_.privileged && fs_feats != nullptr)
    fail("run: model has no privileged branch");

  // Project each feature resolution into attention tokens.
  auto project = [&](const std::vector<ad::Tensor>& feats) {
    if (feats.size() != 3) fail("run: expected three feature maps");
    const int base = cfg_.encoder.base_side();
    std::vector<ad::Tensor> out;
    for (int i = 0; i < 3; ++i) {
      const ad::Tensor& f = feats[static_cast<std::size_t>(i)];
      const int expect_side = base << (2 - i);
      if (f.ndim() != 3 || f.dim(1) != expect_side || f.dim(2) != expect_side)
        fail("run: feature resolution mismatch");
      ad::Tensor tokens = ad::transpose2d(ad::reshape(f, {f.dim(0), f.dim(1) * f.dim(2)}));
      out.push_back(feat_ln[static_cast<std::size_t>(i)].forward(
          feat_proj[static_cast<std::size_t>(i)].forward(tokens)));
    }
    return out;
  };
  const std::vector<ad::Tensor> kv_ctx = project(ctx_feats);
  std::vector<ad::Tensor> kv_fs;
  if (cfg_.privileged) kv_fs = project(*fs_feats);

  // Embed context blocks and query blocks; build the matching mask.
  const ad::Tensor cb_table =
      ad::Tensor::from_data({cb.size, cb.dim}, cb.vectors);  // frozen lookup
  std::vector<ad::Tensor> parts;
  std::vector<BlockDesc> desc;
  int n_ctx_rows = 0;
  for (std::size_t s = 0; s < ctx.size(); ++s) {
    const aqvae::TokenMap& m = *ctx[s];
    const int side = cfg_.token_sides()[s];
    if (m.side != side || m.indices.size() != static_cast<std::size_t>(side) * side)
      fail("run: context map does not match the schedule");
    ad::Tensor e = token_proj.forward(ad::gather_rows_nograd(cb_table, m.indices));
    e = ad::add(e, ad::embedding_row(scale_emb, static_cast<int>(s)));
    e = ad::add(e, pos_embs[s]);
    parts.push_back(e);
    desc.push_back({side * side, static_cast<int>(s), true});
    n_ctx_rows += side * side;
  }
  int n_query_rows = 0;
  for (const auto& [scale, positions] : queries) {
    if (scale < 1 || scale >= 6) fail("run: query scale out of range");
    if (static_cast<std::size_t>(scale) > ctx.size()) fail("run: query precedes its context");
    ad::Tensor pos = positions == nullptr
                         ? pos_embs[static_cast<std::size_t>(scale)]
                         : ad::embedding_rows(pos_embs[static_cast<std::size_t>(scale)], *positions);
    parts.push_back(ad::add(pos, ad::embedding_row(start_emb, scale)));
    const int len = positions == nullptr
                        ? cfg_.token_sides()[static_cast<std::size_t>(scale)] *
                              cfg_.token_sides()[static_cast<std::size_t>(scale)]
                        : static_cast<int>(positions->size());
    desc.push_back({len, scale, false});
    n_query_rows += len;
  }
  ad::Tensor x = ad::concat_rows(parts);
  const ad::Tensor mask = build_mask(desc);

  auto residual = [&](const ad::Tensor& h, const ad::Tensor& branch) {
    if (droppath_rng != nullptr && cfg_.drop_path > 0.0) {
      if (droppath_rng->uniform01() < cfg_.drop_path) return h;
      return ad::add(h, ad::smul(branch, 1.0 / (1.0 - cfg_.drop_path)));
    }
    return ad::add(h, branch);
  };

  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const Block& blk = blocks[b];
    const int group = resolution_group(static_cast<int>(b), cfg_.depth);
    const std::size_t feat_idx = static_cast<std::size_t>(2 - group);  // coarsest first
    ad::Tensor h1 = blk.ln1.forward(x);
    x = residual(x, blk.attn.forward(h1, h1, mask));
    x = residual(x, blk.xattn.forward(blk.ln2.forward(x), kv_ctx[feat_idx], ad::Tensor()));
    if (cfg_.privileged)
      x = residual(x, blk.xattn_priv.forward(blk.ln_priv.forward(x), kv_fs[feat_idx], ad::Tensor()));
    x = residual(x, blk.mlp.forward(blk.ln3.forward(x)));
  }
  ad::Tensor out = ad::narrow_dim0(x, n_ctx_rows, n_query_rows);
  return head.forward(final_ln.forward(out));
}

void ARModel::init_context_encoder_from(const aqvae::Tokenizer& tok) {
  nn::ParamList src, dst;
  tok.encoder.collect(src, "enc");
  context_encoder.collect(dst, "enc");
  if (src.size() != dst.size()) fail("init_context_encoder_from: encoder geometry mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    if (src[i].second.shape() != dst[i].second.shape())
      fail("init_context_encoder_from: parameter shape mismatch");
    dst[i].second.values() = src[i].second.values();
  }
}

nn::ParamList ARModel::params() const {
  nn::ParamList out;
  context_encoder.collect(out, "ar.ctx_enc");
  token_proj.collect(out, "ar.token_proj");
  out.emplace_back("ar.scale_emb", scale_emb);
  out.emplace_back("ar.start_emb", start_emb);
  for (std::size_t s = 0; s < pos_embs.size(); ++s)
    out.emplace_back("ar.pos_emb" + std::to_string(s), pos_embs[s]);
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string p = "ar.block" + std::to_string(b);
    blocks[b].ln1.collect(out, p + ".ln1");
    blocks[b].attn.collect(out, p + ".attn");
    blocks[b].ln2.collect(out, p + ".ln2");
    blocks[b].xattn.collect(out, p + ".xattn");
    if (cfg_.privileged) {
      blocks[b].ln_priv.collect(out, p + ".ln_priv");
      blocks[b].xattn_priv.collect(out, p + ".xattn_priv");
    }
    blocks[b].ln3.collect(out, p + ".ln3");
    blocks[b].mlp.collect(out, p + ".mlp");
  }
  for (std::size_t i = 0; i < feat_proj.size(); ++i) {
    feat_proj[i].collect(out, "ar.feat_proj" + std::to_string(i));
    feat_ln[i].collect(out, "ar.feat_ln" + std::to_string(i));
  }
  final_ln.collect(out, "ar.final_ln");
  head.collect(out, "ar.head");
  return out;
}

dataio::StateDict ARModel::state() const { return dataio::dump_params(params()); }

void ARModel::load_state(const dataio::StateDict& sd) { dataio::load_params(params(), sd); }

ad::Tensor cross_entropy(const ad::Tensor& logits, const std::vector<int>& targets) {
  if (logits.ndim() != 2) fail("cross_entropy: expected [N,V] logits");
  if (logits.dim(0) != static_cast<int>(targets.size()))
    fail("cross_entropy: target count mismatch");
  return ad::neg(ad::mean(ad::pick_rows(ad::log_softmax_lastdim(logits), targets)));
}

nlohmann::json token_maps_to_json(const std::vector<aqvae::TokenMap>& maps) {
  nlohmann::json schedule = nlohmann::json::array();
  nlohmann::json grids = nlohmann::json::array();
  for (const auto& m : maps) {
    schedule.push_back(m.side);
    grids.push_back(m.indices);
  }
  return nlohmann::json{{"schedule", schedule}, {"maps", grids}};
}

std::vector<aqvae::TokenMap> token_maps_from_json(const nlohmann::json& j) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (it.key() != "schedule" && it.key() != "maps")
      fail("token_maps_from_json: unknown key '" + it.key() + "'");
  }
  const auto& schedule = j.at("schedule");
  const auto& grids = j.at("maps");
  if (!schedule.is_array() || !grids.is_array() || schedule.size() != grids.size())
    fail("token_maps_from_json: schedule and maps must be parallel arrays");
  if (schedule.size() != 6) fail("token_maps_from_json: expected six maps");
  std::vector<aqvae::TokenMap> maps;
  for (std::size_t k = 0; k < schedule.size(); ++k) {
    aqvae::TokenMap m;
    m.side = schedule[k].get<int>();
    m.accel = aqvae::kLevels[k];
    m.indices = grids[k].get<std::vector<int>>();
    if (m.indices.size() != static_cast<std::size_t>(m.side) * static_cast<std::size_t>(m.side))
      fail("token_maps_from_json: token count does not fill the grid");
    maps.push_back(std::move(m));
  }
  return maps;
}

}  // namespace nasp::nextscale
