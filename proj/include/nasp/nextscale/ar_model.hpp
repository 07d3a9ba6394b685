#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasp/aqvae/tokenizer.hpp"
#include "nasp/core/nn.hpp"
#include "nasp/dataio/checkpoint.hpp"

namespace nasp::nextscale {

// Flattened layout of one pyramid's token maps: the five coarser maps form
// the conditioning context and each map from the second on is a prediction
// target for the scale before it.
struct ScaleSequence {
  std::vector<int> sides;                      // six grid sides, ascending by 1
  std::vector<std::vector<int>> context_maps;  // token indices, scales 0..4
  std::vector<int> targets;                    // flattened, scales 1..5
  int context_len = 0;    // sum of the first five squared sides
  int predicted_len = 0;  // sum of the last five squared sides
  int total_tokens = 0;   // across all six maps
};

// Validates the schedule (six maps, consecutive sides, full grids) and
// flattens context/targets. Token values are not range-checked here; the
// model checks them against its vocabulary on lookup.
ScaleSequence build_sequence(const std::vector<aqvae::TokenMap>& maps);

// Additive attention mask for the canonical transformer layout
// [C_0 .. C_4 | q_1 .. q_5]: a context token sees context blocks up to its
// own scale, a query token sees context blocks strictly before its scale,
// and nobody attends to query tokens (queries carry no sampled content, so
// per-position logits are independent of the rest of their block).
ad::Tensor sequence_mask(const std::vector<int>& sides);

struct ARModelConfig {
  int depth = 3;            // paper profile 16
  int embed_dim = 128;      // paper profile 1024
  int heads = 4;            // paper profile 16
  double mlp_ratio = 4.0;
  double drop_path = 0.0;   // paper profile 0.025; inactive in eval mode
  bool privileged = false;  // adds the fully-sampled cross-attention branch
  std::uint64_t seed = 1;
  aqvae::TokenizerConfig encoder;  // context-encoder geometry (shared schedule)

  int vocab() const { return encoder.codebook_size; }
  int code_dim() const { return encoder.latent_dim; }
  const std::vector<int>& token_sides() const { return encoder.token_sides; }
  void validate() const;

  nlohmann::json to_json() const;
  static ARModelConfig from_json(const nlohmann::json& j);
};

// Convenience: architecture sized against an existing tokenizer.
ARModelConfig ar_config_for(const aqvae::TokenizerConfig& tok_cfg, int depth, int embed_dim,
                            int heads, bool privileged);

// Cross-attentive block-causal transformer over the scale sequence. Each
// block runs self-attention, cross-attention into one of the three context
// feature resolutions (coarsest for the first ceil(depth/3) blocks, finest
// for the last), an optional privileged cross-attention over fully sampled
// features, and an MLP. The logit head starts at zero, so initial
// predictions are exactly uniform.
class ARModel {
 public:
  ARModel() = default;
  explicit ARModel(const ARModelConfig& cfg);

  const ARModelConfig& config() const { return cfg_; }

  // Feature pyramid of a zero-filled input through the trainable encoder
  // copy (three maps, coarsest last).
  std::vector<ad::Tensor> context_features(const ad::Tensor& image, int label_id) const;

  // Teacher-forced forward over all six maps: logits for every predicted
  // position, [predicted_len, vocab], scales concatenated coarse to fine.
  // fs_feats is required (and only allowed) for privileged models.
  // droppath_rng enables stochastic depth during training.
  ad::Tensor forward_all(const std::vector<aqvae::TokenMap>& maps, const aqvae::Codebook& cb,
                         const std::vector<ad::Tensor>& ctx_feats,
                         const std::vector<ad::Tensor>* fs_feats = nullptr,
                         core::Rng* droppath_rng = nullptr) const;

  // Inference forward: context maps for scales [0, scale); logits for the
  // given scale's query positions (all of them, or an explicit subset).
  ad::Tensor scale_logits(const std::vector<aqvae::TokenMap>& context_maps, int scale,
                          const aqvae::Codebook& cb, const std::vector<ad::Tensor>& ctx_feats,
                          const std::vector<ad::Tensor>* fs_feats = nullptr,
                          const std::vector<int>* positions = nullptr) const;

  // Copy encoder weights from a trained tokenizer (same geometry).
  void init_context_encoder_from(const aqvae::Tokenizer& tok);

  nn::ParamList params() const;
  dataio::StateDict state() const;
  void load_state(const dataio::StateDict& sd);

  struct Block {
    nn::LayerNorm ln1, ln2, ln3;
    nn::MultiheadAttention attn, xattn;
    nn::LayerNorm ln_priv;
    nn::MultiheadAttention xattn_priv;  // privileged models only
    nn::MLP mlp;
  };

  aqvae::Encoder context_encoder;
  nn::Linear token_proj;             // code_dim -> embed_dim
  ad::Tensor scale_emb;              // [6, E]
  ad::Tensor start_emb;              // [6, E], rows 1..5 used as queries
  std::vector<ad::Tensor> pos_embs;  // per scale, [side^2, E]
  std::vector<Block> blocks;
  std::vector<nn::Linear> feat_proj;  // per encoder feature index
  std::vector<nn::LayerNorm> feat_ln;
  nn::LayerNorm final_ln;
  nn::Linear head;  // zero-initialized weight

 private:
  ad::Tensor run(const std::vector<const aqvae::TokenMap*>& ctx,
                 const std::vector<std::pair<int, const std::vector<int>*>>& queries,
                 const aqvae::Codebook& cb, const std::vector<ad::Tensor>& ctx_feats,
                 const std::vector<ad::Tensor>* fs_feats, core::Rng* droppath_rng) const;

  ARModelConfig cfg_;
};

// Mean negative log-likelihood of integer targets under row-wise logits.
ad::Tensor cross_entropy(const ad::Tensor& logits, const std::vector<int>& targets);

// Token-map debug interchange: {"schedule":[sides], "maps":[[indices]]}.
nlohmann::json token_maps_to_json(const std::vector<aqvae::TokenMap>& maps);
std::vector<aqvae::TokenMap> token_maps_from_json(const nlohmann::json& j);

}  // namespace nasp::nextscale
