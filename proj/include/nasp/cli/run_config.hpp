#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasp/aqvae/train.hpp"
#include "nasp/nextscale/decode.hpp"
#include "nasp/nextscale/train.hpp"
#include "nasp/opd/distill.hpp"

namespace nasp::cli {

// Synthetic acquisition description: slice geometry, split sizes, coil count,
// and the pattern/contrast rotations used when generating a dataset.
struct DataSection {
  int height = 64, width = 64;
  int n_train = 64, n_val = 8, n_test = 8;
  int coils = 1;
  std::uint32_t sens_seed = 0;
  std::vector<std::string> patterns = {"cartesian_x", "cartesian_y", "radial", "gaussian_vd"};
  std::vector<std::string> contrasts = {"t1-like", "t2-like", "flair-like"};

  nlohmann::json to_json() const;
};

// Transformer shape of the scale-autoregressive model; the context-encoder
// geometry is taken from the tokenizer section at build time.
struct ARSection {
  int depth = 3;
  int embed_dim = 128;
  int heads = 4;
  double mlp_ratio = 4.0;
  double drop_path = 0.0;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

struct DecodeSection {
  std::string kind = "argmax";
  double temperature = 1.0;
  int top_k = 900;
  double top_p = 0.96;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
  nextscale::DecodeStrategy strategy() const;
};

// One config to drive every pipeline stage. Loading merges the user file
// over the profile defaults key by key, so partial files are valid, every
// defaulted field still echoes into the resolved dump, and unknown keys are
// rejected with their dotted path. Seed fields the user leaves out are
// derived from the top-level seed; NASP_SEED overrides that seed.
struct RunConfig {
  std::string profile = "desk";  // desk | paper
  std::uint64_t seed = 1;
  DataSection data;
  aqvae::TokenizerConfig tokenizer;
  aqvae::TrainTokenizerConfig train_tokenizer;
  ARSection ar;
  nextscale::TrainARConfig train_ar;
  opd::DistillConfig distill;
  DecodeSection decode;

  static RunConfig defaults(const std::string& profile);
  static RunConfig from_json(const nlohmann::json& user);
  static RunConfig load(const std::string& path);

  // Full echo of every field; parsing the dump back reproduces the config.
  nlohmann::json resolved() const;
  void validate() const;

  // Transformer config sized against a (possibly checkpoint-loaded)
  // tokenizer geometry.
  nextscale::ARModelConfig ar_model_config(const aqvae::TokenizerConfig& tok_cfg,
                                           bool privileged) const;
};

}  // namespace nasp::cli
