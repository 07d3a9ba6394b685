#include "nasp/cli/run_config.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

#include "nasp/core/rng.hpp"
#include "nasp/dataio/phantom.hpp"
#include "nasp/fourier/fourier.hpp"

namespace nasp::cli {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("cli config: " + msg); }

// Per-stage seed streams derived from the top-level seed.
enum SeedTag : std::uint64_t {
  kTokenizerSeed = 1,
  kTrainTokenizerSeed = 2,
  kARSeed = 3,
  kTrainARSeed = 4,
  kDistillSeed = 5,
  kDecodeSeed = 6,
  kSensSeed = 7,
};

std::uint64_t derived_seed(std::uint64_t master, SeedTag tag) {
  return core::Rng(master).child(tag).uniform_int(1ull << 62);
}

void derive_unset_seeds(RunConfig& cfg, const nlohmann::json& user) {
  const auto explicit_seed = [&user](const char* section) {
    return user.contains(section) && user[section].is_object() && user[section].contains("seed");
  };
  if (!explicit_seed("tokenizer")) cfg.tokenizer.seed = derived_seed(cfg.seed, kTokenizerSeed);
  if (!explicit_seed("train_tokenizer"))
    cfg.train_tokenizer.seed = derived_seed(cfg.seed, kTrainTokenizerSeed);
  if (!explicit_seed("ar")) cfg.ar.seed = derived_seed(cfg.seed, kARSeed);
  if (!explicit_seed("train_ar")) cfg.train_ar.seed = derived_seed(cfg.seed, kTrainARSeed);
  if (!explicit_seed("distill")) cfg.distill.seed = derived_seed(cfg.seed, kDistillSeed);
  if (!explicit_seed("decode")) cfg.decode.seed = derived_seed(cfg.seed, kDecodeSeed);
  if (!(user.contains("data") && user["data"].is_object() && user["data"].contains("sens_seed")))
    cfg.data.sens_seed = static_cast<std::uint32_t>(derived_seed(cfg.seed, kSensSeed));
}

void merge_into(nlohmann::json& base, const nlohmann::json& user, const std::string& path) {
  if (!user.is_object())
    fail("expected an object at " + (path.empty() ? "the top level" : "'" + path + "'"));
  for (const auto& [key, value] : user.items()) {
    const std::string p = path.empty() ? key : path + "." + key;
    if (!base.contains(key)) fail("unknown key '" + p + "'");
    if (base[key].is_object())
      merge_into(base[key], value, p);
    else
      base[key] = value;
  }
}

template <typename F>
auto parse_section(const char* name, F&& f) {
  try {
    return f();
  } catch (const nlohmann::json::exception& e) {
    fail(std::string("section '") + name + "': " + e.what());
  }
}

DataSection data_from_json(const nlohmann::json& j) {
  DataSection d;
  d.height = j.at("height").get<int>();
  d.width = j.at("width").get<int>();
  d.n_train = j.at("n_train").get<int>();
  d.n_val = j.at("n_val").get<int>();
  d.n_test = j.at("n_test").get<int>();
  d.coils = j.at("coils").get<int>();
  d.sens_seed = j.at("sens_seed").get<std::uint32_t>();
  d.patterns = j.at("patterns").get<std::vector<std::string>>();
  d.contrasts = j.at("contrasts").get<std::vector<std::string>>();
  return d;
}

ARSection ar_from_json(const nlohmann::json& j) {
  ARSection a;
  a.depth = j.at("depth").get<int>();
  a.embed_dim = j.at("embed_dim").get<int>();
  a.heads = j.at("heads").get<int>();
  a.mlp_ratio = j.at("mlp_ratio").get<double>();
  a.drop_path = j.at("drop_path").get<double>();
  a.seed = j.at("seed").get<std::uint64_t>();
  return a;
}

DecodeSection decode_from_json(const nlohmann::json& j) {
  DecodeSection d;
  d.kind = j.at("kind").get<std::string>();
  d.temperature = j.at("temperature").get<double>();
  d.top_k = j.at("top_k").get<int>();
  d.top_p = j.at("top_p").get<double>();
  d.seed = j.at("seed").get<std::uint64_t>();
  return d;
}

}  // namespace

nlohmann::json DataSection::to_json() const {
  return nlohmann::json{{"height", height},       {"width", width},
                        {"n_train", n_train},     {"n_val", n_val},
                        {"n_test", n_test},       {"coils", coils},
                        {"sens_seed", sens_seed}, {"patterns", patterns},
                        {"contrasts", contrasts}};
}

nlohmann::json ARSection::to_json() const {
  return nlohmann::json{{"depth", depth},         {"embed_dim", embed_dim},
                        {"heads", heads},         {"mlp_ratio", mlp_ratio},
                        {"drop_path", drop_path}, {"seed", seed}};
}

nlohmann::json DecodeSection::to_json() const {
  return nlohmann::json{{"kind", kind},
                        {"temperature", temperature},
                        {"top_k", top_k},
                        {"top_p", top_p},
                        {"seed", seed}};
}

nextscale::DecodeStrategy DecodeSection::strategy() const {
  nextscale::DecodeStrategy s;
  s.kind = nextscale::decode_kind_from_string(kind);
  s.temperature = temperature;
  s.top_k = top_k;
  s.top_p = top_p;
  s.seed = seed;
  return s;
}

RunConfig RunConfig::defaults(const std::string& profile) {
  RunConfig cfg;
  cfg.profile = profile;
  if (profile == "desk") {
    // The struct defaults describe the desk scale already (64x64, codebook
    // 512, schedule [3..8]).
  } else if (profile == "paper") {
    cfg.data.height = cfg.data.width = 256;
    cfg.data.n_train = 800;
    cfg.data.n_val = 100;
    cfg.data.n_test = 100;
    cfg.data.coils = 8;
    cfg.tokenizer.image_side = 256;
    cfg.tokenizer.base_width = 64;
    cfg.tokenizer.channel_mults = {1, 1, 2, 2, 4};
    cfg.tokenizer.res_blocks_per_stage = 2;
    cfg.tokenizer.groups = 16;
    cfg.tokenizer.latent_dim = 32;
    cfg.tokenizer.codebook_size = 4096;
    cfg.tokenizer.token_sides = {11, 12, 13, 14, 15, 16};
    cfg.train_tokenizer.epochs = 100;
    cfg.ar.depth = 16;
    cfg.ar.embed_dim = 1024;
    cfg.ar.heads = 16;
    cfg.ar.drop_path = 0.025;
    cfg.train_ar.steps = 20000;
    cfg.train_ar.warmup_steps = 500;
    cfg.distill.steps = 2000;
    cfg.distill.eval_every = 200;
  } else {
    fail("unknown profile '" + profile + "' (expected desk or paper)");
  }
  derive_unset_seeds(cfg, nlohmann::json::object());
  return cfg;
}

RunConfig RunConfig::from_json(const nlohmann::json& user) {
  if (!user.is_object()) fail("the config must be a JSON object");
  std::string profile = "desk";
  if (user.contains("profile")) {
    if (!user["profile"].is_string()) fail("'profile' must be a string");
    profile = user["profile"].get<std::string>();
  }
  nlohmann::json merged = defaults(profile).resolved();
  merge_into(merged, user, "");

  RunConfig cfg;
  cfg.profile = profile;
  cfg.seed = parse_section("seed", [&] { return merged.at("seed").get<std::uint64_t>(); });
  cfg.data = parse_section("data", [&] { return data_from_json(merged.at("data")); });
  cfg.tokenizer = parse_section(
      "tokenizer", [&] { return aqvae::TokenizerConfig::from_json(merged.at("tokenizer")); });
  cfg.train_tokenizer = parse_section("train_tokenizer", [&] {
    return aqvae::TrainTokenizerConfig::from_json(merged.at("train_tokenizer"));
  });
  cfg.ar = parse_section("ar", [&] { return ar_from_json(merged.at("ar")); });
  cfg.train_ar = parse_section(
      "train_ar", [&] { return nextscale::TrainARConfig::from_json(merged.at("train_ar")); });
  cfg.distill =
      parse_section("distill", [&] { return opd::DistillConfig::from_json(merged.at("distill")); });
  cfg.decode = parse_section("decode", [&] { return decode_from_json(merged.at("decode")); });

  if (const char* env = std::getenv("NASP_SEED")) {
    const std::string s(env);
    if (s.empty() || s.find_first_not_of("0123456789") != std::string::npos)
      fail("NASP_SEED must be an unsigned integer, got '" + s + "'");
    cfg.seed = std::strtoull(s.c_str(), nullptr, 10);
  }
  derive_unset_seeds(cfg, user);
  cfg.validate();
  return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    fail("cannot parse '" + path + "': " + e.what());
  }
  return from_json(j);
}

nlohmann::json RunConfig::resolved() const {
  return nlohmann::json{{"profile", profile},
                        {"seed", seed},
                        {"data", data.to_json()},
                        {"tokenizer", tokenizer.to_json()},
                        {"train_tokenizer", train_tokenizer.to_json()},
                        {"ar", ar.to_json()},
                        {"train_ar", train_ar.to_json()},
                        {"distill", distill.to_json()},
                        {"decode", decode.to_json()}};
}

void RunConfig::validate() const {
  if (profile != "desk" && profile != "paper") fail("unknown profile '" + profile + "'");
  tokenizer.validate();
  if (data.height != tokenizer.image_side || data.width != tokenizer.image_side)
    fail("data shape " + std::to_string(data.height) + "x" + std::to_string(data.width) +
         " does not match tokenizer.image_side " + std::to_string(tokenizer.image_side));
  if (data.n_train < 1 || data.n_val < 1 || data.n_test < 1)
    fail("every split needs at least one slice");
  if (data.coils < 1) fail("data.coils must be positive");
  if (data.patterns.empty() || data.contrasts.empty())
    fail("data.patterns and data.contrasts must be non-empty");
  for (const auto& p : data.patterns) (void)fourier::pattern_from_string(p);
  for (const auto& c : data.contrasts) (void)dataio::contrast_from_string(c);
  if (ar.depth < 1) fail("ar.depth must be positive");
  if (ar.heads < 1 || ar.embed_dim < ar.heads || ar.embed_dim % ar.heads != 0)
    fail("ar.embed_dim must be a positive multiple of ar.heads");
  if (!(ar.mlp_ratio > 0.0)) fail("ar.mlp_ratio must be positive");
  if (ar.drop_path < 0.0 || ar.drop_path >= 1.0) fail("ar.drop_path must lie in [0,1)");
  (void)nextscale::decode_kind_from_string(decode.kind);
  if (!(decode.temperature > 0.0)) fail("decode.temperature must be positive");
  if (decode.top_k < 1) fail("decode.top_k must be at least 1");
  if (!(decode.top_p > 0.0) || decode.top_p > 1.0) fail("decode.top_p must lie in (0,1]");
  // The train sections re-validate through their own parsers.
  (void)aqvae::TrainTokenizerConfig::from_json(train_tokenizer.to_json());
  (void)nextscale::TrainARConfig::from_json(train_ar.to_json());
  (void)opd::DistillConfig::from_json(distill.to_json());
}

nextscale::ARModelConfig RunConfig::ar_model_config(const aqvae::TokenizerConfig& tok_cfg,
                                                    bool privileged) const {
  nextscale::ARModelConfig c =
      nextscale::ar_config_for(tok_cfg, ar.depth, ar.embed_dim, ar.heads, privileged);
  c.mlp_ratio = ar.mlp_ratio;
  c.drop_path = ar.drop_path;
  c.seed = privileged ? ar.seed + 1 : ar.seed;
  c.validate();
  return c;
}

}  // namespace nasp::cli
