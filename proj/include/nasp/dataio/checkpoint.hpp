#pragma once

#include <map>
#include <string>
#include <vector>

#include "json.hpp"
#include "nasp/core/tensor.hpp"

namespace nasp::dataio {

struct ParamBlob {
  nasp::ad::Shape shape;
  std::vector<double> data;
};

// Ordered by name so serialization and hashing are deterministic.
using StateDict = std::map<std::string, ParamBlob>;

// Canonical fingerprint of a config (FNV-1a over the sorted-key JSON dump).
std::string config_hash_hex(const nlohmann::json& config);
// Fingerprint of all weights, order-independent of file layout.
std::string state_hash_hex(const StateDict& state);

// Checkpoint directory layout:
//   manifest.json  {"version":1, "component":..., "config":{...},
//                   "config_hash":..., "state_hash":...,
//                   "blobs":{name:{"file":..., "shape":[...], "hash":...}}}
//   blob_NNN.mrwt  weight payloads (see core/serialize.hpp)
void save_checkpoint(const std::string& dir, const std::string& component,
                     const nlohmann::json& config, const StateDict& state);

struct LoadedCheckpoint {
  std::string component;
  nlohmann::json config;
  std::string state_hash;
  StateDict state;
};

// Validates version, config hash, blob presence/shapes/hashes. Throws on any
// inconsistency; never returns a partially loaded state.
LoadedCheckpoint load_checkpoint(const std::string& dir);

// Bridge between live autodiff parameters (ordered name/tensor pairs) and
// value blobs. load_params is strict: every parameter must be present in the
// state with its exact shape, and names the model does not own are rejected.
StateDict dump_params(const std::vector<std::pair<std::string, ad::Tensor>>& params);
void load_params(const std::vector<std::pair<std::string, ad::Tensor>>& params,
                 const StateDict& state);

}  // namespace nasp::dataio
