#include "nasp/dataio/checkpoint.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "nasp/core/serialize.hpp"

namespace nasp::dataio {

namespace fs = std::filesystem;
using nlohmann::json;

std::string config_hash_hex(const json& config) {
  const std::string dump = config.dump();  // nlohmann objects are key-sorted
  return nasp::io::fnv1a_hex(dump.data(), dump.size());
}

std::string state_hash_hex(const StateDict& state) {
  std::uint64_t h = 14695981039346656037ull;
  for (const auto& [name, blob] : state) {
    h = nasp::io::fnv1a(name.data(), name.size(), h);
    h = nasp::io::fnv1a(blob.shape.data(), blob.shape.size() * sizeof(int), h);
    h = nasp::io::fnv1a(blob.data.data(), blob.data.size() * sizeof(double), h);
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

void save_checkpoint(const std::string& dir, const std::string& component, const json& config,
                     const StateDict& state) {
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = 1;
  manifest["component"] = component;
  manifest["config"] = config;
  manifest["config_hash"] = config_hash_hex(config);
  manifest["state_hash"] = state_hash_hex(state);
  json blobs = json::object();
  int idx = 0;
  for (const auto& [name, blob] : state) {
    char file[32];
    std::snprintf(file, sizeof(file), "blob_%03d.mrwt", idx++);
    nasp::io::write_blob((fs::path(dir) / file).string(), blob.shape, blob.data);
    blobs[name] = {{"file", file},
                   {"shape", blob.shape},
                   {"hash", nasp::io::fnv1a_hex(blob.data.data(),
                                                blob.data.size() * sizeof(double))}};
  }
  manifest["blobs"] = blobs;
  std::ofstream f(fs::path(dir) / "manifest.json");
  if (!f) throw std::runtime_error("save_checkpoint: cannot write manifest in " + dir);
  f << manifest.dump(2) << "\n";
}

LoadedCheckpoint load_checkpoint(const std::string& dir) {
  const fs::path mpath = fs::path(dir) / "manifest.json";
  std::ifstream f(mpath);
  if (!f) throw std::runtime_error("load_checkpoint: missing " + mpath.string());
  json manifest;
  try {
    f >> manifest;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_checkpoint: corrupt manifest in " + dir + ": " + e.what());
  }
  if (!manifest.contains("version") || manifest["version"] != 1)
    throw std::runtime_error("load_checkpoint: unsupported checkpoint version in " + dir);
  LoadedCheckpoint out;
  out.component = manifest.at("component").get<std::string>();
  out.config = manifest.at("config");
  out.state_hash = manifest.at("state_hash").get<std::string>();
  if (config_hash_hex(out.config) != manifest.at("config_hash").get<std::string>())
    throw std::runtime_error("load_checkpoint: config hash mismatch in " + dir);
  for (const auto& [name, meta] : manifest.at("blobs").items()) {
    ParamBlob blob;
    const std::string file = meta.at("file").get<std::string>();
    nasp::io::read_blob((fs::path(dir) / file).string(), blob.shape, blob.data);
    const auto want_shape = meta.at("shape").get<std::vector<int>>();
    if (blob.shape != want_shape)
      throw std::runtime_error("load_checkpoint: shape mismatch for blob '" + name + "'");
    const std::string got =
        nasp::io::fnv1a_hex(blob.data.data(), blob.data.size() * sizeof(double));
    if (got != meta.at("hash").get<std::string>())
      throw std::runtime_error("load_checkpoint: payload hash mismatch for blob '" + name + "'");
    out.state.emplace(name, std::move(blob));
  }
  if (state_hash_hex(out.state) != out.state_hash)
    throw std::runtime_error("load_checkpoint: state hash mismatch in " + dir);
  return out;
}

StateDict dump_params(const std::vector<std::pair<std::string, ad::Tensor>>& params) {
  StateDict out;
  for (const auto& [name, t] : params) {
    if (!t.defined()) throw std::runtime_error("dump_params: undefined tensor '" + name + "'");
    if (out.count(name)) throw std::runtime_error("dump_params: duplicate name '" + name + "'");
    out.emplace(name, ParamBlob{t.shape(), t.node()->value});
  }
  return out;
}

void load_params(const std::vector<std::pair<std::string, ad::Tensor>>& params,
                 const StateDict& state) {
  if (params.size() != state.size())
    throw std::runtime_error("load_params: parameter count mismatch");
  for (const auto& [name, t] : params) {
    auto it = state.find(name);
    if (it == state.end()) throw std::runtime_error("load_params: missing blob '" + name + "'");
    if (it->second.shape != t.shape())
      throw std::runtime_error("load_params: shape mismatch for '" + name + "'");
    t.node()->value = it->second.data;
  }
}

}  // namespace nasp::dataio
