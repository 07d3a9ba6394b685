#include "nasp/dataio/dataset.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "nasp/core/rng.hpp"
#include "nasp/dataio/slice_io.hpp"

namespace nasp::dataio {

namespace fs = std::filesystem;
using nlohmann::json;

void save_manifest(const std::string& path, const DatasetManifest& m) {
  json j;
  j["version"] = 1;
  j["shape"] = {m.height, m.width};
  j["samples"] = json::array();
  for (const SampleEntry& s : m.samples) {
    j["samples"].push_back({{"file", s.file},
                            {"contrast", contrast_name(s.contrast)},
                            {"split", s.split},
                            {"pattern", fourier::pattern_name(s.pattern)},
                            {"mask_seed", s.mask_seed}});
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_manifest: cannot open " + path);
  f << j.dump(2) << "\n";
}

DatasetManifest load_manifest(const std::string& path, bool check_files) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_manifest: cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("load_manifest: invalid JSON in " + path + ": " + e.what());
  }
  if (!j.contains("version") || j["version"] != 1)
    throw std::runtime_error("load_manifest: unsupported manifest version in " + path);
  DatasetManifest m;
  m.height = j.at("shape").at(0).get<int>();
  m.width = j.at("shape").at(1).get<int>();
  std::set<std::string> seen;
  const fs::path root = fs::path(path).parent_path();
  for (const json& s : j.at("samples")) {
    SampleEntry e;
    e.file = s.at("file").get<std::string>();
    e.contrast = contrast_from_string(s.at("contrast").get<std::string>());
    e.split = s.at("split").get<std::string>();
    if (e.split != "train" && e.split != "val" && e.split != "test")
      throw std::runtime_error("load_manifest: unknown split '" + e.split + "'");
    e.pattern = fourier::pattern_from_string(s.at("pattern").get<std::string>());
    e.mask_seed = s.at("mask_seed").get<std::uint32_t>();
    if (!seen.insert(e.file).second)
      throw std::runtime_error("load_manifest: file listed twice (splits must be disjoint): " +
                               e.file);
    if (check_files) {
      const fourier::ComplexImage img = read_slice((root / e.file).string());
      if (img.height != m.height || img.width != m.width)
        throw std::runtime_error("load_manifest: " + e.file + " shape mismatch with manifest");
    }
    m.samples.push_back(std::move(e));
  }
  return m;
}

PyramidSample make_pyramid_sample(const fourier::ComplexImage& slice, fourier::Pattern pattern,
                                  Contrast contrast, std::uint32_t mask_seed,
                                  const fourier::CoilSensitivities& sens,
                                  bool independent_masks) {
  PyramidSample out;
  out.target = slice;
  out.pattern = pattern;
  out.contrast = contrast;
  const fourier::AccelerationPyramid pyr =
      fourier::make_pyramid(pattern, slice.height, slice.width, mask_seed, independent_masks);
  out.levels.resize(pyr.masks.size());
  for (std::size_t i = 0; i < pyr.masks.size(); ++i) {
    out.levels[i].accel = pyr.schedule[i];
    out.levels[i].y = fourier::forward(slice, sens, pyr.masks[i]);
    out.levels[i].zero_fill = fourier::zero_filled(out.levels[i].y, sens);
  }
  return out;
}

Dataset::Dataset(DatasetManifest manifest, std::string root_dir, fourier::CoilSensitivities sens,
                 bool independent_masks)
    : manifest_(std::move(manifest)),
      root_(std::move(root_dir)),
      sens_(std::move(sens)),
      independent_(independent_masks) {}

std::vector<int> Dataset::indices(const std::string& split) const {
  std::vector<int> out;
  for (std::size_t i = 0; i < manifest_.samples.size(); ++i)
    if (manifest_.samples[i].split == split) out.push_back(static_cast<int>(i));
  return out;
}

std::vector<int> Dataset::epoch_order(const std::string& split, std::uint64_t epoch_seed) const {
  std::vector<int> idx = indices(split);
  nasp::core::Rng rng(epoch_seed);
  for (std::size_t k = 0; k + 1 < idx.size(); ++k) {
    const std::size_t j = k + static_cast<std::size_t>(
                                  rng.uniform_int(static_cast<int>(idx.size() - k)));
    std::swap(idx[k], idx[j]);
  }
  return idx;
}

PyramidSample Dataset::load(int index) const {
  const SampleEntry& e = manifest_.samples.at(static_cast<std::size_t>(index));
  const fourier::ComplexImage slice = read_slice((fs::path(root_) / e.file).string());
  return make_pyramid_sample(slice, e.pattern, e.contrast, e.mask_seed, sens_, independent_);
}

}  // namespace nasp::dataio
