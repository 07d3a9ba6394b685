#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nasp/dataio/phantom.hpp"
#include "nasp/fourier/fourier.hpp"

namespace nasp::dataio {

struct SampleEntry {
  std::string file;  // relative to the manifest directory
  Contrast contrast = Contrast::t1_like;
  std::string split = "train";  // train | val | test
  fourier::Pattern pattern = fourier::Pattern::cartesian_y;
  std::uint32_t mask_seed = 0;
};

struct DatasetManifest {
  int height = 0, width = 0;
  std::vector<SampleEntry> samples;
};

// manifest.json schema (version 1):
//   {"version":1, "shape":[H,W], "samples":[
//      {"file":..., "contrast":..., "split":..., "pattern":..., "mask_seed":...}, ...]}
// Load validates: version, known enum strings, split names, no file listed
// twice (split disjointness), and that every referenced slice exists and
// parses with the manifest shape.
void save_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest load_manifest(const std::string& path, bool check_files = true);

struct LevelData {
  int accel = 1;  // 32,16,8,4,2,1
  fourier::KSpaceMeasurement y;
  fourier::ComplexImage zero_fill;
};

struct PyramidSample {
  fourier::ComplexImage target;  // fully sampled ground truth
  fourier::Pattern pattern = fourier::Pattern::cartesian_y;
  Contrast contrast = Contrast::t1_like;
  std::vector<LevelData> levels;  // ordered coarse-to-fine [32,...,2,FS]
};

PyramidSample make_pyramid_sample(const fourier::ComplexImage& slice, fourier::Pattern pattern,
                                  Contrast contrast, std::uint32_t mask_seed,
                                  const fourier::CoilSensitivities& sens,
                                  bool independent_masks = false);

// Thin deterministic view over manifest samples of one split.
class Dataset {
 public:
  Dataset(DatasetManifest manifest, std::string root_dir, fourier::CoilSensitivities sens,
          bool independent_masks = false);

  std::vector<int> indices(const std::string& split) const;
  // Fisher-Yates shuffle of the split's indices, deterministic in epoch_seed.
  std::vector<int> epoch_order(const std::string& split, std::uint64_t epoch_seed) const;
  PyramidSample load(int index) const;
  const DatasetManifest& manifest() const { return manifest_; }
  const fourier::CoilSensitivities& sens() const { return sens_; }

 private:
  DatasetManifest manifest_;
  std::string root_;
  fourier::CoilSensitivities sens_;
  bool independent_;
};

}  // namespace nasp::dataio
