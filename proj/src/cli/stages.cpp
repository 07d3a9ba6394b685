#include "nasp/cli/stages.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <vector>

#include "json.hpp"
#include "nasp/cli/plot.hpp"
#include "nasp/core/rng.hpp"
#include "nasp/dataio/slice_io.hpp"
#include "nasp/fourier/fourier.hpp"
#include "stage_util.hpp"

namespace fs = std::filesystem;

namespace nasp::cli {

void config_error(const std::string& msg) { throw CliError(2, "config: " + msg); }
void dependency_error(const std::string& msg) { throw CliError(3, "dependency: " + msg); }
void numeric_error(const std::string& msg) { throw CliError(4, "numerical: " + msg); }

namespace detail {

std::pair<int, int> parse_shape(const std::string& s) {
  const auto x = s.find('x');
  int h = 0, w = 0;
  try {
    h = std::stoi(s.substr(0, x));
    w = std::stoi(s.substr(x + 1));
  } catch (const std::exception&) {
    h = 0;
  }
  if (x == std::string::npos || h <= 0 || w <= 0)
    config_error("--shape expects HxW with positive sides, got '" + s + "'");
  return {h, w};
}

fs::path prepare_run_dir(const std::string& out) {
  if (out.empty()) config_error("--out must name a directory");
  fs::path dir(out);
  fs::create_directories(dir);
  return dir;
}

void write_json_file(const fs::path& path, const nlohmann::json& j) {
  std::ofstream f(path);
  if (!f) config_error("cannot write " + path.string());
  f << j.dump(2) << "\n";
}

nlohmann::json read_json_file(const fs::path& path, bool artifact) {
  std::ifstream f(path);
  if (!f) {
    if (artifact) dependency_error("missing " + path.string());
    config_error("cannot open " + path.string());
  }
  try {
    nlohmann::json j;
    f >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    config_error("cannot parse " + path.string() + ": " + e.what());
  }
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void write_mask_png(const fs::path& path, const fourier::SamplingMask& m) {
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(m.height) * m.width * 3);
  for (std::size_t i = 0; i < m.selected.size(); ++i) {
    const std::uint8_t v = m.selected[i] ? 245 : 25;
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = v;
  }
  write_png_rgb(path.string(), m.width, m.height, rgb);
}

// Checkpoint directories may be passed directly or via their run directory.
fs::path find_checkpoint(const std::string& dir, const char* subdir) {
  const fs::path base(dir);
  for (const fs::path cand : {base, base / subdir}) {
    if (fs::exists(cand / "manifest.json")) return cand;
  }
  dependency_error("no checkpoint manifest under '" + dir + "' (run the producing stage first)");
}

}  // namespace detail

using detail::parse_shape;
using detail::prepare_run_dir;
using detail::read_json_file;
using detail::seconds_since;
using detail::write_json_file;

RunConfig load_run_config(const std::string& path_or_empty) {
  if (path_or_empty.empty()) return RunConfig::from_json(nlohmann::json::object());
  return RunConfig::from_json(read_json_file(path_or_empty, false));
}

dataio::Dataset open_dataset(const std::string& dir) {
  const fs::path base(dir);
  if (!fs::exists(base / "manifest.json"))
    dependency_error("no dataset manifest under '" + dir + "' (run gen-data first)");
  const nlohmann::json rc = read_json_file(base / "resolved_config.json", true);
  if (!rc.contains("config")) config_error(dir + "/resolved_config.json lacks a config echo");
  const RunConfig cfg = RunConfig::from_json(rc.at("config"));
  const auto manifest = dataio::load_manifest((base / "manifest.json").string(), true);
  const auto sens = fourier::make_coil_maps(cfg.data.coils, manifest.height, manifest.width,
                                            cfg.data.sens_seed);
  return dataio::Dataset(manifest, base.string(), sens);
}

aqvae::Tokenizer load_tokenizer(const std::string& dir) {
  const fs::path ck_dir = detail::find_checkpoint(dir, "checkpoint");
  const auto ck = dataio::load_checkpoint(ck_dir.string());
  if (ck.component != "tokenizer")
    dependency_error("checkpoint at '" + ck_dir.string() + "' holds component '" + ck.component +
                     "', expected tokenizer");
  aqvae::Tokenizer tok(aqvae::TokenizerConfig::from_json(ck.config));
  tok.load_state(ck.state);
  return tok;
}

nextscale::ARModel load_ar_model(const std::string& dir, const char* role_subdir) {
  const fs::path ck_dir = detail::find_checkpoint(dir, role_subdir);
  const auto ck = dataio::load_checkpoint(ck_dir.string());
  if (ck.component != "ar_model")
    dependency_error("checkpoint at '" + ck_dir.string() + "' holds component '" + ck.component +
                     "', expected ar_model");
  nextscale::ARModel model(nextscale::ARModelConfig::from_json(ck.config));
  model.load_state(ck.state);
  return model;
}

void run_make_masks(const MakeMasksArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const auto [h, w] = parse_shape(a.shape);
  if (a.accel < 1) config_error("--accel must be a positive acceleration factor");
  std::vector<fourier::Pattern> patterns;
  if (a.pattern == "all") {
    patterns = {fourier::Pattern::cartesian_x, fourier::Pattern::cartesian_y,
                fourier::Pattern::radial, fourier::Pattern::gaussian_vd};
  } else {
    try {
      patterns = {fourier::pattern_from_string(a.pattern)};
    } catch (const std::invalid_argument& e) {
      config_error(e.what());
    }
  }

  const fs::path dir = prepare_run_dir(a.out);
  nlohmann::json entries = nlohmann::json::array();
  for (const auto p : patterns) {
    const auto mask = fourier::make_mask(p, a.accel, h, w, a.seed);
    const std::string stem = "mask_" + fourier::pattern_name(p) + "_r" + std::to_string(a.accel);
    fourier::write_mask((dir / (stem + ".mrmk")).string(), mask);
    detail::write_mask_png(dir / (stem + ".png"), mask);
    entries.push_back({{"pattern", fourier::pattern_name(p)},
                       {"file", stem + ".mrmk"},
                       {"png", stem + ".png"},
                       {"set_bytes", mask.count()},
                       {"budget", static_cast<int>(std::lround(static_cast<double>(h) * w /
                                                               a.accel))}});
  }
  write_json_file(dir / "resolved_config.json",
                  {{"stage", "make-masks"},
                   {"args",
                    {{"pattern", a.pattern},
                     {"accel", a.accel},
                     {"shape", a.shape},
                     {"seed", a.seed}}}});
  write_json_file(dir / "metrics.json",
                  {{"masks", entries}, {"wall_time_sec", seconds_since(t0)}});
  std::cout << "[make-masks] wrote " << patterns.size() << " mask(s) at " << h << "x" << w
            << " R=" << a.accel << " to " << dir.string() << "\n";
}

void run_gen_data(const GenDataArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  nlohmann::json user = nlohmann::json::object();
  if (!a.config.empty()) user = read_json_file(a.config, false);
  if (a.seed >= 0) user["seed"] = static_cast<std::uint64_t>(a.seed);
  if (a.n >= 0) {
    if (a.n < 1) config_error("--n must be at least 1");
    user["data"]["n_train"] = a.n;
    user["data"]["n_val"] = std::max(1, a.n / 8);
    user["data"]["n_test"] = std::max(1, a.n / 8);
  }
  if (!a.shape.empty()) {
    const auto [h, w] = parse_shape(a.shape);
    user["data"]["height"] = h;
    user["data"]["width"] = w;
    user["tokenizer"]["image_side"] = h;
  }
  const RunConfig cfg = RunConfig::from_json(user);

  const fs::path dir = prepare_run_dir(a.out);
  fs::create_directories(dir / "slices");
  dataio::DatasetManifest m;
  m.height = cfg.data.height;
  m.width = cfg.data.width;
  const core::Rng root(cfg.seed);
  int g = 0;  // global slice index; drives the pattern/contrast rotation
  std::uint64_t total_bytes = 0;
  const std::vector<std::pair<std::string, int>> splits = {
      {"train", cfg.data.n_train}, {"val", cfg.data.n_val}, {"test", cfg.data.n_test}};
  for (const auto& [split, count] : splits) {
    for (int i = 0; i < count; ++i, ++g) {
      const auto contrast =
          dataio::contrast_from_string(cfg.data.contrasts[g % cfg.data.contrasts.size()]);
      const auto pattern =
          fourier::pattern_from_string(cfg.data.patterns[g % cfg.data.patterns.size()]);
      const auto spec = dataio::phantom_spec_for(
          contrast, cfg.data.height, cfg.data.width,
          static_cast<std::uint32_t>(root.child(100 + g).uniform_int(1u << 31)));
      const auto img = dataio::gen_phantom(spec);
      char name[32];
      std::snprintf(name, sizeof(name), "%s_%03d.mrsl", split.c_str(), i);
      const std::string rel = std::string("slices/") + name;
      dataio::write_slice((dir / rel).string(), img);
      total_bytes += fs::file_size(dir / rel);
      dataio::SampleEntry e;
      e.file = rel;
      e.contrast = contrast;
      e.split = split;
      e.pattern = pattern;
      e.mask_seed = static_cast<std::uint32_t>(root.child(200 + g).uniform_int(1u << 31));
      m.samples.push_back(e);
    }
  }
  dataio::save_manifest((dir / "manifest.json").string(), m);
  write_json_file(dir / "resolved_config.json",
                  {{"stage", "gen-data"},
                   {"args", {{"n", a.n}, {"shape", a.shape}, {"seed", a.seed}}},
                   {"config", cfg.resolved()}});
  write_json_file(dir / "metrics.json", {{"n_train", cfg.data.n_train},
                                         {"n_val", cfg.data.n_val},
                                         {"n_test", cfg.data.n_test},
                                         {"slice_bytes", total_bytes},
                                         {"wall_time_sec", seconds_since(t0)}});
  std::cout << "[gen-data] wrote " << g << " slices (" << cfg.data.n_train << " train / "
            << cfg.data.n_val << " val / " << cfg.data.n_test << " test) to " << dir.string()
            << "\n";
}

}  // namespace nasp::cli
