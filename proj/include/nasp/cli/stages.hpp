#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

#include "nasp/aqvae/tokenizer.hpp"
#include "nasp/cli/run_config.hpp"
#include "nasp/dataio/dataset.hpp"
#include "nasp/nextscale/ar_model.hpp"

namespace nasp::cli {

// Stage failure carrying the process exit code: 2 config error, 3 missing
// dependency stage, 4 numerical failure.
struct CliError : std::runtime_error {
  int code;
  CliError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

[[noreturn]] void config_error(const std::string& msg);
[[noreturn]] void dependency_error(const std::string& msg);
[[noreturn]] void numeric_error(const std::string& msg);

// Every stage writes into its own run directory: resolved_config.json (the
// full config echo plus the stage flags), log.jsonl, metrics.json, and the
// stage outputs. Wall-clock fields live only in metrics.json.

struct MakeMasksArgs {
  std::string pattern = "all";  // one pattern name, or all four
  int accel = 32;
  std::string shape = "256x256";
  std::uint32_t seed = 1;
  std::string out;
};
void run_make_masks(const MakeMasksArgs& a);

struct GenDataArgs {
  std::string config;  // optional; desk defaults otherwise
  int n = -1;          // overrides data.n_train (val/test scale along)
  std::string shape;   // overrides data + tokenizer geometry, "HxW"
  long long seed = -1;
  std::string out;
};
void run_gen_data(const GenDataArgs& a);

struct TrainTokenizerArgs {
  std::string config;
  std::string data;
  std::string out;
};
void run_train_tokenizer(const TrainTokenizerArgs& a);

struct TrainARArgs {
  std::string config;
  std::string tokenizer;  // train-tokenizer run dir (or checkpoint dir)
  std::string data;
  std::string out;
};
void run_train_ar(const TrainARArgs& a);

struct DistillArgs {
  std::string config;
  std::string student;  // train-ar run dir (or checkpoint dir)
  std::string teacher;
  std::string tokenizer;
  std::string data;
  std::string out;
};
void run_distill(const DistillArgs& a);

struct ReconstructArgs {
  std::string config;
  std::string input;  // single fully sampled slice file ...
  std::string data;   // ... or a dataset directory with --split
  std::string split = "val";
  std::string models;     // directory holding tokenizer/ and student/
  std::string tokenizer;  // explicit overrides of --models
  std::string student;
  std::string decode;  // decode kind override
  double temperature = -1.0;
  int top_k = 0;
  double top_p = 0.0;
  long long decode_seed = -1;
  std::string pattern = "gaussian_vd";  // --input mode acquisition
  std::string contrast = "t1-like";
  long long mask_seed = -1;
  std::string out;
};
void run_reconstruct(const ReconstructArgs& a);

struct EvaluateArgs {
  std::string recon_dir;
  std::string ref_dir;
  std::string out;
};
void run_evaluate(const EvaluateArgs& a);

struct ReportArgs {
  std::string eval;     // evaluate run dir or metrics.csv
  std::string compare;  // optional second run for base-vs-distilled tables
  std::string out;
};
void run_report(const ReportArgs& a);

// Shared plumbing (used by the stages and the tests).
RunConfig load_run_config(const std::string& path_or_empty);
dataio::Dataset open_dataset(const std::string& dir);
aqvae::Tokenizer load_tokenizer(const std::string& dir);
nextscale::ARModel load_ar_model(const std::string& dir, const char* role_subdir);

// Full command-line entry point; returns the process exit code.
int run_cli(int argc, const char* const* argv);

}  // namespace nasp::cli
