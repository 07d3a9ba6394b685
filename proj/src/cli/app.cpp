#include <algorithm>
#include <cctype>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "nasp/cli/stages.hpp"

namespace nasp::cli {

namespace {

// Non-finite training or reconstruction values surface as exit code 4; other
// unexpected failures stay generic.
int failure_code(const std::exception& e) {
  std::string m = e.what();
  std::transform(m.begin(), m.end(), m.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return (m.find("finite") != std::string::npos || m.find("nan") != std::string::npos) ? 4 : 1;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{
      "Discrete autoregressive MRI reconstruction pipeline. Exit codes: 0 ok, 2 config error, "
      "3 missing dependency stage, 4 numerical failure. NASP_SEED overrides the config seed."};
  app.require_subcommand(1);

  MakeMasksArgs mm;
  auto* c_mm = app.add_subcommand("make-masks", "Write undersampling masks with PNG previews");
  c_mm->add_option("--pattern", mm.pattern, "cartesian_x|cartesian_y|radial|gaussian_vd|all")
      ->capture_default_str();
  c_mm->add_option("--accel", mm.accel, "Acceleration factor R")->capture_default_str();
  c_mm->add_option("--shape", mm.shape, "Mask shape HxW")->capture_default_str();
  c_mm->add_option("--seed", mm.seed, "Mask seed")->capture_default_str();
  c_mm->add_option("--out", mm.out, "Output directory")->required();

  GenDataArgs gd;
  auto* c_gd = app.add_subcommand("gen-data", "Generate a phantom dataset with a manifest");
  c_gd->add_option("--config", gd.config, "Run config file (desk defaults otherwise)");
  c_gd->add_option("--n", gd.n, "Training slices (val/test scale along)");
  c_gd->add_option("--shape", gd.shape, "Slice shape HxW");
  c_gd->add_option("--seed", gd.seed, "Override the top-level seed");
  c_gd->add_option("--out", gd.out, "Output directory")->required();

  TrainTokenizerArgs tt;
  auto* c_tt = app.add_subcommand("train-tokenizer", "Train the multi-input quantized tokenizer");
  c_tt->add_option("--config", tt.config, "Run config file")->required();
  c_tt->add_option("--data", tt.data, "gen-data directory")->required();
  c_tt->add_option("--out", tt.out, "Run directory")->required();

  TrainARArgs ta;
  auto* c_ta = app.add_subcommand("train-ar", "Train the scale-autoregressive student + teacher");
  c_ta->add_option("--config", ta.config, "Run config file")->required();
  c_ta->add_option("--tokenizer", ta.tokenizer, "train-tokenizer run directory")->required();
  c_ta->add_option("--data", ta.data, "gen-data directory")->required();
  c_ta->add_option("--out", ta.out, "Run directory")->required();

  DistillArgs di;
  auto* c_di = app.add_subcommand("distill", "On-policy reverse-KL distillation of the student");
  c_di->add_option("--config", di.config, "Run config file")->required();
  c_di->add_option("--student", di.student, "Student checkpoint (or train-ar run) directory")
      ->required();
  c_di->add_option("--teacher", di.teacher, "Teacher checkpoint (or train-ar run) directory")
      ->required();
  c_di->add_option("--tokenizer", di.tokenizer, "train-tokenizer run directory")->required();
  c_di->add_option("--data", di.data, "gen-data directory")->required();
  c_di->add_option("--out", di.out, "Run directory")->required();

  ReconstructArgs rc;
  auto* c_rc = app.add_subcommand("reconstruct", "Reconstruct slices from 32x measurements");
  c_rc->add_option("--config", rc.config, "Run config file (desk defaults otherwise)");
  c_rc->add_option("--input", rc.input, "One fully sampled .mrsl slice to undersample");
  c_rc->add_option("--data", rc.data, "gen-data directory (used with --split)");
  c_rc->add_option("--split", rc.split, "Dataset split to reconstruct")->capture_default_str();
  c_rc->add_option("--models", rc.models, "Directory holding tokenizer/ and student/");
  c_rc->add_option("--tokenizer", rc.tokenizer, "Tokenizer checkpoint directory");
  c_rc->add_option("--student", rc.student, "Student checkpoint directory");
  c_rc->add_option("--decode", rc.decode, "argmax|multinomial|top_k_p");
  c_rc->add_option("--temperature", rc.temperature, "Decode temperature override");
  c_rc->add_option("--top-k", rc.top_k, "top_k_p k override");
  c_rc->add_option("--top-p", rc.top_p, "top_k_p cumulative mass override");
  c_rc->add_option("--decode-seed", rc.decode_seed, "Sampling seed override");
  c_rc->add_option("--pattern", rc.pattern, "--input mode sampling pattern")
      ->capture_default_str();
  c_rc->add_option("--contrast", rc.contrast, "--input mode contrast tag")->capture_default_str();
  c_rc->add_option("--mask-seed", rc.mask_seed, "--input mode mask seed");
  c_rc->add_option("--out", rc.out, "Run directory")->required();

  EvaluateArgs ev;
  auto* c_ev = app.add_subcommand("evaluate", "Score reconstructions against references");
  c_ev->add_option("--recon-dir", ev.recon_dir, "Reconstruction directory")->required();
  c_ev->add_option("--ref-dir", ev.ref_dir, "Reference slice directory")->required();
  c_ev->add_option("--out", ev.out, "Run directory")->required();

  ReportArgs rp;
  auto* c_rp = app.add_subcommand("report", "Render metric tables and bar charts");
  c_rp->add_option("--eval", rp.eval, "evaluate run directory (or metrics.csv)")->required();
  c_rp->add_option("--compare", rp.compare, "Second evaluate run for base-vs-distilled tables");
  c_rp->add_option("--out", rp.out, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc_exit = app.exit(e);
    return rc_exit == 0 ? 0 : 2;
  }

  try {
    if (*c_mm) run_make_masks(mm);
    if (*c_gd) run_gen_data(gd);
    if (*c_tt) run_train_tokenizer(tt);
    if (*c_ta) run_train_ar(ta);
    if (*c_di) run_distill(di);
    if (*c_rc) run_reconstruct(rc);
    if (*c_ev) run_evaluate(ev);
    if (*c_rp) run_report(rp);
  } catch (const CliError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return e.code;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return failure_code(e);
  }
  return 0;
}

}  // namespace nasp::cli
