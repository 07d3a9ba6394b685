#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "json.hpp"
#include "nasp/aqvae/train.hpp"
#include "nasp/cli/plot.hpp"
#include "nasp/cli/stages.hpp"
#include "nasp/metrics/perceptual.hpp"
#include "nasp/nextscale/train.hpp"
#include "nasp/opd/distill.hpp"
#include "stage_util.hpp"

namespace fs = std::filesystem;

namespace nasp::cli {

namespace {

// The proxy-perceptual backbone is frozen and shared by convention: the same
// seed every run, so checkpoints trained in different sessions agree on it.
constexpr std::uint32_t kBackboneSeed = 977;

void check_geometry(const aqvae::Tokenizer& tok, const dataio::Dataset& data) {
  if (tok.config().image_side != data.manifest().height ||
      tok.config().image_side != data.manifest().width)
    config_error("tokenizer image side " + std::to_string(tok.config().image_side) +
                 " does not match the dataset shape " + std::to_string(data.manifest().height) +
                 "x" + std::to_string(data.manifest().width));
}

std::ofstream open_log(const fs::path& dir) {
  std::ofstream log(dir / "log.jsonl");
  if (!log) config_error("cannot write " + (dir / "log.jsonl").string());
  return log;
}

}  // namespace

void run_train_tokenizer(const TrainTokenizerArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = load_run_config(a.config);
  const dataio::Dataset data = open_dataset(a.data);
  if (cfg.tokenizer.image_side != data.manifest().height ||
      cfg.tokenizer.image_side != data.manifest().width)
    config_error("tokenizer.image_side " + std::to_string(cfg.tokenizer.image_side) +
                 " does not match the dataset shape");

  const fs::path dir = detail::prepare_run_dir(a.out);
  detail::write_json_file(dir / "resolved_config.json",
                          {{"stage", "train-tokenizer"},
                           {"args", {{"config", a.config}, {"data", a.data}}},
                           {"config", cfg.resolved()}});

  aqvae::Tokenizer tok(cfg.tokenizer);
  const metrics::FeatureExtractor phi(1, kBackboneSeed);
  aqvae::Discriminator disc(phi, cfg.tokenizer.image_side, cfg.train_tokenizer.seed + 1);
  std::cout << "[train-tokenizer] " << cfg.train_tokenizer.epochs << " epochs over "
            << data.indices("train").size() << " train slices\n";
  const auto result = aqvae::train_tokenizer(tok, disc, phi, data, cfg.train_tokenizer);

  auto log = open_log(dir);
  Series loss{"train_loss", {}}, ssim{"val_ssim", {}};
  for (std::size_t e = 0; e < result.epochs.size(); ++e) {
    const auto& ep = result.epochs[e];
    log << nlohmann::json{{"epoch", e},
                          {"train_loss", ep.train_loss},
                          {"l_ssim", ep.l_ssim},
                          {"l_adv", ep.l_adv},
                          {"l_perc", ep.l_perc},
                          {"l_commit", ep.l_commit},
                          {"val_ssim", ep.val_ssim},
                          {"perplexity", ep.perplexity}}
               .dump()
        << "\n";
    loss.values.push_back(ep.train_loss);
    ssim.values.push_back(ep.val_ssim);
    std::cout << "[train-tokenizer] epoch " << e << " loss=" << ep.train_loss
              << " val_ssim=" << ep.val_ssim << "\n";
  }
  line_chart((dir / "loss_curve.png").string(), "tokenizer train loss", {loss}, "epoch");
  line_chart((dir / "val_ssim.png").string(), "tokenizer validation ssim", {ssim}, "epoch");

  dataio::save_checkpoint((dir / "checkpoint").string(), "tokenizer", cfg.tokenizer.to_json(),
                          tok.state());
  detail::write_json_file(dir / "metrics.json",
                          {{"best_val_ssim", result.best_val_ssim},
                           {"best_epoch", result.best_epoch},
                           {"epochs", result.epochs.size()},
                           {"wall_time_sec", detail::seconds_since(t0)}});
  std::cout << "[train-tokenizer] best val ssim " << result.best_val_ssim << " (epoch "
            << result.best_epoch << "), checkpoint at " << (dir / "checkpoint").string() << "\n";
}

void run_train_ar(const TrainARArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = load_run_config(a.config);
  const aqvae::Tokenizer tok = load_tokenizer(a.tokenizer);
  const dataio::Dataset data = open_dataset(a.data);
  check_geometry(tok, data);

  const fs::path dir = detail::prepare_run_dir(a.out);
  detail::write_json_file(
      dir / "resolved_config.json",
      {{"stage", "train-ar"},
       {"args", {{"config", a.config}, {"tokenizer", a.tokenizer}, {"data", a.data}}},
       {"config", cfg.resolved()}});

  nextscale::ARModel student(cfg.ar_model_config(tok.config(), false));
  nextscale::ARModel teacher(cfg.ar_model_config(tok.config(), true));
  student.init_context_encoder_from(tok);
  teacher.init_context_encoder_from(tok);
  std::cout << "[train-ar] " << cfg.train_ar.steps << " steps, depth " << cfg.ar.depth
            << ", embed " << cfg.ar.embed_dim << "\n";
  const auto result = nextscale::train_ar(student, &teacher, tok, data, cfg.train_ar);

  auto log = open_log(dir);
  Series s_ce{"student_ce", result.student_ce}, t_ce{"teacher_ce", result.teacher_ce};
  for (std::size_t i = 0; i < result.student_ce.size(); ++i)
    log << nlohmann::json{{"step", i},
                          {"student_ce", result.student_ce[i]},
                          {"teacher_ce", result.teacher_ce[i]}}
               .dump()
        << "\n";
  line_chart((dir / "ce_curve.png").string(), "teacher-forced cross entropy", {s_ce, t_ce},
             "step");

  const double val_student = nextscale::eval_ce(student, tok, data, "val", false);
  const double val_teacher = nextscale::eval_ce(teacher, tok, data, "val", true);
  dataio::save_checkpoint((dir / "student").string(), "ar_model", student.config().to_json(),
                          student.state());
  dataio::save_checkpoint((dir / "teacher").string(), "ar_model", teacher.config().to_json(),
                          teacher.state());
  detail::write_json_file(dir / "metrics.json",
                          {{"final_student_ce", result.final_student_ce},
                           {"final_teacher_ce", result.final_teacher_ce},
                           {"val_student_ce", val_student},
                           {"val_teacher_ce", val_teacher},
                           {"steps", result.student_ce.size()},
                           {"wall_time_sec", detail::seconds_since(t0)}});
  std::cout << "[train-ar] final student ce " << result.final_student_ce << " (val "
            << val_student << "), teacher ce " << result.final_teacher_ce << " (val "
            << val_teacher << ")\n";
}

void run_distill(const DistillArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = load_run_config(a.config);
  const aqvae::Tokenizer tok = load_tokenizer(a.tokenizer);
  nextscale::ARModel student = load_ar_model(a.student, "student");
  const nextscale::ARModel teacher = load_ar_model(a.teacher, "teacher");
  if (student.config().privileged)
    config_error("--student points at a privileged model; the rollout student must not see "
                 "fully sampled features");
  if (!teacher.config().privileged)
    config_error("--teacher points at a non-privileged model");
  const dataio::Dataset data = open_dataset(a.data);
  check_geometry(tok, data);

  const fs::path dir = detail::prepare_run_dir(a.out);
  detail::write_json_file(dir / "resolved_config.json",
                          {{"stage", "distill"},
                           {"args",
                            {{"config", a.config},
                             {"student", a.student},
                             {"teacher", a.teacher},
                             {"tokenizer", a.tokenizer},
                             {"data", a.data}}},
                           {"config", cfg.resolved()}});

  const std::uint64_t eval_seed = cfg.distill.seed ^ 0x9e3779b9ull;
  const double before = opd::eval_rollout_rkl(student, teacher, tok, data,
                                              cfg.distill.eval_split, eval_seed,
                                              cfg.distill.temperature);
  std::cout << "[distill] " << cfg.distill.steps << " steps, held-out rkl before "
            << before << "\n";
  const auto result = opd::distill(student, teacher, tok, data, cfg.distill);
  const double after = opd::eval_rollout_rkl(student, teacher, tok, data, cfg.distill.eval_split,
                                             eval_seed, cfg.distill.temperature);

  auto log = open_log(dir);
  Series rkl{"train_rkl", {}};
  for (const auto& st : result.steps) {
    log << nlohmann::json{{"step", st.step},
                          {"rkl", st.rkl},
                          {"lr", st.lr},
                          {"scale_rkl", st.scale_rkl}}
               .dump()
        << "\n";
    rkl.values.push_back(st.rkl);
  }
  line_chart((dir / "rkl_curve.png").string(), "rollout reverse kl", {rkl}, "step");
  Series held{"held_out_rkl", {}};
  for (const auto& [step, value] : result.held_out) held.values.push_back(value);
  line_chart((dir / "held_out_rkl.png").string(), "held-out rollout reverse kl", {held},
             "evaluation");

  dataio::save_checkpoint((dir / "student").string(), "ar_model", student.config().to_json(),
                          student.state());
  detail::write_json_file(dir / "metrics.json",
                          {{"before_rkl", before},
                           {"after_rkl", after},
                           {"rkl_drop", before > 0 ? (before - after) / before : 0.0},
                           {"best_step", result.best_step},
                           {"best_held_out", result.best_held_out},
                           {"teacher_hash", result.teacher_hash},
                           {"steps", result.steps.size()},
                           {"wall_time_sec", detail::seconds_since(t0)}});
  std::cout << "[distill] held-out rkl " << before << " -> " << after << " (best step "
            << result.best_step << "), student checkpoint at " << (dir / "student").string()
            << "\n";
}

}  // namespace nasp::cli
