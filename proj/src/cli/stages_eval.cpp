#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <vector>

#include "json.hpp"
#include "nasp/cli/plot.hpp"
#include "nasp/cli/stages.hpp"
#include "nasp/core/rng.hpp"
#include "nasp/dataio/slice_io.hpp"
#include "nasp/metrics/metrics.hpp"
#include "nasp/nextscale/train.hpp"
#include "stage_util.hpp"

namespace fs = std::filesystem;

namespace nasp::cli {

namespace {

bool finite_image(const fourier::ComplexImage& img) {
  for (const auto& z : img.data)
    if (!std::isfinite(z.real()) || !std::isfinite(z.imag())) return false;
  return true;
}

std::string slice_stem(const std::string& file) { return fs::path(file).stem().string(); }

struct SliceTags {
  std::string pattern = "unknown";
  std::string contrast = "unknown";
  int accel = 32;
};

std::map<std::string, SliceTags> load_tags(const fs::path& manifest_path) {
  std::map<std::string, SliceTags> tags;
  if (!fs::exists(manifest_path)) return tags;
  const auto j = detail::read_json_file(manifest_path, true);
  for (const auto& e : j.value("slices", nlohmann::json::array())) {
    SliceTags t;
    t.pattern = e.value("pattern", t.pattern);
    t.contrast = e.value("contrast", t.contrast);
    t.accel = e.value("accel", t.accel);
    tags[slice_stem(e.at("file").get<std::string>())] = t;
  }
  return tags;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void run_reconstruct(const ReconstructArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = load_run_config(a.config);

  nextscale::DecodeStrategy strat = cfg.decode.strategy();
  if (!a.decode.empty()) strat.kind = nextscale::decode_kind_from_string(a.decode);
  if (a.temperature > 0.0) strat.temperature = a.temperature;
  if (a.top_k > 0) strat.top_k = a.top_k;
  if (a.top_p > 0.0) strat.top_p = a.top_p;
  if (a.decode_seed >= 0) strat.seed = static_cast<std::uint64_t>(a.decode_seed);

  const std::string tok_dir = !a.tokenizer.empty()
                                  ? a.tokenizer
                                  : (a.models.empty() ? "" : (fs::path(a.models) / "tokenizer").string());
  const std::string stu_dir = !a.student.empty()
                                  ? a.student
                                  : (a.models.empty() ? "" : (fs::path(a.models) / "student").string());
  if (tok_dir.empty() || stu_dir.empty())
    config_error("pass --models DIR, or --tokenizer and --student explicitly");
  const aqvae::Tokenizer tok = load_tokenizer(tok_dir);
  const nextscale::ARModel model = load_ar_model(stu_dir, "student");
  if (model.config().privileged)
    config_error("the reconstruction model must not be privileged; it conditions on the 32x "
                 "measurement alone");
  if (model.config().encoder.to_json() != tok.config().to_json())
    config_error("the student was built against a different tokenizer geometry");

  struct WorkItem {
    std::string name;
    dataio::PyramidSample sample;
  };
  std::vector<WorkItem> items;
  fourier::CoilSensitivities sens;
  if (!a.input.empty() && !a.data.empty())
    config_error("--input and --data are mutually exclusive");
  if (!a.input.empty()) {
    if (!fs::exists(a.input)) dependency_error("missing input slice " + a.input);
    const auto slice = dataio::read_slice(a.input);
    if (slice.height != tok.config().image_side || slice.width != tok.config().image_side)
      config_error("input slice shape does not match the tokenizer image side " +
                   std::to_string(tok.config().image_side));
    sens = fourier::make_coil_maps(cfg.data.coils, slice.height, slice.width, cfg.data.sens_seed);
    const std::uint32_t mask_seed =
        a.mask_seed >= 0 ? static_cast<std::uint32_t>(a.mask_seed)
                         : static_cast<std::uint32_t>(core::Rng(cfg.seed).child(300).uniform_int(
                               1u << 31));
    items.push_back({slice_stem(a.input),
                     dataio::make_pyramid_sample(slice, fourier::pattern_from_string(a.pattern),
                                                 dataio::contrast_from_string(a.contrast),
                                                 mask_seed, sens)});
  } else if (!a.data.empty()) {
    const dataio::Dataset data = open_dataset(a.data);
    if (data.manifest().height != tok.config().image_side)
      config_error("dataset shape does not match the tokenizer image side");
    sens = data.sens();
    const auto idxs = data.indices(a.split);
    if (idxs.empty()) config_error("split '" + a.split + "' has no slices");
    for (int idx : idxs)
      items.push_back({slice_stem(data.manifest().samples[static_cast<std::size_t>(idx)].file),
                       data.load(idx)});
  } else {
    config_error("pass --input FILE or --data DIR");
  }

  const fs::path dir = detail::prepare_run_dir(a.out);
  for (const char* sub : {"recon", "zf", "ref", "maps"}) fs::create_directories(dir / sub);
  detail::write_json_file(dir / "resolved_config.json",
                          {{"stage", "reconstruct"},
                           {"args",
                            {{"input", a.input},
                             {"data", a.data},
                             {"split", a.split},
                             {"models", a.models},
                             {"tokenizer", tok_dir},
                             {"student", stu_dir},
                             {"pattern", a.pattern},
                             {"contrast", a.contrast},
                             {"mask_seed", a.mask_seed}}},
                           {"decode",
                            {{"kind", nextscale::decode_kind_name(strat.kind)},
                             {"temperature", strat.temperature},
                             {"top_k", strat.top_k},
                             {"top_p", strat.top_p},
                             {"seed", strat.seed}}},
                           {"config", cfg.resolved()}});

  std::ofstream log(dir / "log.jsonl");
  nlohmann::json manifest_entries = nlohmann::json::array();
  double psnr_sum = 0.0, zf_sum = 0.0, ssim_sum = 0.0;
  for (const auto& item : items) {
    const auto& coarsest = item.sample.levels.front();
    const auto rec = nextscale::ar_reconstruct(coarsest.y, sens, tok, model, strat);
    if (!finite_image(rec.image))
      numeric_error("reconstruction of '" + item.name + "' produced non-finite values");
    const std::string file = item.name + ".mrsl";
    dataio::write_slice((dir / "recon" / file).string(), rec.image);
    dataio::write_slice((dir / "zf" / file).string(), coarsest.zero_fill);
    dataio::write_slice((dir / "ref" / file).string(), item.sample.target);
    detail::write_json_file(dir / "maps" / (item.name + ".json"),
                            nextscale::token_maps_to_json(rec.maps));
    const double p = metrics::psnr(rec.image, item.sample.target);
    const double pz = metrics::psnr(coarsest.zero_fill, item.sample.target);
    const double s = metrics::ssim(rec.image, item.sample.target);
    psnr_sum += p;
    zf_sum += pz;
    ssim_sum += s;
    manifest_entries.push_back({{"file", file},
                                {"pattern", fourier::pattern_name(item.sample.pattern)},
                                {"contrast", dataio::contrast_name(item.sample.contrast)},
                                {"accel", coarsest.accel}});
    log << nlohmann::json{{"slice", item.name},
                          {"psnr", p},
                          {"psnr_zero_fill", pz},
                          {"ssim", s}}
               .dump()
        << "\n";
  }
  detail::write_json_file(dir / "recon_manifest.json", {{"slices", manifest_entries}});
  const double n = static_cast<double>(items.size());
  detail::write_json_file(dir / "metrics.json",
                          {{"n_slices", items.size()},
                           {"psnr_mean", psnr_sum / n},
                           {"psnr_zero_fill_mean", zf_sum / n},
                           {"ssim_mean", ssim_sum / n},
                           {"wall_time_sec", detail::seconds_since(t0)}});
  std::cout << "[reconstruct] " << items.size() << " slice(s), psnr " << psnr_sum / n
            << " (zero-filled " << zf_sum / n << ") to " << dir.string() << "\n";
}

void run_evaluate(const EvaluateArgs& a) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::path recon_root(a.recon_dir);
  fs::path tags_path = recon_root / "recon_manifest.json";
  if (fs::is_directory(recon_root / "recon")) {
    recon_root = recon_root / "recon";
  } else if (fs::exists(recon_root.parent_path() / "recon_manifest.json")) {
    tags_path = recon_root.parent_path() / "recon_manifest.json";
  }
  if (!fs::is_directory(recon_root))
    dependency_error("no reconstruction directory at '" + a.recon_dir + "'");
  std::vector<std::string> names;
  for (const auto& e : fs::directory_iterator(recon_root))
    if (e.is_regular_file() && e.path().extension() == ".mrsl")
      names.push_back(e.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) dependency_error("no .mrsl slices under '" + recon_root.string() + "'");

  const auto tags = load_tags(tags_path);
  const fs::path ref_root(a.ref_dir);
  std::vector<metrics::EvalItem> items;
  for (const auto& name : names) {
    fs::path ref;
    for (const fs::path cand : {ref_root / name, ref_root / "ref" / name,
                                ref_root / "slices" / name, ref_root / "recon" / name}) {
      if (fs::exists(cand)) {
        ref = cand;
        break;
      }
    }
    if (ref.empty())
      dependency_error("reference slice '" + name + "' not found under '" + a.ref_dir + "'");
    metrics::EvalItem it;
    it.id = slice_stem(name);
    const auto tag = tags.find(it.id);
    if (tag != tags.end()) {
      it.pattern = tag->second.pattern;
      it.contrast = tag->second.contrast;
      it.accel = tag->second.accel;
    } else {
      it.pattern = it.contrast = "unknown";
      it.accel = 32;
    }
    it.recon = dataio::read_slice((recon_root / name).string());
    it.ref = dataio::read_slice(ref.string());
    items.push_back(std::move(it));
  }

  const auto report = metrics::evaluate(std::move(items));
  for (const auto& r : report.records)
    if (!std::isfinite(r.psnr) || !std::isfinite(r.ssim))
      numeric_error("metrics for slice '" + r.id + "' are non-finite");

  const fs::path dir = detail::prepare_run_dir(a.out);
  detail::write_json_file(dir / "resolved_config.json",
                          {{"stage", "evaluate"},
                           {"args", {{"recon_dir", a.recon_dir}, {"ref_dir", a.ref_dir}}}});
  metrics::write_report_csv((dir / "metrics.csv").string(), report);
  metrics::write_report_json((dir / "metrics.json").string(), report);
  double psnr_mean = 0.0, ssim_mean = 0.0;
  for (const auto& r : report.records) {
    psnr_mean += r.psnr / static_cast<double>(report.records.size());
    ssim_mean += r.ssim / static_cast<double>(report.records.size());
  }
  std::cout << "[evaluate] " << report.records.size() << " slice(s), mean psnr " << psnr_mean
            << ", mean ssim " << ssim_mean << " ("
            << detail::seconds_since(t0) << "s)\n";
}

void run_report(const ReportArgs& a) {
  const auto resolve_csv = [](const std::string& arg) {
    fs::path p(arg);
    if (p.extension() != ".csv") p /= "metrics.csv";
    if (!fs::exists(p)) dependency_error("no metrics csv at '" + p.string() + "'");
    return p;
  };
  auto base = metrics::read_report_csv(resolve_csv(a.eval).string());
  metrics::regroup(base);
  const bool comparing = !a.compare.empty();
  metrics::MetricReport other;
  if (comparing) {
    other = metrics::read_report_csv(resolve_csv(a.compare).string());
    metrics::regroup(other);
  }

  std::vector<std::string> labels;
  Series base_psnr{comparing ? "base" : "psnr", {}}, base_ssim{comparing ? "base" : "ssim", {}};
  Series cmp_psnr{"distilled", {}}, cmp_ssim{"distilled", {}};
  for (const auto& gstat : base.groups) {
    labels.push_back(gstat.key);
    base_psnr.values.push_back(gstat.psnr_mean);
    base_ssim.values.push_back(gstat.ssim_mean);
    if (comparing) {
      const auto match = std::find_if(other.groups.begin(), other.groups.end(),
                                      [&](const auto& og) { return og.key == gstat.key; });
      if (match == other.groups.end())
        config_error("group '" + gstat.key + "' is missing from --compare");
      cmp_psnr.values.push_back(match->psnr_mean);
      cmp_ssim.values.push_back(match->ssim_mean);
    }
  }

  const fs::path dir = detail::prepare_run_dir(a.out);
  detail::write_json_file(dir / "resolved_config.json",
                          {{"stage", "report"},
                           {"args", {{"eval", a.eval}, {"compare", a.compare}}}});
  std::vector<Series> psnr_series = {base_psnr}, ssim_series = {base_ssim};
  if (comparing) {
    psnr_series.push_back(cmp_psnr);
    ssim_series.push_back(cmp_ssim);
  }
  bar_chart((dir / "psnr_bars.png").string(), "psnr by pattern/contrast", labels, psnr_series);
  bar_chart((dir / "ssim_bars.png").string(), "ssim by pattern/contrast", labels, ssim_series);

  std::ofstream csv(dir / "report.csv");
  if (!csv) config_error("cannot write " + (dir / "report.csv").string());
  csv << "group,n,psnr_mean,psnr_std,ssim_mean,ssim_std";
  if (comparing) csv << ",distilled_psnr_mean,distilled_ssim_mean,delta_psnr,delta_ssim";
  csv << "\n";
  for (std::size_t i = 0; i < base.groups.size(); ++i) {
    const auto& gstat = base.groups[i];
    csv << gstat.key << "," << gstat.n << "," << fmt(gstat.psnr_mean) << ","
        << fmt(gstat.psnr_std) << "," << fmt(gstat.ssim_mean) << "," << fmt(gstat.ssim_std);
    if (comparing)
      csv << "," << fmt(cmp_psnr.values[i]) << "," << fmt(cmp_ssim.values[i]) << ","
          << fmt(cmp_psnr.values[i] - base_psnr.values[i]) << ","
          << fmt(cmp_ssim.values[i] - base_ssim.values[i]);
    csv << "\n";
  }

  const auto overall = [](const metrics::MetricReport& r) {
    double p = 0.0, s = 0.0;
    for (const auto& rec : r.records) {
      p += rec.psnr / static_cast<double>(r.records.size());
      s += rec.ssim / static_cast<double>(r.records.size());
    }
    return std::pair<double, double>(p, s);
  };
  const auto [bp, bs] = overall(base);
  nlohmann::json summary = {{"n_slices", base.records.size()},
                            {"psnr_mean", bp},
                            {"ssim_mean", bs},
                            {"groups", base.groups.size()}};
  if (comparing) {
    const auto [cp, cs] = overall(other);
    summary["distilled_psnr_mean"] = cp;
    summary["distilled_ssim_mean"] = cs;
    summary["delta_psnr"] = cp - bp;
    summary["delta_ssim"] = cs - bs;
  }
  detail::write_json_file(dir / "metrics.json", summary);
  std::cout << "[report] " << base.groups.size() << " group(s) to " << dir.string() << "\n";
}

}  // namespace nasp::cli
