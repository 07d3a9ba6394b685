#pragma once

#include <optional>
#include <string>
#include <vector>

#include "nasp/fourier/fourier.hpp"
#include "nasp/metrics/perceptual.hpp"

namespace nasp::metrics {

std::vector<double> magnitude(const fourier::ComplexImage& x);

// 10*log10(peak^2 / MSE), peak = max(ref); identical images return the 100 dB
// cap. Inputs are magnitude images.
double psnr_mag(const std::vector<double>& x, const std::vector<double>& ref);
double psnr(const fourier::ComplexImage& x, const fourier::ComplexImage& ref);

// Windowed SSIM: 11x11 Gaussian window sigma=1.5, K1=0.01, K2=0.03, dynamic
// range max(ref), mean over valid windows.
double ssim_mag(const std::vector<double>& x, const std::vector<double>& ref, int height,
                int width);
double ssim(const fourier::ComplexImage& x, const fourier::ComplexImage& ref);

// Differentiable SSIM on magnitude tensors [H,W]. Same constants and valid
// filtering as ssim_mag, so the value agrees with it to floating-point
// accuracy; the dynamic range comes from ref, which gets no gradient.
ad::Tensor ssim_t(const ad::Tensor& x_mag, const ad::Tensor& ref_mag);

// Pixelwise complex magnitude of a 2-channel (re, im) tensor: [2,H,W] -> [H,W].
ad::Tensor magnitude_t(const ad::Tensor& two_channel);

struct SliceRecord {
  std::string id;
  std::string pattern;
  int accel = 1;
  std::string contrast;
  double psnr = 0.0;
  double ssim = 0.0;
  std::optional<double> perceptual;  // "proxy-perceptual" unless externally configured
};

struct GroupStat {
  std::string key;  // joined grouping-field values, e.g. "gaussian_vd/t1-like"
  int n = 0;
  double psnr_mean = 0.0, psnr_std = 0.0;
  double ssim_mean = 0.0, ssim_std = 0.0;
  std::optional<double> perceptual_mean, perceptual_std;
};

struct MetricReport {
  std::vector<SliceRecord> records;  // sorted by id
  std::vector<std::string> grouping;
  std::vector<GroupStat> groups;  // sorted by key
};

struct EvalItem {
  std::string id;
  std::string pattern;
  int accel = 1;
  std::string contrast;
  fourier::ComplexImage recon;
  fourier::ComplexImage ref;
};

// Per-slice metrics plus grouped mean/std aggregates. Grouping fields may be
// any of {"pattern","contrast","accel"}; default (pattern, contrast).
MetricReport evaluate(std::vector<EvalItem> items, const FeatureExtractor* extractor = nullptr,
                      std::vector<std::string> grouping = {"pattern", "contrast"});

// Recompute aggregates from the records (used by loaders and tests).
void regroup(MetricReport& report);

// CSV: one record per row, doubles printed losslessly; JSON: aggregates.
void write_report_csv(const std::string& path, const MetricReport& report);
MetricReport read_report_csv(const std::string& path);
void write_report_json(const std::string& path, const MetricReport& report);

}  // namespace nasp::metrics
