#include "nasp/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace nasp::metrics {

std::vector<double> magnitude(const fourier::ComplexImage& x) {
  std::vector<double> m(x.data.size());
  for (std::size_t k = 0; k < m.size(); ++k) m[k] = std::abs(x.data[k]);
  return m;
}

double psnr_mag(const std::vector<double>& x, const std::vector<double>& ref) {
  if (x.size() != ref.size() || x.empty())
    throw std::invalid_argument("psnr: shape mismatch");
  double mse = 0.0, peak = 0.0;
  for (std::size_t k = 0; k < x.size(); ++k) {
    const double d = x[k] - ref[k];
    mse += d * d;
    peak = std::max(peak, ref[k]);
  }
  mse /= static_cast<double>(x.size());
  if (mse == 0.0) return 100.0;
  const double db = 10.0 * std::log10(peak * peak / mse);
  return std::min(db, 100.0);
}

double psnr(const fourier::ComplexImage& x, const fourier::ComplexImage& ref) {
  if (x.height != ref.height || x.width != ref.width)
    throw std::invalid_argument("psnr: shape mismatch");
  return psnr_mag(magnitude(x), magnitude(ref));
}

namespace {

constexpr int kWin = 11;
constexpr double kSigma = 1.5;
constexpr double kK1 = 0.01;
constexpr double kK2 = 0.03;

const std::vector<double>& gauss_kernel1d() {
  static const std::vector<double> k = [] {
    std::vector<double> g(kWin);
    double s = 0.0;
    for (int i = 0; i < kWin; ++i) {
      const double d = i - (kWin - 1) / 2.0;
      g[static_cast<std::size_t>(i)] = std::exp(-d * d / (2.0 * kSigma * kSigma));
      s += g[static_cast<std::size_t>(i)];
    }
    for (auto& v : g) v /= s;
    return g;
  }();
  return k;
}

// Separable valid-mode Gaussian filter: H x W -> (H-10) x (W-10).
std::vector<double> gauss_filter(const std::vector<double>& img, int H, int W) {
  const std::vector<double>& g = gauss_kernel1d();
  const int OW = W - kWin + 1, OH = H - kWin + 1;
  std::vector<double> tmp(static_cast<std::size_t>(H) * OW);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < OW; ++j) {
      double s = 0.0;
      for (int t = 0; t < kWin; ++t) s += g[static_cast<std::size_t>(t)] * img[static_cast<std::size_t>(i) * W + j + t];
      tmp[static_cast<std::size_t>(i) * OW + j] = s;
    }
  std::vector<double> out(static_cast<std::size_t>(OH) * OW);
  for (int i = 0; i < OH; ++i)
    for (int j = 0; j < OW; ++j) {
      double s = 0.0;
      for (int t = 0; t < kWin; ++t) s += g[static_cast<std::size_t>(t)] * tmp[static_cast<std::size_t>(i + t) * OW + j];
      out[static_cast<std::size_t>(i) * OW + j] = s;
    }
  return out;
}

}  // namespace

double ssim_mag(const std::vector<double>& x, const std::vector<double>& ref, int height,
                int width) {
  if (x.size() != ref.size() ||
      static_cast<std::int64_t>(x.size()) != static_cast<std::int64_t>(height) * width)
    throw std::invalid_argument("ssim: shape mismatch");
  if (height < kWin || width < kWin)
    throw std::invalid_argument("ssim: image smaller than the 11x11 window");
  double peak = 0.0;
  for (double v : ref) peak = std::max(peak, v);
  const double L = std::max(peak, 1e-12);
  const double c1 = (kK1 * L) * (kK1 * L), c2 = (kK2 * L) * (kK2 * L);
  std::vector<double> xx(x.size()), rr(x.size()), xr(x.size());
  for (std::size_t k = 0; k < x.size(); ++k) {
    xx[k] = x[k] * x[k];
    rr[k] = ref[k] * ref[k];
    xr[k] = x[k] * ref[k];
  }
  const std::vector<double> mx = gauss_filter(x, height, width);
  const std::vector<double> mr = gauss_filter(ref, height, width);
  const std::vector<double> mxx = gauss_filter(xx, height, width);
  const std::vector<double> mrr = gauss_filter(rr, height, width);
  const std::vector<double> mxr = gauss_filter(xr, height, width);
  double acc = 0.0;
  for (std::size_t k = 0; k < mx.size(); ++k) {
    const double sxx = mxx[k] - mx[k] * mx[k];
    const double srr = mrr[k] - mr[k] * mr[k];
    const double sxr = mxr[k] - mx[k] * mr[k];
    acc += ((2.0 * mx[k] * mr[k] + c1) * (2.0 * sxr + c2)) /
           ((mx[k] * mx[k] + mr[k] * mr[k] + c1) * (sxx + srr + c2));
  }
  return acc / static_cast<double>(mx.size());
}

double ssim(const fourier::ComplexImage& x, const fourier::ComplexImage& ref) {
  if (x.height != ref.height || x.width != ref.width)
    throw std::invalid_argument("ssim: shape mismatch");
  return ssim_mag(magnitude(x), magnitude(ref), x.height, x.width);
}

namespace {

// Valid-mode separable Gaussian filtering expressed as two conv2d nodes, in
// the same row-then-column order as gauss_filter so sums match bitwise-close.
ad::Tensor gauss_filter_t(const ad::Tensor& img) {
  static const ad::Tensor row = [] {
    std::vector<double> k = gauss_kernel1d();
    return ad::Tensor::from_data({1, 1, 1, kWin}, std::move(k));
  }();
  static const ad::Tensor col = [] {
    std::vector<double> k = gauss_kernel1d();
    return ad::Tensor::from_data({1, 1, kWin, 1}, std::move(k));
  }();
  static const ad::Tensor zero_bias = ad::Tensor::zeros({1});
  ad::Tensor x3 = ad::reshape(img, {1, img.dim(0), img.dim(1)});
  ad::Tensor tmp = ad::conv2d(x3, row, zero_bias, 1, 0);
  ad::Tensor out = ad::conv2d(tmp, col, zero_bias, 1, 0);
  return ad::reshape(out, {out.dim(1), out.dim(2)});
}

}  // namespace

ad::Tensor ssim_t(const ad::Tensor& x_mag, const ad::Tensor& ref_mag) {
  if (x_mag.ndim() != 2 || ref_mag.ndim() != 2 || x_mag.shape() != ref_mag.shape())
    throw std::invalid_argument("ssim_t: expected matching [H,W] tensors");
  if (x_mag.dim(0) < kWin || x_mag.dim(1) < kWin)
    throw std::invalid_argument("ssim_t: image smaller than the 11x11 window");
  double peak = 0.0;
  for (std::int64_t k = 0; k < ref_mag.numel(); ++k) peak = std::max(peak, ref_mag.data()[k]);
  const double L = std::max(peak, 1e-12);
  const double c1 = (kK1 * L) * (kK1 * L), c2 = (kK2 * L) * (kK2 * L);
  ad::Tensor ref = ref_mag.detach();
  ad::Tensor mx = gauss_filter_t(x_mag);
  ad::Tensor mr = gauss_filter_t(ref);
  ad::Tensor mxx = gauss_filter_t(ad::square(x_mag));
  ad::Tensor mrr = gauss_filter_t(ad::square(ref));
  ad::Tensor mxr = gauss_filter_t(ad::mul(x_mag, ref));
  ad::Tensor sxx = ad::sub(mxx, ad::square(mx));
  ad::Tensor srr = ad::sub(mrr, ad::square(mr));
  ad::Tensor sxr = ad::sub(mxr, ad::mul(mx, mr));
  ad::Tensor num = ad::mul(ad::sadd(ad::smul(ad::mul(mx, mr), 2.0), c1),
                           ad::sadd(ad::smul(sxr, 2.0), c2));
  ad::Tensor den = ad::mul(ad::sadd(ad::add(ad::square(mx), ad::square(mr)), c1),
                           ad::sadd(ad::add(sxx, srr), c2));
  return ad::mean(ad::div(num, den));
}

ad::Tensor magnitude_t(const ad::Tensor& two_channel) {
  if (two_channel.ndim() != 3 || two_channel.dim(0) != 2)
    throw std::invalid_argument("magnitude_t: expected [2,H,W]");
  const int h = two_channel.dim(1), w = two_channel.dim(2);
  ad::Tensor re = ad::reshape(ad::narrow_dim0(two_channel, 0, 1), {h, w});
  ad::Tensor im = ad::reshape(ad::narrow_dim0(two_channel, 1, 1), {h, w});
  return ad::sqrt(ad::add(ad::square(re), ad::square(im)), 1e-24);
}

namespace {

std::string group_key(const SliceRecord& r, const std::vector<std::string>& grouping) {
  std::string key;
  for (std::size_t i = 0; i < grouping.size(); ++i) {
    if (i) key += "/";
    const std::string& f = grouping[i];
    if (f == "pattern") key += r.pattern;
    else if (f == "contrast") key += r.contrast;
    else if (f == "accel") key += "R" + std::to_string(r.accel);
    else throw std::invalid_argument("evaluate: unknown grouping field '" + f + "'");
  }
  return key;
}

void mean_std(const std::vector<double>& v, double& mean, double& stddev) {
  mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  stddev = 0.0;
  if (v.size() > 1) {
    for (double x : v) stddev += (x - mean) * (x - mean);
    stddev = std::sqrt(stddev / static_cast<double>(v.size() - 1));
  }
}

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

void regroup(MetricReport& report) {
  std::map<std::string, std::vector<const SliceRecord*>> by_key;
  for (const SliceRecord& r : report.records) by_key[group_key(r, report.grouping)].push_back(&r);
  report.groups.clear();
  for (const auto& [key, members] : by_key) {
    GroupStat g;
    g.key = key;
    g.n = static_cast<int>(members.size());
    std::vector<double> ps, ss, pc;
    bool all_perc = true;
    for (const SliceRecord* r : members) {
      ps.push_back(r->psnr);
      ss.push_back(r->ssim);
      if (r->perceptual) pc.push_back(*r->perceptual);
      else all_perc = false;
    }
    mean_std(ps, g.psnr_mean, g.psnr_std);
    mean_std(ss, g.ssim_mean, g.ssim_std);
    if (all_perc && !pc.empty()) {
      double m = 0.0, s = 0.0;
      mean_std(pc, m, s);
      g.perceptual_mean = m;
      g.perceptual_std = s;
    }
    report.groups.push_back(std::move(g));
  }
}

MetricReport evaluate(std::vector<EvalItem> items, const FeatureExtractor* extractor,
                      std::vector<std::string> grouping) {
  std::sort(items.begin(), items.end(),
            [](const EvalItem& a, const EvalItem& b) { return a.id < b.id; });
  std::set<std::string> ids;
  MetricReport report;
  report.grouping = std::move(grouping);
  for (const EvalItem& it : items) {
    if (!ids.insert(it.id).second)
      throw std::invalid_argument("evaluate: duplicate slice id '" + it.id + "'");
    if (it.recon.height != it.ref.height || it.recon.width != it.ref.width)
      throw std::invalid_argument("evaluate: shape mismatch for slice '" + it.id + "'");
    SliceRecord r;
    r.id = it.id;
    r.pattern = it.pattern;
    r.accel = it.accel;
    r.contrast = it.contrast;
    const std::vector<double> xm = magnitude(it.recon);
    const std::vector<double> rm = magnitude(it.ref);
    r.psnr = psnr_mag(xm, rm);
    r.ssim = ssim_mag(xm, rm, it.recon.height, it.recon.width);
    if (extractor)
      r.perceptual = perceptual_distance(xm, rm, it.recon.height, it.recon.width, *extractor);
    report.records.push_back(std::move(r));
  }
  regroup(report);
  return report;
}

void write_report_csv(const std::string& path, const MetricReport& report) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_report_csv: cannot open " + path);
  f << "id,pattern,accel,contrast,psnr,ssim,perceptual\n";
  for (const SliceRecord& r : report.records) {
    for (const std::string* s : {&r.id, &r.pattern, &r.contrast})
      if (s->find(',') != std::string::npos)
        throw std::invalid_argument("write_report_csv: field contains a comma: " + *s);
    f << r.id << "," << r.pattern << "," << r.accel << "," << r.contrast << ","
      << fmt_double(r.psnr) << "," << fmt_double(r.ssim) << ","
      << (r.perceptual ? fmt_double(*r.perceptual) : std::string()) << "\n";
  }
}

MetricReport read_report_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("read_report_csv: cannot open " + path);
  std::string line;
  if (!std::getline(f, line) || line != "id,pattern,accel,contrast,psnr,ssim,perceptual")
    throw std::runtime_error("read_report_csv: unexpected header in " + path);
  MetricReport report;
  report.grouping = {"pattern", "contrast"};
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (line.back() == ',') cells.push_back("");
    if (cells.size() != 7)
      throw std::runtime_error("read_report_csv: malformed row: " + line);
    SliceRecord r;
    r.id = cells[0];
    r.pattern = cells[1];
    r.accel = std::stoi(cells[2]);
    r.contrast = cells[3];
    r.psnr = std::strtod(cells[4].c_str(), nullptr);
    r.ssim = std::strtod(cells[5].c_str(), nullptr);
    if (!cells[6].empty()) r.perceptual = std::strtod(cells[6].c_str(), nullptr);
    report.records.push_back(std::move(r));
  }
  regroup(report);
  return report;
}

void write_report_json(const std::string& path, const MetricReport& report) {
  nlohmann::json j;
  j["grouping"] = report.grouping;
  j["n_records"] = report.records.size();
  j["groups"] = nlohmann::json::array();
  for (const GroupStat& g : report.groups) {
    nlohmann::json e = {{"key", g.key},         {"n", g.n},
                        {"psnr_mean", g.psnr_mean}, {"psnr_std", g.psnr_std},
                        {"ssim_mean", g.ssim_mean}, {"ssim_std", g.ssim_std}};
    if (g.perceptual_mean) {
      e["perceptual_mean"] = *g.perceptual_mean;
      e["perceptual_std"] = *g.perceptual_std;
    }
    j["groups"].push_back(std::move(e));
  }
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_report_json: cannot open " + path);
  f << j.dump(2) << "\n";
}

}  // namespace nasp::metrics
