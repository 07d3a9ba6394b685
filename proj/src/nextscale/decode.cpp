#include "nasp/nextscale/decode.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <stdexcept>

namespace nasp::nextscale {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::invalid_argument("decode: " + msg); }

std::vector<double> softmax_row(const std::vector<double>& logits, double temperature) {
  std::vector<double> p(logits.size());
  double peak = -std::numeric_limits<double>::infinity();
  for (double v : logits) peak = std::max(peak, v / temperature);
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] / temperature - peak);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

}  // namespace

DecodeKind decode_kind_from_string(const std::string& s) {
  if (s == "argmax") return DecodeKind::argmax;
  if (s == "multinomial") return DecodeKind::multinomial;
  if (s == "top_k_p") return DecodeKind::top_k_p;
  fail("unknown strategy '" + s + "'");
}

std::string decode_kind_name(DecodeKind k) {
  switch (k) {
    case DecodeKind::argmax: return "argmax";
    case DecodeKind::multinomial: return "multinomial";
    case DecodeKind::top_k_p: return "top_k_p";
  }
  fail("unknown strategy enum");
}

int argmax_row(const double* row, int v) {
  int best = 0;
  for (int i = 1; i < v; ++i) {
    if (row[i] > row[best]) best = i;
  }
  return best;
}

std::vector<double> decode_distribution(const std::vector<double>& logits_row,
                                        const DecodeStrategy& s) {
  const int v = static_cast<int>(logits_row.size());
  if (v == 0) fail("empty logit row");
  for (double x : logits_row) {
    if (!std::isfinite(x)) fail("non-finite logit");
  }
  if (s.temperature <= 0.0) fail("temperature must be positive");

  if (s.kind == DecodeKind::argmax) {
    std::vector<double> p(static_cast<std::size_t>(v), 0.0);
    p[static_cast<std::size_t>(argmax_row(logits_row.data(), v))] = 1.0;
    return p;
  }
  std::vector<double> p = softmax_row(logits_row, s.temperature);
  if (s.kind == DecodeKind::multinomial) return p;

  if (s.top_k < 1) fail("top_k must be at least 1");
  if (s.top_p <= 0.0 || s.top_p > 1.0) fail("top_p must lie in (0,1]");
  // Vocabularies smaller than top_k keep every entry (the paper-profile
  // default of 900 is meant for a 4096-entry codebook).
  const int k = std::min(s.top_k, v);
  std::vector<int> order(static_cast<std::size_t>(v));
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (p[static_cast<std::size_t>(a)] != p[static_cast<std::size_t>(b)])
      return p[static_cast<std::size_t>(a)] > p[static_cast<std::size_t>(b)];
    return a < b;
  });
  double mass = 0.0;
  std::size_t kept = 0;
  for (; kept < static_cast<std::size_t>(k); ++kept) {
    mass += p[static_cast<std::size_t>(order[kept])];
    if (mass >= s.top_p) {
      ++kept;
      break;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(v), 0.0);
  for (std::size_t i = 0; i < kept; ++i)
    out[static_cast<std::size_t>(order[i])] = p[static_cast<std::size_t>(order[i])] / mass;
  return out;
}

std::vector<int> decode_tokens(const ad::Tensor& logits, const DecodeStrategy& s,
                               core::Rng& rng) {
  if (logits.ndim() != 2) fail("expected [N,V] logits");
  const int n = logits.dim(0), v = logits.dim(1);
  std::vector<int> out(static_cast<std::size_t>(n));
  std::vector<double> row(static_cast<std::size_t>(v));
  for (int r = 0; r < n; ++r) {
    const double* src = logits.data() + static_cast<std::int64_t>(r) * v;
    for (int i = 0; i < v; ++i) {
      if (!std::isfinite(src[i])) fail("non-finite logit");
      row[static_cast<std::size_t>(i)] = src[i];
    }
    if (s.kind == DecodeKind::argmax) {
      out[static_cast<std::size_t>(r)] = argmax_row(src, v);
      continue;
    }
    const std::vector<double> p = decode_distribution(row, s);
    const double u = rng.uniform01();
    double acc = 0.0;
    int pick = -1;
    for (int i = 0; i < v; ++i) {
      if (p[static_cast<std::size_t>(i)] <= 0.0) continue;
      acc += p[static_cast<std::size_t>(i)];
      pick = i;
      if (acc >= u) break;
    }
    if (pick < 0) fail("degenerate decode distribution");
    out[static_cast<std::size_t>(r)] = pick;
  }
  return out;
}

}  // namespace nasp::nextscale
