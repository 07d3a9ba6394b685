#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "nasp/core/ops.hpp"
#include "nasp/core/rng.hpp"

namespace nasp::nextscale {

enum class DecodeKind { argmax = 0, multinomial = 1, top_k_p = 2 };

DecodeKind decode_kind_from_string(const std::string& s);
std::string decode_kind_name(DecodeKind k);

struct DecodeStrategy {
  DecodeKind kind = DecodeKind::argmax;
  double top_p = 0.96;
  int top_k = 900;
  double temperature = 1.0;
  std::uint64_t seed = 0;
};

// Lowest index among the maxima.
int argmax_row(const double* row, int v);

// Full-vocabulary probability vector after temperature scaling and, for
// top_k_p, restriction to the top-k entries followed by the smallest prefix
// reaching cumulative mass top_p, renormalized. argmax yields a one-hot.
std::vector<double> decode_distribution(const std::vector<double>& logits_row,
                                        const DecodeStrategy& s);

// One index per logit row. Throws on non-finite logits or out-of-range
// strategy fields. rng is consulted only by the stochastic kinds.
std::vector<int> decode_tokens(const ad::Tensor& logits, const DecodeStrategy& s, core::Rng& rng);

}  // namespace nasp::nextscale
