// SPDX-License-Identifier: Apache-2.0
// Shared generators for the property tests.

#pragma once

#include <cmath>
#include <vector>

#include "leaf/autodiff.hpp"
#include "leaf/corpus.hpp"
#include "leaf/model.hpp"
#include "leaf/rng.hpp"

namespace leaf::testing {

inline ad::DenseArray random_array(Rng& rng, ad::Shape shape, double lo = -1.0, double hi = 1.0) {
  ad::DenseArray a(shape);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = rng.uniform(lo, hi);
  return a;
}

// Bounded away from zero so relu kinks stay outside the FD stencil.
inline ad::DenseArray random_away_from_zero(Rng& rng, ad::Shape shape, double margin = 1e-2) {
  ad::DenseArray a(shape);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double m = rng.uniform(margin, 1.0);
    a[i] = rng.bernoulli(0.5) ? m : -m;
  }
  return a;
}

inline ModelConfig micro_config(int vocab = 7, Capacity cap = Capacity::student) {
  ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = 4;
  c.n_layers = 1;
  c.max_seq_len = 12;
  c.d_ff = 6;
  c.capacity = cap;
  return c;
}

inline TokenSeq random_tokens(Rng& rng, std::size_t n, int vocab) {
  TokenSeq t(n);
  for (auto& v : t) v = static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(vocab)));
  return t;
}

}  // namespace leaf::testing
