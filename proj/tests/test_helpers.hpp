#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "tinyrlhf/rng.hpp"
#include "tinyrlhf/tinylm.hpp"

namespace testutil {

using tinyrlhf::Token;
namespace lm = tinyrlhf::lm;

inline lm::ModelConfig tiny_config(std::size_t vocab = 8, std::size_t d = 4, std::size_t m = 6, std::size_t ctx = 12,
                                   std::size_t layers = 1, bool value_head = false, std::uint64_t seed = 1) {
  lm::ModelConfig c;
  c.vocab_size = vocab;
  c.d_model = d;
  c.d_mlp = m;
  c.context_window = ctx;
  c.n_layers = layers;
  c.has_value_head = value_head;
  c.seed = seed;
  return c;
}

// Params with every entry redrawn from uniform(-scale, scale) so the
// nonlinearities are exercised well beyond the small-init regime.
inline lm::ModelParams random_params(const lm::ModelConfig& c, std::uint64_t seed, double scale = 0.5) {
  lm::ModelParams p = lm::init_params(c);
  tinyrlhf::CounterRng rng(tinyrlhf::derive_key(seed, "test-params"));
  for (auto& t : p.tensors) {
    for (auto& x : t.data) x = rng.uniform(-scale, scale);
  }
  return p;
}

inline void zero_all(lm::ModelParams& p) {
  for (auto& t : p.tensors) std::fill(t.data.begin(), t.data.end(), 0.0);
}

inline std::vector<Token> random_tokens(tinyrlhf::CounterRng& rng, std::size_t n, std::size_t vocab) {
  std::vector<Token> out(n);
  for (auto& t : out) t = static_cast<Token>(rng.below(vocab));
  return out;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline double max_param_diff(const lm::TensorSet& a, const lm::TensorSet& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.tensors.size(); ++i) m = std::max(m, max_abs_diff(a.tensors[i].data, b.tensors[i].data));
  return m;
}

// Relative error with a floor on the scale: gradients below 1e-6 are compared
// absolutely, where central differences carry ~1e-10 truncation noise.
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace testutil
