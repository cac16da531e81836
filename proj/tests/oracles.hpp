#pragma once

// Reference implementations written independently of the library code, used
// as test oracles. They favour obviousness over speed.

#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "tinyrlhf/tinylm.hpp"

namespace oracle {

using tinyrlhf::Token;
using tinyrlhf::lm::ModelParams;

struct Forward {
  std::vector<std::vector<double>> logits;  // [T][V]
  std::vector<double> values;  // [T] when the model has a value head
};

inline double at2(const ModelParams& p, const std::string& name, std::size_t r, std::size_t c) {
  const auto& t = p.at(name);
  return t.data[r * t.shape[1] + c];
}

inline double at1(const ModelParams& p, const std::string& name, std::size_t i) { return p.at(name).data[i]; }

inline std::vector<double> rms(const std::vector<double>& x, const ModelParams& p, const std::string& gain) {
  double ss = 0.0;
  for (double v : x) ss += v * v;
  const double denom = std::sqrt(ss / static_cast<double>(x.size()) + 1e-5);
  std::vector<double> y(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) y[i] = at1(p, gain, i) * x[i] / denom;
  return y;
}

inline std::vector<double> affine(const std::vector<double>& x, const ModelParams& p, const std::string& w,
                                  std::size_t out) {
  std::vector<double> y(out, 0.0);
  for (std::size_t j = 0; j < out; ++j) {
    for (std::size_t i = 0; i < x.size(); ++i) y[j] += x[i] * at2(p, w, i, j);
  }
  return y;
}

// Straight-line forward pass: one position at a time, attention recomputed
// from scratch at every position, no caches and no batching.
inline Forward forward(const ModelParams& p, const std::vector<Token>& tokens) {
  const auto& c = p.config;
  const std::size_t d = c.d_model, V = c.vocab_size, T = tokens.size();
  std::vector<std::vector<double>> x(T, std::vector<double>(d));
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t i = 0; i < d; ++i) {
      x[t][i] = at2(p, "tok_emb", static_cast<std::size_t>(tokens[t]), i) + at2(p, "pos_emb", t, i);
    }
  }
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    std::vector<std::vector<double>> q(T), k(T), v(T);
    for (std::size_t t = 0; t < T; ++t) {
      const auto a = rms(x[t], p, pre + "ln1");
      q[t] = affine(a, p, pre + "wq", d);
      k[t] = affine(a, p, pre + "wk", d);
      v[t] = affine(a, p, pre + "wv", d);
    }
    auto nx = x;
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<double> w(t + 1);
      double mx = -1e300;
      for (std::size_t u = 0; u <= t; ++u) {
        double s = 0.0;
        for (std::size_t i = 0; i < d; ++i) s += q[t][i] * k[u][i];
        w[u] = s / std::sqrt(static_cast<double>(d));
        mx = std::max(mx, w[u]);
      }
      double z = 0.0;
      for (auto& e : w) z += (e = std::exp(e - mx));
      std::vector<double> o(d, 0.0);
      for (std::size_t u = 0; u <= t; ++u) {
        for (std::size_t i = 0; i < d; ++i) o[i] += w[u] / z * v[u][i];
      }
      const auto proj = affine(o, p, pre + "wo", d);
      for (std::size_t i = 0; i < d; ++i) nx[t][i] += proj[i];
    }
    x = nx;
    for (std::size_t t = 0; t < T; ++t) {
      auto h = affine(rms(x[t], p, pre + "ln2"), p, pre + "w_in", c.d_mlp);
      for (auto& e : h) e = 0.5 * e * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (e + 0.044715 * e * e * e)));
      const auto out = affine(h, p, pre + "w_out", d);
      for (std::size_t i = 0; i < d; ++i) x[t][i] += out[i];
    }
  }
  Forward f;
  for (std::size_t t = 0; t < T; ++t) {
    const auto h = rms(x[t], p, "ln_f");
    f.logits.push_back(affine(h, p, "lm_head", V));
    if (c.has_value_head) {
      double v = at1(p, "value_b", 0);
      for (std::size_t i = 0; i < d; ++i) v += h[i] * at1(p, "value_w", i);
      f.values.push_back(v);
    }
  }
  return f;
}

// A_t = sum_{l >= 0} (gamma * lambda)^l * delta_{t+l}, with
// delta_t = r_t + gamma * V_{t+1} - V_t and V_T = 0; computed as an explicit
// double sum with std::pow.
inline std::vector<double> gae_double_sum(const std::vector<double>& r, const std::vector<double>& v, double gamma,
                                          double lam) {
  const std::size_t T = r.size();
  std::vector<double> adv(T, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    for (std::size_t l = 0; t + l < T; ++l) {
      const std::size_t s = t + l;
      const double next = s + 1 < T ? v[s + 1] : 0.0;
      const double delta = r[s] + gamma * next - v[s];
      adv[t] += std::pow(gamma * lam, static_cast<double>(l)) * delta;
    }
  }
  return adv;
}

// KL(p || q) = sum_i p_i log(p_i / q_i) for explicit probability vectors.
inline double kl_exact(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] > 0.0) s += p[i] * std::log(p[i] / q[i]);
  }
  return s;
}

}  // namespace oracle
