#include "tinyrlhf/tinylm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_map>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/rng.hpp"

namespace tinyrlhf::lm {

namespace {

constexpr double kInitRange = 0.08;
constexpr double kRmsEps = 1e-5;
constexpr std::size_t kTensorsPerLayer = 8;

enum LayerSlot : std::size_t { kLn1, kWq, kWk, kWv, kWo, kLn2, kWin, kWout };

// Fixed tensor order: tok_emb, pos_emb, layers..., ln_f, lm_head[, value_w, value_b].
struct Layout {
  explicit Layout(const ModelConfig& c) : n_layers(c.n_layers) {}

  static constexpr std::size_t tok_emb = 0;
  static constexpr std::size_t pos_emb = 1;
  std::size_t layer(std::size_t l, LayerSlot s) const { return 2 + l * kTensorsPerLayer + s; }
  std::size_t ln_f() const { return 2 + n_layers * kTensorsPerLayer; }
  std::size_t lm_head() const { return ln_f() + 1; }
  std::size_t value_w() const { return ln_f() + 2; }
  std::size_t value_b() const { return ln_f() + 3; }

  std::size_t n_layers;
};

const double* data(const TensorSet& set, std::size_t index) { return set.tensors[index].data.data(); }
double* data(TensorSet& set, std::size_t index) { return set.tensors[index].data.data(); }

// C[rows x out] = A[rows x in] * W[in x out]. The k-outer order reuses each
// weight row across all input rows; each output element still accumulates in
// ascending k, so a row's result is independent of how many rows are batched.
void matmul(const double* a, std::size_t rows, std::size_t in, const double* w, std::size_t out,
            double* c) {
  std::fill(c, c + rows * out, 0.0);
  for (std::size_t k = 0; k < in; ++k) {
    const double* wk = w + k * out;
    for (std::size_t r = 0; r < rows; ++r) {
      const double ark = a[r * in + k];
      double* cr = c + r * out;
      for (std::size_t j = 0; j < out; ++j) cr[j] += ark * wk[j];
    }
  }
}

// dA += dC * W^T ; dW += A^T * dC
void matmul_backward(const double* a, const double* w, const double* dc, std::size_t rows,
                     std::size_t in, std::size_t out, double* da, double* dw) {
  for (std::size_t r = 0; r < rows; ++r) {
    const double* dcr = dc + r * out;
    const double* ar = a + r * in;
    for (std::size_t k = 0; k < in; ++k) {
      const double* wk = w + k * out;
      double* dwk = dw + k * out;
      double acc = 0.0;
      const double ark = ar[k];
      for (std::size_t j = 0; j < out; ++j) {
        acc += dcr[j] * wk[j];
        dwk[j] += ark * dcr[j];
      }
      da[r * in + k] += acc;
    }
  }
}

double dot(const double* x, const double* y, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

// y = g * x / sqrt(mean(x^2) + eps); returns the inverse rms.
double rms_norm(const double* x, const double* g, std::size_t n, double* y) {
  double ms = 0.0;
  for (std::size_t i = 0; i < n; ++i) ms += x[i] * x[i];
  ms /= static_cast<double>(n);
  const double r = 1.0 / std::sqrt(ms + kRmsEps);
  for (std::size_t i = 0; i < n; ++i) y[i] = g[i] * x[i] * r;
  return r;
}

// dx += d(rms_norm)/dx applied to dy; dg += d/dg.
void rms_norm_backward(const double* x, const double* g, double r, const double* dy, std::size_t n,
                       double* dx, double* dg) {
  double proj = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = x[i] * r;
    dg[i] += dy[i] * z;
    proj += dy[i] * g[i] * z;
  }
  proj /= static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = x[i] * r;
    dx[i] += r * (dy[i] * g[i] - z * proj);
  }
}

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2 / pi)
constexpr double kGeluA = 0.044715;

double gelu(double x) {
  return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
}

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + kGeluA * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * x * x);
}

// Softmax over scores[0..n) in place (max-subtracted).
void softmax_inplace(double* scores, std::size_t n) {
  double mx = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n; ++i) mx = std::max(mx, scores[i]);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    scores[i] = std::exp(scores[i] - mx);
    sum += scores[i];
  }
  for (std::size_t i = 0; i < n; ++i) scores[i] /= sum;
}

// Causal attention for one query row over positions [0, len). `key(u)` and
// `value(u)` return row pointers. Writes the normalized weights to `probs`.
template <typename KeyFn, typename ValueFn>
void attend(const double* q, std::size_t len, std::size_t d, KeyFn key, ValueFn value,
            double* probs, double* out) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t u = 0; u < len; ++u) probs[u] = dot(q, key(u), d) * scale;
  softmax_inplace(probs, len);
  std::fill(out, out + d, 0.0);
  for (std::size_t u = 0; u < len; ++u) {
    const double* v = value(u);
    const double p = probs[u];
    for (std::size_t i = 0; i < d; ++i) out[i] += p * v[i];
  }
}

void check_tokens(const ModelConfig& c, std::span<const Token> tokens) {
  if (tokens.empty()) throw InputError("token sequence is empty");
  if (tokens.size() > c.context_window) {
    throw CapacityError("sequence length " + std::to_string(tokens.size()) +
                        " exceeds context window " + std::to_string(c.context_window));
  }
  for (Token t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= c.vocab_size) {
      throw InputError("token " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(c.vocab_size));
    }
  }
}

// All activations of a full-sequence forward pass, kept for backward.
struct LayerTrace {
  std::vector<double> x_in, rinv1, a, q, k, v, probs, o, x_mid, rinv2, b, h_pre, h;
};

struct Trace {
  std::size_t len = 0;
  std::vector<LayerTrace> layers;
  std::vector<double> x_final, rinv_f, f, logits, values;
};

Trace forward_trace(const ModelParams& p, std::span<const Token> tokens) {
  const ModelConfig& c = p.config;
  check_tokens(c, tokens);
  const Layout lay(c);
  const std::size_t T = tokens.size();
  const std::size_t d = c.d_model;
  const std::size_t m = c.d_mlp;
  const std::size_t V = c.vocab_size;

  Trace tr;
  tr.len = T;
  std::vector<double> x(T * d);
  const double* tok = data(p, Layout::tok_emb);
  const double* pos = data(p, Layout::pos_emb);
  for (std::size_t t = 0; t < T; ++t) {
    const double* te = tok + static_cast<std::size_t>(tokens[t]) * d;
    const double* pe = pos + t * d;
    for (std::size_t i = 0; i < d; ++i) x[t * d + i] = te[i] + pe[i];
  }

  std::vector<double> tmp(T * std::max(d, m));
  tr.layers.resize(c.n_layers);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    LayerTrace& lt = tr.layers[l];
    lt.x_in = x;
    lt.rinv1.resize(T);
    lt.a.resize(T * d);
    const double* ln1 = data(p, lay.layer(l, kLn1));
    for (std::size_t t = 0; t < T; ++t) lt.rinv1[t] = rms_norm(&x[t * d], ln1, d, &lt.a[t * d]);
    lt.q.resize(T * d);
    lt.k.resize(T * d);
    lt.v.resize(T * d);
    matmul(lt.a.data(), T, d, data(p, lay.layer(l, kWq)), d, lt.q.data());
    matmul(lt.a.data(), T, d, data(p, lay.layer(l, kWk)), d, lt.k.data());
    matmul(lt.a.data(), T, d, data(p, lay.layer(l, kWv)), d, lt.v.data());
    lt.probs.assign(T * T, 0.0);
    lt.o.resize(T * d);
    for (std::size_t t = 0; t < T; ++t) {
      attend(
          &lt.q[t * d], t + 1, d, [&](std::size_t u) { return &lt.k[u * d]; },
          [&](std::size_t u) { return &lt.v[u * d]; }, &lt.probs[t * T], &lt.o[t * d]);
    }
    matmul(lt.o.data(), T, d, data(p, lay.layer(l, kWo)), d, tmp.data());
    for (std::size_t i = 0; i < T * d; ++i) x[i] += tmp[i];

    lt.x_mid = x;
    lt.rinv2.resize(T);
    lt.b.resize(T * d);
    const double* ln2 = data(p, lay.layer(l, kLn2));
    for (std::size_t t = 0; t < T; ++t) lt.rinv2[t] = rms_norm(&x[t * d], ln2, d, &lt.b[t * d]);
    lt.h_pre.resize(T * m);
    matmul(lt.b.data(), T, d, data(p, lay.layer(l, kWin)), m, lt.h_pre.data());
    lt.h.resize(T * m);
    for (std::size_t i = 0; i < T * m; ++i) lt.h[i] = gelu(lt.h_pre[i]);
    matmul(lt.h.data(), T, m, data(p, lay.layer(l, kWout)), d, tmp.data());
    for (std::size_t i = 0; i < T * d; ++i) x[i] += tmp[i];
  }

  tr.x_final = x;
  tr.rinv_f.resize(T);
  tr.f.resize(T * d);
  const double* lnf = data(p, lay.ln_f());
  for (std::size_t t = 0; t < T; ++t) tr.rinv_f[t] = rms_norm(&x[t * d], lnf, d, &tr.f[t * d]);
  tr.logits.resize(T * V);
  matmul(tr.f.data(), T, d, data(p, lay.lm_head()), V, tr.logits.data());
  if (c.has_value_head) {
    tr.values.resize(T);
    const double* vw = data(p, lay.value_w());
    const double vb = data(p, lay.value_b())[0];
    for (std::size_t t = 0; t < T; ++t) tr.values[t] = dot(&tr.f[t * d], vw, d) + vb;
  }
  return tr;
}

void check_weights(const ModelParams& p, std::span<const Token> tokens, const LossWeights& w) {
  const std::size_t T = tokens.size();
  auto aligned = [T](const std::vector<double>& v) { return v.empty() || v.size() == T; };
  if (!aligned(w.logprob) || !aligned(w.entropy) || !aligned(w.value_target) ||
      !aligned(w.value_weight)) {
    throw InputError("loss weights must be empty or aligned with the " + std::to_string(T) +
                     "-token sequence");
  }
  if (w.value_target.empty() != w.value_weight.empty()) {
    throw InputError("value targets and value weights must be given together");
  }
  if (!w.value_target.empty() && !p.config.has_value_head) {
    throw InputError("value targets given for a model without a value head");
  }
  auto first_zero = [](const std::vector<double>& v) { return v.empty() || v[0] == 0.0; };
  if (!first_zero(w.logprob) || !first_zero(w.entropy) || !first_zero(w.value_weight)) {
    throw InputError("position 0 has no predecessor and must carry zero weight");
  }
}

}  // namespace

// ---------------------------------------------------------------------------

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model.vocab_size must be >= 2");
  if (d_model < 2) throw ConfigError("model.d_model must be >= 2");
  if (d_mlp < 1) throw ConfigError("model.d_mlp must be >= 1");
  if (context_window < 2) throw ConfigError("model.context_window must be >= 2");
  if (n_layers != 1 && n_layers != 2) throw ConfigError("model.n_layers must be 1 or 2");
}

std::uint64_t shape_hash(const ModelConfig& c) {
  const std::string canon = "v=" + std::to_string(c.vocab_size) + ";d=" + std::to_string(c.d_model) +
                            ";m=" + std::to_string(c.d_mlp) + ";ctx=" + std::to_string(c.context_window) +
                            ";L=" + std::to_string(c.n_layers) + ";vh=" + (c.has_value_head ? "1" : "0");
  return fnv1a(canon);
}

std::size_t TensorSet::parameter_count() const noexcept {
  std::size_t n = 0;
  for (const auto& t : tensors) n += t.size();
  return n;
}

const Tensor& TensorSet::at(std::string_view name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw InputError("no tensor named '" + std::string(name) + "'");
}

Tensor& TensorSet::at(std::string_view name) {
  return const_cast<Tensor&>(static_cast<const TensorSet&>(*this).at(name));
}

bool TensorSet::same_layout(const TensorSet& other) const noexcept {
  if (tensors.size() != other.tensors.size()) return false;
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    if (tensors[i].name != other.tensors[i].name || tensors[i].shape != other.tensors[i].shape ||
        tensors[i].data.size() != other.tensors[i].data.size()) {
      return false;
    }
  }
  return true;
}

TensorSet make_zero_tensors(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model;
  const std::size_t m = c.d_mlp;
  TensorSet set;
  auto add = [&set](std::string name, std::vector<std::size_t> shape) {
    std::size_t n = 1;
    for (auto s : shape) n *= s;
    set.tensors.push_back(Tensor{std::move(name), std::move(shape), std::vector<double>(n, 0.0)});
  };
  add("tok_emb", {c.vocab_size, d});
  add("pos_emb", {c.context_window, d});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    add(pre + "ln1", {d});
    add(pre + "wq", {d, d});
    add(pre + "wk", {d, d});
    add(pre + "wv", {d, d});
    add(pre + "wo", {d, d});
    add(pre + "ln2", {d});
    add(pre + "w_in", {d, m});
    add(pre + "w_out", {m, d});
  }
  add("ln_f", {d});
  add("lm_head", {d, c.vocab_size});
  if (c.has_value_head) {
    add("value_w", {d});
    add("value_b", {1});
  }
  return set;
}

void Gradients::add_scaled(const Gradients& other, double scale) {
  if (!same_layout(other)) throw InputError("gradient layouts differ");
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& dst = tensors[i].data;
    const auto& src = other.tensors[i].data;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += scale * src[j];
  }
}

void Gradients::scale(double factor) {
  for (auto& t : tensors) {
    for (auto& v : t.data) v *= factor;
  }
}

double Gradients::l2_norm() const {
  double s = 0.0;
  for (const auto& t : tensors) {
    for (double v : t.data) s += v * v;
  }
  return std::sqrt(s);
}

bool Gradients::all_finite() const {
  for (const auto& t : tensors) {
    for (double v : t.data) {
      if (!std::isfinite(v)) return false;
    }
  }
  return true;
}

Gradients zero_gradients(const ModelConfig& config) {
  Gradients g;
  static_cast<TensorSet&>(g) = make_zero_tensors(config);
  return g;
}

ModelParams init_params(const ModelConfig& config) {
  ModelParams p;
  static_cast<TensorSet&>(p) = make_zero_tensors(config);
  p.config = config;
  p.version = 0;
  const std::uint64_t root = derive_key(config.seed, "model-init");
  for (auto& t : p.tensors) {
    const bool gain = t.name.ends_with("ln1") || t.name.ends_with("ln2") || t.name == "ln_f";
    if (gain) {
      std::fill(t.data.begin(), t.data.end(), 1.0);
      continue;
    }
    if (t.name == "value_b") continue;
    CounterRng rng(derive_key(root, t.name));
    for (auto& v : t.data) v = rng.uniform(-kInitRange, kInitRange);
  }
  return p;
}

// ---------------------------------------------------------------------------

KvCache::KvCache(const ModelConfig& config)
    : d_model_(config.d_model),
      context_window_(config.context_window),
      keys_(config.n_layers * config.context_window * config.d_model, 0.0),
      values_(config.n_layers * config.context_window * config.d_model, 0.0) {}

std::size_t KvCache::offset(std::size_t layer, std::size_t pos) const noexcept {
  return (layer * context_window_ + pos) * d_model_;
}

double* KvCache::key_slot(std::size_t layer, std::size_t pos) {
  if (pos >= context_window_) throw CapacityError("kv cache is full");
  return keys_.data() + offset(layer, pos);
}

double* KvCache::value_slot(std::size_t layer, std::size_t pos) {
  if (pos >= context_window_) throw CapacityError("kv cache is full");
  return values_.data() + offset(layer, pos);
}

const double* KvCache::key(std::size_t layer, std::size_t pos) const {
  return keys_.data() + offset(layer, pos);
}

const double* KvCache::value(std::size_t layer, std::size_t pos) const {
  return values_.data() + offset(layer, pos);
}

void KvCache::advance(std::size_t count) {
  if (filled_len_ + count > context_window_) throw CapacityError("kv cache is full");
  filled_len_ += count;
}

// ---------------------------------------------------------------------------

ForwardOutput forward_full(const ModelParams& params, std::span<const Token> tokens) {
  Trace tr = forward_trace(params, tokens);
  ForwardOutput out;
  out.length = tr.len;
  out.vocab_size = params.config.vocab_size;
  out.logits = std::move(tr.logits);
  out.values = std::move(tr.values);
  return out;
}

std::vector<std::vector<double>> decode_rows(const ModelParams& p, std::span<const DecodeRow> rows) {
  const ModelConfig& c = p.config;
  const Layout lay(c);
  const std::size_t R = rows.size();
  const std::size_t d = c.d_model;
  const std::size_t m = c.d_mlp;
  const std::size_t V = c.vocab_size;
  if (R == 0) return {};

  // Position of every row: the store's fill plus earlier rows on the same store.
  std::vector<std::size_t> positions(R);
  std::unordered_map<const KvStore*, std::size_t> pending;
  for (std::size_t r = 0; r < R; ++r) {
    const DecodeRow& row = rows[r];
    if (row.token < 0 || static_cast<std::size_t>(row.token) >= V) {
      throw InputError("token " + std::to_string(row.token) + " outside vocabulary");
    }
    std::size_t& extra = pending[row.store];
    positions[r] = row.store->size() + extra;
    ++extra;
    if (positions[r] >= c.context_window) throw CapacityError("kv cache is full");
  }

  std::vector<double> x(R * d);
  const double* tok = data(p, Layout::tok_emb);
  const double* pos = data(p, Layout::pos_emb);
  for (std::size_t r = 0; r < R; ++r) {
    const double* te = tok + static_cast<std::size_t>(rows[r].token) * d;
    const double* pe = pos + positions[r] * d;
    for (std::size_t i = 0; i < d; ++i) x[r * d + i] = te[i] + pe[i];
  }

  std::vector<double> a(R * d), q(R * d), k(R * d), v(R * d), o(R * d), tmp(R * std::max(d, m));
  std::vector<double> h(R * m);
  std::vector<double> probs(c.context_window);
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    const double* ln1 = data(p, lay.layer(l, kLn1));
    for (std::size_t r = 0; r < R; ++r) rms_norm(&x[r * d], ln1, d, &a[r * d]);
    matmul(a.data(), R, d, data(p, lay.layer(l, kWq)), d, q.data());
    matmul(a.data(), R, d, data(p, lay.layer(l, kWk)), d, k.data());
    matmul(a.data(), R, d, data(p, lay.layer(l, kWv)), d, v.data());
    for (std::size_t r = 0; r < R; ++r) {
      std::copy_n(&k[r * d], d, rows[r].store->key_slot(l, positions[r]));
      std::copy_n(&v[r * d], d, rows[r].store->value_slot(l, positions[r]));
    }
    for (std::size_t r = 0; r < R; ++r) {
      const KvStore* s = rows[r].store;
      attend(
          &q[r * d], positions[r] + 1, d, [&](std::size_t u) { return s->key(l, u); },
          [&](std::size_t u) { return s->value(l, u); }, probs.data(), &o[r * d]);
    }
    matmul(o.data(), R, d, data(p, lay.layer(l, kWo)), d, tmp.data());
    for (std::size_t i = 0; i < R * d; ++i) x[i] += tmp[i];

    const double* ln2 = data(p, lay.layer(l, kLn2));
    for (std::size_t r = 0; r < R; ++r) rms_norm(&x[r * d], ln2, d, &a[r * d]);
    matmul(a.data(), R, d, data(p, lay.layer(l, kWin)), m, h.data());
    for (auto& hv : h) hv = gelu(hv);
    matmul(h.data(), R, m, data(p, lay.layer(l, kWout)), d, tmp.data());
    for (std::size_t i = 0; i < R * d; ++i) x[i] += tmp[i];
  }

  const double* lnf = data(p, lay.ln_f());
  for (std::size_t r = 0; r < R; ++r) rms_norm(&x[r * d], lnf, d, &a[r * d]);
  std::vector<double> logits(R * V);
  matmul(a.data(), R, d, data(p, lay.lm_head()), V, logits.data());

  for (const auto& [store, count] : pending) const_cast<KvStore*>(store)->advance(count);

  std::vector<std::vector<double>> out(R);
  for (std::size_t r = 0; r < R; ++r) out[r].assign(&logits[r * V], &logits[r * V] + V);
  return out;
}

std::vector<double> forward_step(const ModelParams& params, KvStore& cache, Token token) {
  if (cache.size() >= params.config.context_window) throw CapacityError("kv cache is full");
  const DecodeRow row{&cache, token};
  return std::move(decode_rows(params, std::span(&row, 1))[0]);
}

LogSoftmaxStats log_softmax_stats(std::span<const double> logits) {
  if (logits.empty()) throw InputError("empty logits");
  double mx = -std::numeric_limits<double>::infinity();
  for (double z : logits) mx = std::max(mx, z);
  double sum = 0.0;
  for (double z : logits) sum += std::exp(z - mx);
  LogSoftmaxStats s;
  s.log_normalizer = mx + std::log(sum);
  double h = 0.0;
  for (double z : logits) {
    const double lp = z - s.log_normalizer;
    h -= std::exp(lp) * lp;
  }
  // A one-outcome distribution has zero entropy exactly.
  s.entropy = logits.size() == 1 ? 0.0 : std::max(0.0, h);
  return s;
}

// ---------------------------------------------------------------------------

double objective(const ModelParams& params, std::span<const Token> tokens, const LossWeights& w) {
  check_weights(params, tokens, w);
  const ForwardOutput fwd = forward_full(params, tokens);
  double total = 0.0;
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const auto row = fwd.row(t - 1);
    const LogSoftmaxStats s = log_softmax_stats(row);
    if (!w.logprob.empty()) {
      total += w.logprob[t] * (row[static_cast<std::size_t>(tokens[t])] - s.log_normalizer);
    }
    if (!w.entropy.empty()) total += w.entropy[t] * s.entropy;
    if (!w.value_target.empty()) {
      const double diff = fwd.values[t - 1] - w.value_target[t];
      total += w.value_weight[t] * diff * diff;
    }
  }
  return total;
}

namespace {

Gradients backward_from_trace(const ModelParams& p, std::span<const Token> tokens, const Trace& tr,
                              const LossWeights& w) {
  check_weights(p, tokens, w);
  const ModelConfig& c = p.config;
  const Layout lay(c);
  const std::size_t T = tr.len;
  const std::size_t d = c.d_model;
  const std::size_t m = c.d_mlp;
  const std::size_t V = c.vocab_size;
  Gradients g = zero_gradients(c);

  // Output-layer gradients. Position t-1 predicts token t.
  std::vector<double> dlogits(T * V, 0.0);
  std::vector<double> dvalues(c.has_value_head ? T : 0, 0.0);
  for (std::size_t t = 1; t < T; ++t) {
    const double* z = &tr.logits[(t - 1) * V];
    double* dz = &dlogits[(t - 1) * V];
    const LogSoftmaxStats s = log_softmax_stats({z, V});
    const double lw = w.logprob.empty() ? 0.0 : w.logprob[t];
    const double ew = w.entropy.empty() ? 0.0 : w.entropy[t];
    if (lw != 0.0 || ew != 0.0) {
      for (std::size_t j = 0; j < V; ++j) {
        const double lp = z[j] - s.log_normalizer;
        const double pj = std::exp(lp);
        dz[j] += -lw * pj - ew * pj * (lp + s.entropy);
      }
      dz[static_cast<std::size_t>(tokens[t])] += lw;
    }
    if (!w.value_target.empty()) {
      dvalues[t - 1] += 2.0 * w.value_weight[t] * (tr.values[t - 1] - w.value_target[t]);
    }
  }

  std::vector<double> df(T * d, 0.0);
  matmul_backward(tr.f.data(), data(p, lay.lm_head()), dlogits.data(), T, d, V, df.data(),
                  data(g, lay.lm_head()));
  if (c.has_value_head) {
    const double* vw = data(p, lay.value_w());
    double* dvw = data(g, lay.value_w());
    double& dvb = data(g, lay.value_b())[0];
    for (std::size_t t = 0; t < T; ++t) {
      const double dv = dvalues[t];
      if (dv == 0.0) continue;
      for (std::size_t i = 0; i < d; ++i) {
        df[t * d + i] += dv * vw[i];
        dvw[i] += dv * tr.f[t * d + i];
      }
      dvb += dv;
    }
  }

  std::vector<double> dx(T * d, 0.0);
  for (std::size_t t = 0; t < T; ++t) {
    rms_norm_backward(&tr.x_final[t * d], data(p, lay.ln_f()), tr.rinv_f[t], &df[t * d], d,
                      &dx[t * d], data(g, lay.ln_f()));
  }

  std::vector<double> dh(T * m), db(T * d), d_o(T * d), dq(T * d), dk(T * d), dv(T * d), da(T * d);
  std::vector<double> dprob(T);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  for (std::size_t li = c.n_layers; li-- > 0;) {
    const LayerTrace& lt = tr.layers[li];

    // MLP residual branch.
    std::fill(dh.begin(), dh.end(), 0.0);
    matmul_backward(lt.h.data(), data(p, lay.layer(li, kWout)), dx.data(), T, m, d, dh.data(),
                    data(g, lay.layer(li, kWout)));
    for (std::size_t i = 0; i < T * m; ++i) dh[i] *= gelu_grad(lt.h_pre[i]);
    std::fill(db.begin(), db.end(), 0.0);
    matmul_backward(lt.b.data(), data(p, lay.layer(li, kWin)), dh.data(), T, d, m, db.data(),
                    data(g, lay.layer(li, kWin)));
    for (std::size_t t = 0; t < T; ++t) {
      rms_norm_backward(&lt.x_mid[t * d], data(p, lay.layer(li, kLn2)), lt.rinv2[t], &db[t * d], d,
                        &dx[t * d], data(g, lay.layer(li, kLn2)));
    }

    // Attention residual branch.
    std::fill(d_o.begin(), d_o.end(), 0.0);
    matmul_backward(lt.o.data(), data(p, lay.layer(li, kWo)), dx.data(), T, d, d, d_o.data(),
                    data(g, lay.layer(li, kWo)));
    std::fill(dq.begin(), dq.end(), 0.0);
    std::fill(dk.begin(), dk.end(), 0.0);
    std::fill(dv.begin(), dv.end(), 0.0);
    for (std::size_t t = 0; t < T; ++t) {
      const double* pr = &lt.probs[t * T];
      const double* dot_t = &d_o[t * d];
      double weighted = 0.0;
      for (std::size_t u = 0; u <= t; ++u) {
        dprob[u] = dot(dot_t, &lt.v[u * d], d);
        weighted += pr[u] * dprob[u];
        for (std::size_t i = 0; i < d; ++i) dv[u * d + i] += pr[u] * dot_t[i];
      }
      for (std::size_t u = 0; u <= t; ++u) {
        const double ds = pr[u] * (dprob[u] - weighted) * scale;
        if (ds == 0.0) continue;
        for (std::size_t i = 0; i < d; ++i) {
          dq[t * d + i] += ds * lt.k[u * d + i];
          dk[u * d + i] += ds * lt.q[t * d + i];
        }
      }
    }
    std::fill(da.begin(), da.end(), 0.0);
    matmul_backward(lt.a.data(), data(p, lay.layer(li, kWq)), dq.data(), T, d, d, da.data(),
                    data(g, lay.layer(li, kWq)));
    matmul_backward(lt.a.data(), data(p, lay.layer(li, kWk)), dk.data(), T, d, d, da.data(),
                    data(g, lay.layer(li, kWk)));
    matmul_backward(lt.a.data(), data(p, lay.layer(li, kWv)), dv.data(), T, d, d, da.data(),
                    data(g, lay.layer(li, kWv)));
    for (std::size_t t = 0; t < T; ++t) {
      rms_norm_backward(&lt.x_in[t * d], data(p, lay.layer(li, kLn1)), lt.rinv1[t], &da[t * d], d,
                        &dx[t * d], data(g, lay.layer(li, kLn1)));
    }
  }

  double* dtok = data(g, Layout::tok_emb);
  double* dpos = data(g, Layout::pos_emb);
  for (std::size_t t = 0; t < T; ++t) {
    double* te = dtok + static_cast<std::size_t>(tokens[t]) * d;
    double* pe = dpos + t * d;
    for (std::size_t i = 0; i < d; ++i) {
      te[i] += dx[t * d + i];
      pe[i] += dx[t * d + i];
    }
  }
  return g;
}

SequenceLogprobs logprobs_from_output(const ForwardOutput& fwd, std::span<const Token> tokens,
                                      std::size_t response_start) {
  if (response_start < 1 || response_start > tokens.size()) {
    throw InputError("response_start " + std::to_string(response_start) +
                     " out of range for sequence of length " + std::to_string(tokens.size()));
  }
  SequenceLogprobs out;
  out.logprobs.reserve(tokens.size() - response_start);
  out.entropies.reserve(tokens.size() - response_start);
  for (std::size_t t = response_start; t < tokens.size(); ++t) {
    const auto row = fwd.row(t - 1);
    const LogSoftmaxStats s = log_softmax_stats(row);
    out.logprobs.push_back(std::min(0.0, row[static_cast<std::size_t>(tokens[t])] - s.log_normalizer));
    out.entropies.push_back(s.entropy);
  }
  return out;
}

std::vector<double> values_from_output(const ForwardOutput& fwd, std::size_t response_start) {
  if (fwd.values.empty()) throw InputError("model has no value head");
  if (response_start < 1 || response_start > fwd.length) throw InputError("response_start out of range");
  return {fwd.values.begin() + static_cast<std::ptrdiff_t>(response_start - 1), fwd.values.end() - 1};
}

}  // namespace

Gradients backward(const ModelParams& p, std::span<const Token> tokens, const LossWeights& w) {
  check_weights(p, tokens, w);
  return backward_from_trace(p, tokens, forward_trace(p, tokens), w);
}

SequenceLogprobs sequence_logprobs(const ModelParams& params, std::span<const Token> tokens,
                                   std::size_t response_start) {
  if (response_start < 1 || response_start > tokens.size()) {
    throw InputError("response_start " + std::to_string(response_start) +
                     " out of range for sequence of length " + std::to_string(tokens.size()));
  }
  return logprobs_from_output(forward_full(params, tokens), tokens, response_start);
}

std::vector<double> sequence_values(const ModelParams& params, std::span<const Token> tokens,
                                    std::size_t response_start) {
  if (!params.config.has_value_head) throw InputError("model has no value head");
  return values_from_output(forward_full(params, tokens), response_start);
}

struct Tape::Impl {
  const ModelParams* params;
  std::vector<Token> tokens;
  Trace trace;
  ForwardOutput output;
};

Tape::Tape(const ModelParams& params, std::span<const Token> tokens) : impl_(std::make_unique<Impl>()) {
  impl_->params = &params;
  impl_->tokens.assign(tokens.begin(), tokens.end());
  impl_->trace = forward_trace(params, tokens);
  impl_->output.length = impl_->trace.len;
  impl_->output.vocab_size = params.config.vocab_size;
  impl_->output.logits = impl_->trace.logits;
  impl_->output.values = impl_->trace.values;
}

Tape::~Tape() = default;
Tape::Tape(Tape&&) noexcept = default;
Tape& Tape::operator=(Tape&&) noexcept = default;

const ForwardOutput& Tape::output() const { return impl_->output; }

SequenceLogprobs Tape::logprobs(std::size_t response_start) const {
  return logprobs_from_output(impl_->output, impl_->tokens, response_start);
}

std::vector<double> Tape::values(std::size_t response_start) const {
  return values_from_output(impl_->output, response_start);
}

Gradients Tape::backward(const LossWeights& weights) const {
  return backward_from_trace(*impl_->params, impl_->tokens, impl_->trace, weights);
}

// ---------------------------------------------------------------------------

AdamState make_adam_state(const ModelConfig& config) {
  AdamState s;
  s.first_moment = make_zero_tensors(config);
  s.second_moment = make_zero_tensors(config);
  return s;
}

OptimizerResult optimizer_step(const ModelParams& params, const Gradients& grads,
                               const AdamState& state, const AdamConfig& cfg) {
  if (!params.same_layout(grads) || !params.same_layout(state.first_moment) ||
      !params.same_layout(state.second_moment)) {
    throw InputError("gradient or optimizer state layout does not match parameters");
  }
  if (!grads.all_finite()) {
    throw TrainingDivergence("non-finite gradient at parameter version " +
                             std::to_string(params.version));
  }
  OptimizerResult out{params, state, grads.l2_norm(), false};
  double divisor = 1.0;
  if (cfg.clip_norm > 0.0 && out.grad_norm > cfg.clip_norm) {
    divisor = out.grad_norm / cfg.clip_norm;
    out.clipped = true;
  }
  out.state.step += 1;
  const double t = static_cast<double>(out.state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < out.params.tensors.size(); ++i) {
    auto& w = out.params.tensors[i].data;
    auto& m = out.state.first_moment.tensors[i].data;
    auto& v = out.state.second_moment.tensors[i].data;
    const auto& gr = grads.tensors[i].data;
    for (std::size_t j = 0; j < w.size(); ++j) {
      const double gj = gr[j] / divisor;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * gj;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * gj * gj;
      w[j] -= cfg.lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.eps);
    }
  }
  out.params.version = params.version + 1;
  return out;
}

}  // namespace tinyrlhf::lm
