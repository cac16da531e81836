#pragma once

// Tiny decoder-only language model with an analytic backward pass.
//
// Architecture (pre-norm, single attention head, learned positions):
//
//   x      = tok_emb[token] + pos_emb[pos]
//   per layer:
//     x   += Wo * attn(rms(x, ln1) * {Wq, Wk, Wv})
//     x   += W_out * gelu(rms(x, ln2) * W_in)
//   f      = rms(x, ln_f)
//   logits = f * lm_head           value = f . value_w + value_b   (critic only)
//
// Vectors are rows; a weight of shape [in x out] maps a row of width `in` to
// a row of width `out`. Everything is double precision.

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace tinyrlhf {

using Token = std::int32_t;

namespace lm {

struct ModelConfig {
  std::size_t vocab_size = 16;
  std::size_t d_model = 32;
  std::size_t d_mlp = 64;
  std::size_t context_window = 32;
  std::size_t n_layers = 1;
  bool has_value_head = false;
  std::uint64_t seed = 0;

  // Throws ConfigError on violated invariants.
  void validate() const;

  bool operator==(const ModelConfig&) const = default;
};

// Stable digest of the fields that determine tensor shapes. The seed is
// excluded so weights trained from different seeds stay interchangeable.
std::uint64_t shape_hash(const ModelConfig& config);

struct Tensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;

  std::size_t size() const noexcept { return data.size(); }
};

// Named tensor list in a fixed layout determined by ModelConfig. Shared by
// parameters, gradients and optimizer moments.
struct TensorSet {
  std::vector<Tensor> tensors;

  std::size_t parameter_count() const noexcept;
  const Tensor& at(std::string_view name) const;
  Tensor& at(std::string_view name);
  bool same_layout(const TensorSet& other) const noexcept;
};

TensorSet make_zero_tensors(const ModelConfig& config);

struct ModelParams : TensorSet {
  ModelConfig config;
  std::uint64_t version = 0;
};

struct Gradients : TensorSet {
  // this += scale * other
  void add_scaled(const Gradients& other, double scale);
  void scale(double factor);
  double l2_norm() const;
  bool all_finite() const;
};

Gradients zero_gradients(const ModelConfig& config);

// uniform(-0.08, 0.08) for matrices and embeddings from a counter-based stream
// keyed by (seed, tensor name); norm gains start at 1 and the value bias at 0.
ModelParams init_params(const ModelConfig& config);

// ---------------------------------------------------------------------------
// Key/value storage

// Per-sequence key/value storage addressed by (layer, position). Positions
// [0, size()) are filled; the slot at size() must be writable before a step.
class KvStore {
 public:
  virtual ~KvStore() = default;

  virtual std::size_t size() const = 0;
  virtual double* key_slot(std::size_t layer, std::size_t pos) = 0;
  virtual double* value_slot(std::size_t layer, std::size_t pos) = 0;
  virtual const double* key(std::size_t layer, std::size_t pos) const = 0;
  virtual const double* value(std::size_t layer, std::size_t pos) const = 0;
  // Marks `count` more positions as filled.
  virtual void advance(std::size_t count) = 0;
};

// Contiguous cache sized for the full context window.
class KvCache final : public KvStore {
 public:
  explicit KvCache(const ModelConfig& config);

  std::size_t size() const override { return filled_len_; }
  std::size_t capacity() const noexcept { return context_window_; }
  double* key_slot(std::size_t layer, std::size_t pos) override;
  double* value_slot(std::size_t layer, std::size_t pos) override;
  const double* key(std::size_t layer, std::size_t pos) const override;
  const double* value(std::size_t layer, std::size_t pos) const override;
  void advance(std::size_t count) override;

 private:
  std::size_t offset(std::size_t layer, std::size_t pos) const noexcept;

  std::size_t d_model_;
  std::size_t context_window_;
  std::size_t filled_len_ = 0;
  std::vector<double> keys_;
  std::vector<double> values_;
};

// ---------------------------------------------------------------------------
// Forward passes

struct ForwardOutput {
  std::size_t length = 0;
  std::size_t vocab_size = 0;
  std::vector<double> logits;  // [length x vocab_size]
  std::vector<double> values;  // [length], empty without a value head

  std::span<const double> row(std::size_t pos) const {
    return {logits.data() + pos * vocab_size, vocab_size};
  }
};

ForwardOutput forward_full(const ModelParams& params, std::span<const Token> tokens);

// Appends one position to `cache` and returns the next-token logits.
std::vector<double> forward_step(const ModelParams& params, KvStore& cache, Token token);

// One new position for one sequence. Several rows may target the same store
// with consecutive positions (prefill), or different stores (batched decode).
struct DecodeRow {
  KvStore* store;
  Token token;
};

// Runs every row through the model in a single pass and returns one logits row
// per input row. Row results do not depend on which other rows are present.
// Stores must have their slots writable; each store advances by the number of
// rows that reference it.
std::vector<std::vector<double>> decode_rows(const ModelParams& params,
                                             std::span<const DecodeRow> rows);

// Entropy-and-normalizer summary of one categorical distribution given logits.
struct LogSoftmaxStats {
  double log_normalizer = 0.0;  // logsumexp
  double entropy = 0.0;
};

LogSoftmaxStats log_softmax_stats(std::span<const double> logits);

struct SequenceLogprobs {
  std::vector<double> logprobs;   // one per token in [response_start, len)
  std::vector<double> entropies;  // entropy of the distribution each was drawn from
};

SequenceLogprobs sequence_logprobs(const ModelParams& params, std::span<const Token> tokens,
                                   std::size_t response_start);

// Value estimates V(s_t) for every token t in [response_start, len), i.e. the
// value head output at position t - 1.
std::vector<double> sequence_values(const ModelParams& params, std::span<const Token> tokens,
                                    std::size_t response_start);

// ---------------------------------------------------------------------------
// Backward

// Per-token coefficients of the differentiated objective
//
//   sum_t logprob[t] * log p(tokens[t] | tokens[<t])
// + sum_t entropy[t] * H(p(. | tokens[<t]))
// + sum_t value_weight[t] * (V(s_t) - value_target[t])^2
//
// All arrays are aligned with the token sequence; index 0 has no predecessor
// and must carry zero weight. Empty arrays mean "term absent".
struct LossWeights {
  std::vector<double> logprob;
  std::vector<double> entropy;
  std::vector<double> value_target;
  std::vector<double> value_weight;
};

Gradients backward(const ModelParams& params, std::span<const Token> tokens,
                   const LossWeights& weights);

// A recorded forward pass over one sequence. Logprobs, values and gradients
// can all be read from it without recomputing the forward. `params` must
// outlive the tape.
class Tape {
 public:
  Tape(const ModelParams& params, std::span<const Token> tokens);
  ~Tape();
  Tape(Tape&&) noexcept;
  Tape& operator=(Tape&&) noexcept;

  const ForwardOutput& output() const;
  SequenceLogprobs logprobs(std::size_t response_start) const;
  std::vector<double> values(std::size_t response_start) const;
  Gradients backward(const LossWeights& weights) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// The objective whose gradient `backward` returns. Used for finite differences.
double objective(const ModelParams& params, std::span<const Token> tokens,
                 const LossWeights& weights);

// ---------------------------------------------------------------------------
// Optimizer

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;  // <= 0 disables clipping
};

struct AdamState {
  TensorSet first_moment;
  TensorSet second_moment;
  std::uint64_t step = 0;
};

AdamState make_adam_state(const ModelConfig& config);

struct OptimizerResult {
  ModelParams params;
  AdamState state;
  double grad_norm = 0.0;  // before clipping
  bool clipped = false;
};

// Clips the global gradient norm to clip_norm, then applies one Adam update.
// Throws TrainingDivergence on non-finite gradients.
OptimizerResult optimizer_step(const ModelParams& params, const Gradients& grads,
                               const AdamState& state, const AdamConfig& config);

}  // namespace lm
}  // namespace tinyrlhf
