#pragma once

// Reinforcement-learning math: KL estimators, reward shaping, GAE, advantage
// whitening, group-relative advantages, the dynamic-sampling filter, clipped
// policy losses with decoupled bounds, and adaptive KL control.

#include <cstddef>
#include <span>
#include <string_view>
#include <vector>

#include "tinyrlhf/trajectory.hpp"

namespace tinyrlhf::ppo {

enum class KlEstimator { k1, k2, k3 };
enum class KlMode { reward_shaping, loss_term };
enum class AdvantageMode { gae, grpo };

KlEstimator parse_kl_estimator(std::string_view s);
KlMode parse_kl_mode(std::string_view s);
AdvantageMode parse_advantage_mode(std::string_view s);
std::string_view to_string(KlEstimator e);
std::string_view to_string(KlMode m);
std::string_view to_string(AdvantageMode m);

struct GaeConfig {
  double gamma = 1.0;
  double lam = 0.95;

  void validate() const;
};

struct PpoConfig {
  double eps_low = 0.2;
  double eps_high = 0.2;
  double c1 = 0.5;
  double c2 = 0.0;
  std::size_t ppo_epochs = 1;
  KlMode kl_mode = KlMode::loss_term;
  KlEstimator kl_estimator = KlEstimator::k2;
  bool whiten_advantages = true;
  double max_kl = 1.0;

  void validate() const;
};

struct KlControllerState {
  double beta = 0.0;
  double target_kl = 0.01;
  double horizon = 10.0;
};

// Guard on |new_logp - old_logp| beyond which exp() of the ratio is refused.
inline constexpr double kMaxLogRatio = 30.0;
inline constexpr double kStdGuard = 1e-8;
inline constexpr double kGroupEqualityTol = 1e-12;

double kl_estimate(double logp, double logp_ref, KlEstimator kind) noexcept;
// d estimate / d logp
double kl_estimate_grad(double logp, double logp_ref, KlEstimator kind) noexcept;
std::vector<double> kl_estimate(std::span<const double> logp, std::span<const double> logp_ref,
                                KlEstimator kind);

// r'_t = r_t - beta * kl_t on unmasked tokens (kl from old vs reference
// logprobs). With KlMode::loss_term shaping is skipped and r' = r.
void shape_rewards(TrajectoryBatch& batch, double beta, KlEstimator kind, KlMode mode);

// Backward recursion over shaped rewards and values with V(s_T) = 0.
void compute_gae(TrajectoryBatch& batch, const GaeConfig& cfg);
void compute_gae(Trajectory& seq, const GaeConfig& cfg);

// (A - mean) / (std + 1e-8) over unmasked tokens of the whole batch. Returns
// false (and logs a warning) when fewer than two tokens are unmasked.
bool whiten_advantages(TrajectoryBatch& batch);

// Per-sequence (r_i - mean_group) / (std_group + 1e-8) broadcast over tokens.
// Values and returns are zeroed; they play no role in group-relative training.
void grpo_advantages(TrajectoryBatch& batch);

struct FilterResult {
  TrajectoryBatch retained;
  std::size_t dropped_groups = 0;
  std::size_t dropped_sequences = 0;

  // No informative group survived; the caller should collect more rollouts.
  bool empty() const noexcept { return retained.empty(); }
};

// Drops groups whose sequence rewards are all equal (max - min < 1e-12).
FilterResult dynamic_sampling_filter(TrajectoryBatch batch);

// Inputs are aligned per token. `values_pred` and `returns` may be empty when
// there is no critic; `mask` may be empty meaning all tokens count.
struct LossInputs {
  std::span<const double> new_logp;
  std::span<const double> old_logp;
  std::span<const double> ref_logp;
  std::span<const double> advantages;
  std::span<const double> values_pred;
  std::span<const double> returns;
  std::span<const double> entropies;
  std::span<const std::uint8_t> mask;
};

struct LossReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy_mean = 0.0;
  double kl_mean = 0.0;
  double clip_fraction = 0.0;
  double total_loss = 0.0;
  std::size_t token_count = 0;

  // d total_loss / d input, per token.
  std::vector<double> grad_new_logp;
  std::vector<double> grad_entropy;
  std::vector<double> grad_value;
};

// Token-mean losses over unmasked tokens. Minimized total:
//   policy_loss + c1 * value_loss - c2 * entropy_mean [+ beta * kl_mean in loss_term mode]
// Throws NumericalGuardError when |new_logp - old_logp| > 30 on any token.
LossReport ppo_losses(const LossInputs& in, const PpoConfig& cfg, double beta);

struct KlStepResult {
  KlControllerState state;
  bool early_stop = false;
};

// beta <- beta * (1 + clip(observed / target - 1, -0.5, 0.5) / horizon);
// early_stop when observed exceeds max_kl.
KlStepResult kl_controller_step(const KlControllerState& state, double observed_kl, double max_kl);

}  // namespace tinyrlhf::ppo
