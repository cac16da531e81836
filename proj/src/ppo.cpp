#include "tinyrlhf/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>
#include <string>

#include <spdlog/spdlog.h>

#include "tinyrlhf/errors.hpp"

namespace tinyrlhf::ppo {

KlEstimator parse_kl_estimator(std::string_view s) {
  if (s == "k1") return KlEstimator::k1;
  if (s == "k2") return KlEstimator::k2;
  if (s == "k3") return KlEstimator::k3;
  throw ConfigError("unknown kl estimator '" + std::string(s) + "' (expected k1, k2 or k3)");
}

KlMode parse_kl_mode(std::string_view s) {
  if (s == "reward_shaping") return KlMode::reward_shaping;
  if (s == "loss_term") return KlMode::loss_term;
  throw ConfigError("unknown kl mode '" + std::string(s) + "' (expected reward_shaping or loss_term)");
}

AdvantageMode parse_advantage_mode(std::string_view s) {
  if (s == "gae") return AdvantageMode::gae;
  if (s == "grpo") return AdvantageMode::grpo;
  throw ConfigError("unknown advantage mode '" + std::string(s) + "' (expected gae or grpo)");
}

std::string_view to_string(KlEstimator e) {
  switch (e) {
    case KlEstimator::k1: return "k1";
    case KlEstimator::k2: return "k2";
    case KlEstimator::k3: return "k3";
  }
  return "?";
}

std::string_view to_string(KlMode m) {
  return m == KlMode::reward_shaping ? "reward_shaping" : "loss_term";
}

std::string_view to_string(AdvantageMode m) { return m == AdvantageMode::gae ? "gae" : "grpo"; }

void GaeConfig::validate() const {
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gae.gamma must lie in [0, 1]");
  if (!(lam >= 0.0 && lam <= 1.0)) throw ConfigError("gae.lam must lie in [0, 1]");
}

void PpoConfig::validate() const {
  if (!(eps_low > 0.0)) throw ConfigError("ppo.eps_low must be > 0");
  if (!(eps_high > 0.0)) throw ConfigError("ppo.eps_high must be > 0");
  if (!(c1 >= 0.0)) throw ConfigError("ppo.c1 must be >= 0");
  if (!(c2 >= 0.0)) throw ConfigError("ppo.c2 must be >= 0");
  if (!(max_kl > 0.0)) throw ConfigError("ppo.max_kl must be > 0");
  if (ppo_epochs < 1) throw ConfigError("ppo.epochs must be >= 1");
}

double kl_estimate(double logp, double logp_ref, KlEstimator kind) noexcept {
  const double d = logp - logp_ref;
  switch (kind) {
    case KlEstimator::k1: return d;
    case KlEstimator::k2: return 0.5 * d * d;
    case KlEstimator::k3: return std::expm1(-d) + d;
  }
  return 0.0;
}

double kl_estimate_grad(double logp, double logp_ref, KlEstimator kind) noexcept {
  const double d = logp - logp_ref;
  switch (kind) {
    case KlEstimator::k1: return 1.0;
    case KlEstimator::k2: return d;
    case KlEstimator::k3: return -std::expm1(-d);
  }
  return 0.0;
}

std::vector<double> kl_estimate(std::span<const double> logp, std::span<const double> logp_ref,
                                KlEstimator kind) {
  if (logp.size() != logp_ref.size()) {
    throw InputError("kl_estimate: logp has " + std::to_string(logp.size()) +
                     " entries, logp_ref has " + std::to_string(logp_ref.size()));
  }
  std::vector<double> out(logp.size());
  for (std::size_t i = 0; i < logp.size(); ++i) out[i] = kl_estimate(logp[i], logp_ref[i], kind);
  return out;
}

void shape_rewards(TrajectoryBatch& batch, double beta, KlEstimator kind, KlMode mode) {
  for (auto& s : batch.sequences) {
    s.shaped_rewards = s.rewards;
    if (mode == KlMode::loss_term || beta == 0.0) continue;
    for (std::size_t t = 0; t < s.length(); ++t) {
      if (!s.mask[t]) continue;
      s.shaped_rewards[t] = s.rewards[t] - beta * kl_estimate(s.old_logprobs[t], s.ref_logprobs[t], kind);
    }
  }
}

void compute_gae(Trajectory& s, const GaeConfig& cfg) {
  const std::size_t T = s.length();
  if (T == 0) throw InputError("compute_gae: empty response in request " + std::to_string(s.request_id));
  if (s.shaped_rewards.size() != T || s.values.size() != T) {
    throw InputError("compute_gae: shaped rewards and values must match the response length");
  }
  s.advantages.assign(T, 0.0);
  s.returns.assign(T, 0.0);
  double next_value = 0.0;
  double running = 0.0;
  for (std::size_t t = T; t-- > 0;) {
    const double delta = s.shaped_rewards[t] + cfg.gamma * next_value - s.values[t];
    running = delta + cfg.gamma * cfg.lam * running;
    s.advantages[t] = running;
    s.returns[t] = running + s.values[t];
    next_value = s.values[t];
  }
}

void compute_gae(TrajectoryBatch& batch, const GaeConfig& cfg) {
  for (auto& s : batch.sequences) compute_gae(s, cfg);
}

bool whiten_advantages(TrajectoryBatch& batch) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : batch.sequences) {
    for (std::size_t t = 0; t < s.length(); ++t) {
      if (s.mask[t]) {
        sum += s.advantages[t];
        ++n;
      }
    }
  }
  if (n < 2) {
    spdlog::warn("advantage whitening skipped: only {} unmasked token(s)", n);
    return false;
  }
  const double mean = sum / static_cast<double>(n);
  double var = 0.0;
  for (const auto& s : batch.sequences) {
    for (std::size_t t = 0; t < s.length(); ++t) {
      if (s.mask[t]) var += (s.advantages[t] - mean) * (s.advantages[t] - mean);
    }
  }
  const double std = std::sqrt(var / static_cast<double>(n));
  for (auto& s : batch.sequences) {
    for (std::size_t t = 0; t < s.length(); ++t) {
      if (s.mask[t]) s.advantages[t] = (s.advantages[t] - mean) / (std + kStdGuard);
    }
  }
  return true;
}

namespace {

// Sequence indices per group id, in first-appearance order.
std::vector<std::vector<std::size_t>> group_indices(const TrajectoryBatch& batch) {
  std::map<std::int64_t, std::size_t> slot;
  std::vector<std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    auto [it, inserted] = slot.try_emplace(batch.sequences[i].group_id, groups.size());
    if (inserted) groups.emplace_back();
    groups[it->second].push_back(i);
  }
  return groups;
}

}  // namespace

void grpo_advantages(TrajectoryBatch& batch) {
  for (const auto& members : group_indices(batch)) {
    double mean = 0.0;
    for (auto i : members) mean += batch.sequences[i].total_reward();
    mean /= static_cast<double>(members.size());
    double var = 0.0;
    for (auto i : members) {
      const double d = batch.sequences[i].total_reward() - mean;
      var += d * d;
    }
    const double std = std::sqrt(var / static_cast<double>(members.size()));
    for (auto i : members) {
      Trajectory& s = batch.sequences[i];
      const double a = (s.total_reward() - mean) / (std + kStdGuard);
      s.advantages.assign(s.length(), a);
      s.returns.assign(s.length(), 0.0);
      s.values.assign(s.length(), 0.0);
    }
  }
}

FilterResult dynamic_sampling_filter(TrajectoryBatch batch) {
  FilterResult out;
  for (const auto& members : group_indices(batch)) {
    double lo = batch.sequences[members.front()].total_reward();
    double hi = lo;
    for (auto i : members) {
      lo = std::min(lo, batch.sequences[i].total_reward());
      hi = std::max(hi, batch.sequences[i].total_reward());
    }
    if (hi - lo < kGroupEqualityTol) {
      ++out.dropped_groups;
      out.dropped_sequences += members.size();
      continue;
    }
    for (auto i : members) out.retained.sequences.push_back(std::move(batch.sequences[i]));
  }
  return out;
}

LossReport ppo_losses(const LossInputs& in, const PpoConfig& cfg, double beta) {
  const std::size_t T = in.new_logp.size();
  auto require = [T](std::span<const double> v, const char* name, bool optional) {
    if ((optional && v.empty()) || v.size() == T) return;
    throw InputError(std::string("ppo_losses: ") + name + " has " + std::to_string(v.size()) +
                     " entries, expected " + std::to_string(T));
  };
  require(in.old_logp, "old_logp", false);
  require(in.ref_logp, "ref_logp", true);
  require(in.advantages, "advantages", false);
  require(in.values_pred, "values_pred", true);
  require(in.returns, "returns", true);
  require(in.entropies, "entropies", true);
  if (!in.mask.empty() && in.mask.size() != T) throw InputError("ppo_losses: mask misaligned");
  if (in.values_pred.empty() != in.returns.empty()) {
    throw InputError("ppo_losses: values_pred and returns must be given together");
  }
  const bool kl_in_loss = cfg.kl_mode == KlMode::loss_term;
  if (in.ref_logp.empty() && kl_in_loss && beta != 0.0) {
    throw InputError("ppo_losses: reference logprobs required for the KL loss term");
  }

  LossReport r;
  r.grad_new_logp.assign(T, 0.0);
  r.grad_entropy.assign(T, 0.0);
  r.grad_value.assign(in.values_pred.empty() ? 0 : T, 0.0);

  std::size_t n = 0;
  for (std::size_t t = 0; t < T; ++t) n += in.mask.empty() || in.mask[t];
  r.token_count = n;
  if (n == 0) return r;

  const double inv_n = 1.0 / static_cast<double>(n);
  double obj_sum = 0.0, value_sum = 0.0, ent_sum = 0.0, kl_sum = 0.0;
  std::size_t clipped = 0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!in.mask.empty() && !in.mask[t]) continue;
    const double log_ratio = in.new_logp[t] - in.old_logp[t];
    if (!(std::abs(log_ratio) <= kMaxLogRatio)) {
      std::ostringstream os;
      os << "ppo_losses: log-ratio " << log_ratio << " at token " << t << " (new_logp "
         << in.new_logp[t] << ", old_logp " << in.old_logp[t] << ") exceeds guard " << kMaxLogRatio;
      throw NumericalGuardError(os.str());
    }
    const double ratio = std::exp(log_ratio);
    const double adv = in.advantages[t];
    const double unclipped = ratio * adv;
    const double clipped_obj = std::clamp(ratio, 1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * adv;
    if (clipped_obj < unclipped) {
      obj_sum += clipped_obj;
      ++clipped;
    } else {
      obj_sum += unclipped;
      // d(-ratio * adv / n) / d new_logp
      r.grad_new_logp[t] -= unclipped * inv_n;
    }
    if (!in.values_pred.empty()) {
      const double diff = in.values_pred[t] - in.returns[t];
      value_sum += diff * diff;
      r.grad_value[t] = 2.0 * cfg.c1 * diff * inv_n;
    }
    if (!in.entropies.empty()) {
      ent_sum += in.entropies[t];
      r.grad_entropy[t] = -cfg.c2 * inv_n;
    }
    if (!in.ref_logp.empty()) {
      kl_sum += kl_estimate(in.new_logp[t], in.ref_logp[t], cfg.kl_estimator);
      if (kl_in_loss) {
        r.grad_new_logp[t] += beta * kl_estimate_grad(in.new_logp[t], in.ref_logp[t], cfg.kl_estimator) * inv_n;
      }
    }
  }
  r.policy_loss = -obj_sum * inv_n;
  r.value_loss = value_sum * inv_n;
  r.entropy_mean = ent_sum * inv_n;
  r.kl_mean = kl_sum * inv_n;
  r.clip_fraction = static_cast<double>(clipped) * inv_n;
  r.total_loss = r.policy_loss + cfg.c1 * r.value_loss - cfg.c2 * r.entropy_mean;
  if (kl_in_loss) r.total_loss += beta * r.kl_mean;
  return r;
}

KlStepResult kl_controller_step(const KlControllerState& state, double observed_kl, double max_kl) {
  KlStepResult out{state, observed_kl > max_kl};
  const double error = std::clamp(observed_kl / state.target_kl - 1.0, -0.5, 0.5);
  out.state.beta = state.beta * (1.0 + error / state.horizon);
  return out;
}

}  // namespace tinyrlhf::ppo
