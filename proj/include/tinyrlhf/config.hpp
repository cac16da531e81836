#pragma once

// Run configuration: every knob of a training run in one value, plus the flat
// `section.key = value` text format it is loaded from and saved to.

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "tinyrlhf/ppo.hpp"
#include "tinyrlhf/rewards.hpp"
#include "tinyrlhf/rollout.hpp"
#include "tinyrlhf/tinylm.hpp"

namespace tinyrlhf {

enum class PipelineMode { sync, async };

PipelineMode parse_pipeline_mode(std::string_view s);
std::string_view to_string(PipelineMode m);

struct PipelineConfig {
  PipelineMode mode = PipelineMode::sync;
  std::size_t n_rollout_engines = 1;
  std::size_t n_learner_workers = 1;
  std::size_t queue_capacity = 16;
  std::size_t max_staleness = 1;  // versions
  std::size_t rollout_batch_size = 16;  // prompts in flight
  std::size_t group_size = 4;  // samples per prompt
  std::size_t train_batch_size = 0;  // prompts per training step; 0 means rollout_batch_size
  std::size_t max_rerolls = 4;
  double watchdog_seconds = 60.0;
  bool threaded = true;
  // Per-request generation lengths drawn uniformly from this list; empty
  // means the engine default.
  std::vector<std::size_t> length_mix;
  std::size_t jitter_us = 0;  // random sleep before each engine tick (stress tests)

  std::size_t effective_train_batch() const noexcept {
    return train_batch_size == 0 ? rollout_batch_size : train_batch_size;
  }
  void validate() const;
};

struct KlConfig {
  double init_beta = 0.0;
  double target = 0.01;
  double horizon = 10.0;
  bool adaptive = false;
};

struct OptimizerConfig {
  lm::AdamConfig adam;
  double critic_lr = 1e-3;

  lm::AdamConfig critic() const {
    lm::AdamConfig c = adam;
    c.lr = critic_lr;
    return c;
  }
};

struct RunConfig {
  lm::ModelConfig model;
  rewards::TaskSpec task;
  rewards::RewardMode reward_mode = rewards::RewardMode::exact;
  ppo::AdvantageMode advantage = ppo::AdvantageMode::gae;
  bool dynamic_sampling = false;
  ppo::GaeConfig gae;
  ppo::PpoConfig ppo;
  KlConfig kl;
  rollout::EngineConfig engine;
  bool stop_on_eos = true;
  PipelineConfig pipeline;
  OptimizerConfig optimizer;
  std::size_t total_steps = 100;
  std::uint64_t seed = 0;
  std::size_t eval_size = 256;
  std::string metrics_path;
  std::string weights_path;
  std::string report_path;
  std::string bench_path;

  // Fills the fields that are functions of others: task vocabulary, model
  // and task seeds, engine EOS.
  void resolve();
  void validate() const;

  // Policy config; the critic shares it with a value head and its own seed.
  lm::ModelConfig policy_model() const;
  lm::ModelConfig critic_model() const;
};

// Parses config text. Unknown keys, malformed values and duplicates raise
// ParseError naming the key and 1-based line. The result is resolved and
// validated.
RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::string& path);

// Applies `key=value` overrides in order to an already parsed config.
void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides);

// Text that parses back to an identical config.
std::string serialize_config(const RunConfig& config);

}  // namespace tinyrlhf
