#pragma once

// Single controller for the RLHF loop. It owns every channel, assigns work to
// rollout workers, routes finished trajectories to the learner and broadcasts
// weight snapshots. Runs the four-stage loop synchronously or as an
// asynchronous pipeline with bounded staleness.

#include <atomic>
#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <variant>
#include <vector>

#include "tinyrlhf/channel.hpp"
#include "tinyrlhf/config.hpp"
#include "tinyrlhf/ppo.hpp"
#include "tinyrlhf/rewards.hpp"
#include "tinyrlhf/rollout.hpp"
#include "tinyrlhf/tinylm.hpp"
#include "tinyrlhf/trajectory.hpp"

namespace tinyrlhf::pipeline {

// ---------------------------------------------------------------------------
// Messages

struct RolloutTask {
  rollout::RolloutRequest request;
};

// One complete request group from one engine.
struct TrajectoryReady {
  std::size_t engine = 0;
  TrajectoryBatch batch;
};

struct WeightUpdate {
  lm::ModelParams params;
};

struct MetricsReport {
  std::size_t engine = 0;
  std::uint64_t acked_version = 0;
  bool is_ack = false;
  bool rejected = false;  // weight update refused as stale
  std::string error;  // non-empty when the engine failed
  rollout::EngineStats stats;
  std::size_t abandoned = 0;  // sessions still running at shutdown
  bool final_report = false;  // last message the worker sends
};

struct Shutdown {};

using EngineMessage = std::variant<RolloutTask, TrajectoryReady, WeightUpdate, MetricsReport, Shutdown>;

// ---------------------------------------------------------------------------
// Rollout worker

// Owns one engine. Threaded workers loop on their inbox; cooperative ones are
// driven by step() from the controller's thread.
class RolloutWorker {
 public:
  using Sink = std::function<void(EngineMessage&&)>;

  RolloutWorker(std::size_t index, lm::ModelConfig model, rollout::EngineConfig config,
                std::size_t inbox_capacity, Sink sink, std::size_t jitter_us = 0,
                std::uint64_t jitter_seed = 0);
  ~RolloutWorker();

  RolloutWorker(const RolloutWorker&) = delete;
  RolloutWorker& operator=(const RolloutWorker&) = delete;

  void start();
  void join();

  // Handles every queued message, then runs at most one engine tick.
  // Returns false once the worker has shut down.
  bool step();
  bool has_work() const;

  BoundedChannel<EngineMessage>& inbox() noexcept { return inbox_; }
  std::size_t index() const noexcept { return index_; }
  bool stopped() const noexcept { return stopped_.load(); }

 private:
  bool handle(EngineMessage&& msg);
  void tick_once();
  void run();
  void finish(std::size_t abandoned);

  struct OpenGroup {
    std::uint32_t expected = 0;
    TrajectoryBatch batch;
  };

  std::size_t index_;
  rollout::Engine engine_;
  BoundedChannel<EngineMessage> inbox_;
  Sink sink_;
  std::size_t jitter_us_;
  std::uint64_t jitter_seed_;
  std::uint64_t jitter_count_ = 0;
  std::map<std::uint64_t, OpenGroup> open_;
  std::thread thread_;
  std::atomic<bool> stopped_{false};
};

// ---------------------------------------------------------------------------
// Learner

struct LearnerConfig {
  ppo::PpoConfig ppo;
  lm::AdamConfig policy_opt;
  lm::AdamConfig critic_opt;
  bool threaded = true;
};

struct LearnerState {
  lm::ModelParams policy;
  lm::AdamState policy_opt;
  std::optional<lm::ModelParams> critic;
  std::optional<lm::AdamState> critic_opt;
};

LearnerState make_learner_state(lm::ModelParams policy, std::optional<lm::ModelParams> critic);

struct UpdateReport {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double kl_mean = 0.0;
  double clip_fraction = 0.0;
  double grad_norm = 0.0;
  std::size_t token_count = 0;
  std::size_t shards_used = 0;
};

// Contiguous shards of `batch` with roughly equal unmasked-token counts, as
// [begin, end) sequence ranges. Some may be empty.
std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(const TrajectoryBatch& batch,
                                                              std::size_t n_shards);

struct ShardGradients {
  lm::Gradients policy;
  std::optional<lm::Gradients> critic;
  UpdateReport report;
};

// Gradient of the token-mean PPO loss over the whole batch, assembled as the
// token-weighted average of per-shard gradients. Shards without unmasked
// tokens are left out.
ShardGradients batch_gradients(const LearnerState& state, const TrajectoryBatch& batch,
                               const LearnerConfig& config, double beta, std::size_t n_workers);

struct LearnerUpdate {
  LearnerState state;
  UpdateReport report;
};

// Applies one optimizer step per model from precomputed gradients.
LearnerUpdate apply_gradients(const LearnerState& state, const ShardGradients& grads,
                              const LearnerConfig& config);

// One optimizer step for the policy (and critic) on the whole batch.
// Throws EmptyBatchError on a batch without unmasked tokens.
LearnerUpdate learner_update(const LearnerState& state, const TrajectoryBatch& batch,
                             const LearnerConfig& config, double beta, std::size_t n_workers);

// ---------------------------------------------------------------------------
// Controller

struct MetricsRecord {
  std::uint64_t step = 0;
  std::uint64_t weight_version = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double beta = 0.0;
  std::uint64_t dropped_stale = 0;
  std::uint64_t dropped_groups = 0;
  double tokens_per_second = 0.0;
  double step_time_ms = 0.0;

  // Diagnostics kept out of the metrics stream.
  std::size_t epochs_run = 0;
  bool early_stopped = false;
  std::size_t rerolls = 0;
  std::uint64_t max_staleness_seen = 0;
};

// Trajectory accounting. Every trajectory handed to the controller ends in
// exactly one of trained, dropped_stale, dropped_filtered or leftover.
struct AuditTotals {
  std::uint64_t generated = 0;
  std::uint64_t trained = 0;
  std::uint64_t dropped_stale = 0;
  std::uint64_t dropped_filtered = 0;
  std::uint64_t leftover = 0;
  std::uint64_t duplicates = 0;  // trajectories consumed more than once
  std::uint64_t abandoned = 0;  // sessions still generating at shutdown, never emitted

  bool balanced() const noexcept {
    return duplicates == 0 && generated == trained + dropped_stale + dropped_filtered + leftover;
  }
};

struct RunState {
  std::uint64_t step = 0;
  std::uint64_t version = 0;
  ppo::KlControllerState kl;
  std::deque<TrajectoryBatch> pending;  // experience queue, one group per entry
  AuditTotals audit;
  std::uint64_t early_stops = 0;
  std::uint64_t watchdog_fires = 0;
  std::uint64_t max_trained_staleness = 0;
};

struct BroadcastAck {
  std::size_t engine = 0;
  std::uint64_t version = 0;
  bool rejected = false;
};

class Controller {
 public:
  using MetricsSink = std::function<void(const MetricsRecord&)>;
  // Test hook: maps (epoch, observed KL) to the KL used for early stopping.
  using KlProbe = std::function<double(std::size_t epoch, double observed)>;

  explicit Controller(const RunConfig& config);
  ~Controller();

  Controller(const Controller&) = delete;
  Controller& operator=(const Controller&) = delete;

  // Generate, score, estimate advantages, optimize, broadcast.
  MetricsRecord run_sync_iteration();
  // Runs the asynchronous pipeline until `total_steps` more optimizer steps
  // have been taken.
  void run_async(std::size_t total_steps);
  // Sends `params` to every engine and waits for all acknowledgements.
  std::vector<BroadcastAck> broadcast_weights(const lm::ModelParams& params);
  // Stops and joins all workers; whatever is still queued is counted as leftover.
  void shutdown();

  void set_metrics_sink(MetricsSink sink) { sink_ = std::move(sink); }
  void set_kl_probe(KlProbe probe) { kl_probe_ = std::move(probe); }

  const RunState& state() const noexcept { return state_; }
  const LearnerState& learner() const noexcept { return learner_; }
  const lm::ModelParams& policy() const noexcept { return learner_.policy; }
  const lm::ModelParams& reference() const noexcept { return reference_; }
  const RunConfig& config() const noexcept { return config_; }
  // Batch of the most recent training step after advantage estimation.
  const TrajectoryBatch& last_batch() const noexcept { return last_batch_; }
  const std::vector<MetricsRecord>& history() const noexcept { return history_; }
  // Versions each engine acknowledged, in order.
  const std::vector<std::vector<std::uint64_t>>& acked_versions() const noexcept { return acked_; }
  std::string channel_state() const;

 private:
  rollout::RolloutRequest make_request(std::uint64_t request_id) const;
  void send(std::size_t engine, EngineMessage msg);
  std::optional<EngineMessage> receive();
  EngineMessage receive_or_watchdog(const char* waiting_for);
  void on_report(const MetricsReport& r);
  TrajectoryBatch generate_groups(std::size_t n_groups);
  void issue(std::size_t engine);
  std::size_t least_loaded_engine() const;
  // Stages 2-4 on collected groups. Returns false when the filter emptied the batch.
  bool train_on(TrajectoryBatch batch, MetricsRecord& rec);
  void annotate(TrajectoryBatch& batch) const;
  void consume(const TrajectoryBatch& batch);
  void emit(MetricsRecord rec);

  RunConfig config_;
  LearnerConfig learner_config_;
  LearnerState learner_;
  lm::ModelParams reference_;
  rewards::Scorer scorer_;
  std::uint64_t sampling_key_ = 0;
  std::uint64_t length_key_ = 0;

  std::unique_ptr<BoundedChannel<EngineMessage>> outbox_;
  std::deque<EngineMessage> deferred_;  // received while waiting for something else
  std::vector<std::unique_ptr<RolloutWorker>> workers_;
  std::vector<std::size_t> outstanding_;  // requests per engine
  std::vector<std::vector<std::uint64_t>> acked_;
  bool shut_down_ = false;

  RunState state_;
  std::uint64_t next_request_ = 0;
  std::set<std::pair<std::uint64_t, std::uint32_t>> consumed_;
  TrajectoryBatch last_batch_;
  std::vector<MetricsRecord> history_;
  MetricsSink sink_;
  KlProbe kl_probe_;
  // Per-step accumulators, reset when a metrics record is emitted.
  std::uint64_t step_tokens_ = 0;
  std::uint64_t step_dropped_stale_ = 0;
  double step_reward_sum_ = 0.0;
  std::uint64_t step_reward_n_ = 0;
  double step_start_ = 0.0;  // seconds on the controller clock
};

// ---------------------------------------------------------------------------
// Whole runs

struct RunReport {
  PipelineMode mode = PipelineMode::sync;
  std::uint64_t steps = 0;
  std::uint64_t final_version = 0;
  AuditTotals audit;
  std::uint64_t early_stops = 0;
  std::uint64_t max_trained_staleness = 0;
  double final_mean_reward = 0.0;  // mean over the last min(20, steps) steps
  double wall_seconds = 0.0;
  // Set when the run ended before total_steps because re-rolls could not
  // produce an informative batch; the partial results are still returned.
  std::string stop_reason;
};

struct RunResult {
  lm::ModelParams params;
  RunReport report;
  std::vector<MetricsRecord> metrics;
};

// Runs the configured pipeline for config.total_steps optimizer steps.
RunResult train(const RunConfig& config, const Controller::MetricsSink& sink = {});

}  // namespace tinyrlhf::pipeline
