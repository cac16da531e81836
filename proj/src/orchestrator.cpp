#include "tinyrlhf/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <exception>
#include <sstream>

#include <spdlog/spdlog.h>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/rng.hpp"

namespace tinyrlhf::pipeline {

namespace {

using Clock = std::chrono::steady_clock;

double now_seconds() {
  static const Clock::time_point origin = Clock::now();
  return std::chrono::duration<double>(Clock::now() - origin).count();
}

std::size_t response_tokens(const TrajectoryBatch& b) {
  std::size_t n = 0;
  for (const auto& s : b.sequences) n += s.length();
  return n;
}

}  // namespace

// ---------------------------------------------------------------------------
// RolloutWorker

RolloutWorker::RolloutWorker(std::size_t index, lm::ModelConfig model, rollout::EngineConfig config,
                             std::size_t inbox_capacity, Sink sink, std::size_t jitter_us,
                             std::uint64_t jitter_seed)
    : index_(index),
      engine_(model, config),
      inbox_(inbox_capacity),
      sink_(std::move(sink)),
      jitter_us_(jitter_us),
      jitter_seed_(jitter_seed) {}

RolloutWorker::~RolloutWorker() {
  inbox_.close();
  join();
}

void RolloutWorker::start() {
  thread_ = std::thread([this] { run(); });
}

void RolloutWorker::join() {
  if (thread_.joinable()) thread_.join();
}

bool RolloutWorker::has_work() const { return !stopped_ && (inbox_.size() > 0 || !engine_.idle()); }

void RolloutWorker::finish(std::size_t abandoned) {
  MetricsReport r;
  r.engine = index_;
  r.stats = engine_.stats();
  r.abandoned = abandoned;
  r.final_report = true;
  stopped_ = true;
  sink_(std::move(r));
}

bool RolloutWorker::handle(EngineMessage&& msg) {
  if (auto* task = std::get_if<RolloutTask>(&msg)) {
    const auto& req = task->request;
    open_[req.request_id].expected = req.n_samples;
    engine_.admit(std::move(task->request));
    return true;
  }
  if (auto* update = std::get_if<WeightUpdate>(&msg)) {
    MetricsReport r;
    r.engine = index_;
    r.is_ack = true;
    try {
      r.acked_version = engine_.set_weights(std::move(update->params));
    } catch (const StaleVersionError&) {
      r.rejected = true;
      r.acked_version = engine_.version().value_or(0);
    }
    r.stats = engine_.stats();
    sink_(std::move(r));
    return true;
  }
  if (std::holds_alternative<Shutdown>(msg)) {
    finish(engine_.active_count() + engine_.queued_count());
    return false;
  }
  return true;  // controller-bound message types are ignored here
}

void RolloutWorker::tick_once() {
  if (jitter_us_ > 0) {
    const auto us = CounterRng(jitter_seed_).at(jitter_count_++) % (jitter_us_ + 1);
    std::this_thread::sleep_for(std::chrono::microseconds(us));
  }
  engine_.tick();
  TrajectoryBatch done = engine_.collect();
  for (auto& t : done.sequences) {
    const std::uint64_t id = t.request_id;
    OpenGroup& g = open_[id];
    g.batch.sequences.push_back(std::move(t));
    if (g.batch.size() == g.expected) {
      auto& seqs = g.batch.sequences;
      std::sort(seqs.begin(), seqs.end(),
                [](const Trajectory& a, const Trajectory& b) { return a.sample_index < b.sample_index; });
      TrajectoryReady ready{index_, std::move(g.batch)};
      open_.erase(id);
      sink_(std::move(ready));
    }
  }
}

void RolloutWorker::run() {
  try {
    for (;;) {
      if (engine_.idle()) {
        auto m = inbox_.pop();
        if (!m) {
          finish(0);
          return;
        }
        if (!handle(std::move(*m))) return;
        continue;
      }
      if (auto m = inbox_.try_pop()) {
        if (!handle(std::move(*m))) return;
        continue;
      }
      tick_once();
    }
  } catch (const std::exception& e) {
    MetricsReport r;
    r.engine = index_;
    r.error = e.what();
    r.final_report = true;
    stopped_ = true;
    sink_(std::move(r));
  }
}

bool RolloutWorker::step() {
  if (stopped_) return false;
  while (auto m = inbox_.try_pop()) {
    if (!handle(std::move(*m))) return false;
  }
  if (!engine_.idle()) tick_once();
  return true;
}

// ---------------------------------------------------------------------------
// Learner

LearnerState make_learner_state(lm::ModelParams policy, std::optional<lm::ModelParams> critic) {
  LearnerState s;
  s.policy_opt = lm::make_adam_state(policy.config);
  s.policy = std::move(policy);
  if (critic) {
    if (!critic->config.has_value_head) throw ConfigError("critic needs a value head");
    s.critic_opt = lm::make_adam_state(critic->config);
    s.critic = std::move(critic);
  }
  return s;
}

std::vector<std::pair<std::size_t, std::size_t>> shard_ranges(const TrajectoryBatch& batch,
                                                              std::size_t n_shards) {
  if (n_shards < 1) throw ConfigError("need at least one shard");
  const std::size_t total = batch.unmasked_count();
  std::vector<std::pair<std::size_t, std::size_t>> out;
  std::size_t begin = 0;
  std::size_t cum = 0;
  for (std::size_t s = 0; s < n_shards; ++s) {
    // Shard s ends once the running count reaches its share of the total.
    const std::size_t target = total * (s + 1) / n_shards;
    std::size_t end = begin;
    if (s + 1 == n_shards) {
      end = batch.size();
    } else {
      while (end < batch.size() && cum < target) cum += batch.sequences[end++].unmasked_count();
    }
    out.emplace_back(begin, end);
    begin = end;
  }
  return out;
}

namespace {

void check_annotated(const Trajectory& s, bool with_critic) {
  const std::size_t T = s.length();
  if (s.old_logprobs.size() != T || s.ref_logprobs.size() != T || s.advantages.size() != T ||
      s.mask.size() != T) {
    throw InputError("learner: request " + std::to_string(s.request_id) + " is missing per-token data");
  }
  if (with_critic && s.returns.size() != T) throw InputError("learner: returns missing");
}

ShardGradients shard_gradients(const LearnerState& state, const TrajectoryBatch& batch, std::size_t begin,
                               std::size_t end, const LearnerConfig& cfg, double beta) {
  const bool with_critic = state.critic.has_value();
  const lm::ModelConfig& pc = state.policy.config;

  std::vector<lm::Tape> policy_tapes;
  std::vector<lm::Tape> critic_tapes;
  std::vector<double> new_logp, old_logp, ref_logp, adv, values, returns, entropies;
  std::vector<std::uint8_t> mask;
  for (std::size_t i = begin; i < end; ++i) {
    const Trajectory& s = batch.sequences[i];
    check_annotated(s, with_critic);
    const std::vector<Token> tokens = s.tokens();
    const std::size_t P = s.prompt.size();
    policy_tapes.emplace_back(state.policy, tokens);
    const lm::SequenceLogprobs lp = policy_tapes.back().logprobs(P);
    new_logp.insert(new_logp.end(), lp.logprobs.begin(), lp.logprobs.end());
    entropies.insert(entropies.end(), lp.entropies.begin(), lp.entropies.end());
    old_logp.insert(old_logp.end(), s.old_logprobs.begin(), s.old_logprobs.end());
    ref_logp.insert(ref_logp.end(), s.ref_logprobs.begin(), s.ref_logprobs.end());
    adv.insert(adv.end(), s.advantages.begin(), s.advantages.end());
    mask.insert(mask.end(), s.mask.begin(), s.mask.end());
    if (with_critic) {
      critic_tapes.emplace_back(*state.critic, tokens);
      const std::vector<double> v = critic_tapes.back().values(P);
      values.insert(values.end(), v.begin(), v.end());
      returns.insert(returns.end(), s.returns.begin(), s.returns.end());
    }
  }

  ppo::LossInputs in;
  in.new_logp = new_logp;
  in.old_logp = old_logp;
  in.ref_logp = ref_logp;
  in.advantages = adv;
  in.values_pred = values;
  in.returns = returns;
  in.entropies = entropies;
  in.mask = mask;
  const ppo::LossReport r = ppo::ppo_losses(in, cfg.ppo, beta);

  ShardGradients out{lm::zero_gradients(pc), std::nullopt, {}};
  if (with_critic) out.critic = lm::zero_gradients(state.critic->config);
  out.report.policy_loss = r.policy_loss;
  out.report.value_loss = r.value_loss;
  out.report.entropy = r.entropy_mean;
  out.report.kl_mean = r.kl_mean;
  out.report.clip_fraction = r.clip_fraction;
  out.report.token_count = r.token_count;
  if (r.token_count == 0) return out;

  const double value_weight = cfg.ppo.c1 / static_cast<double>(r.token_count);
  std::size_t offset = 0;
  for (std::size_t i = begin; i < end; ++i) {
    const Trajectory& s = batch.sequences[i];
    const std::size_t P = s.prompt.size();
    const std::size_t L = P + s.length();
    lm::LossWeights w;
    w.logprob.assign(L, 0.0);
    if (cfg.ppo.c2 != 0.0) w.entropy.assign(L, 0.0);
    for (std::size_t t = 0; t < s.length(); ++t) {
      w.logprob[P + t] = r.grad_new_logp[offset + t];
      if (!w.entropy.empty()) w.entropy[P + t] = r.grad_entropy[offset + t];
    }
    out.policy.add_scaled(policy_tapes[i - begin].backward(w), 1.0);
    if (with_critic) {
      lm::LossWeights cw;
      cw.value_target.assign(L, 0.0);
      cw.value_weight.assign(L, 0.0);
      for (std::size_t t = 0; t < s.length(); ++t) {
        cw.value_target[P + t] = s.returns[t];
        cw.value_weight[P + t] = s.mask[t] ? value_weight : 0.0;
      }
      out.critic->add_scaled(critic_tapes[i - begin].backward(cw), 1.0);
    }
    offset += s.length();
  }
  return out;
}

}  // namespace

ShardGradients batch_gradients(const LearnerState& state, const TrajectoryBatch& batch,
                               const LearnerConfig& config, double beta, std::size_t n_workers) {
  if (batch.empty()) throw EmptyBatchError("learner update on an empty batch");
  const auto ranges = shard_ranges(batch, n_workers);
  std::vector<std::optional<ShardGradients>> parts(ranges.size());
  std::vector<std::exception_ptr> errors(ranges.size());
  auto work = [&](std::size_t k) {
    try {
      parts[k] = shard_gradients(state, batch, ranges[k].first, ranges[k].second, config, beta);
    } catch (...) {
      errors[k] = std::current_exception();
    }
  };
  if (config.threaded && ranges.size() > 1) {
    std::vector<std::thread> threads;
    for (std::size_t k = 0; k < ranges.size(); ++k) threads.emplace_back(work, k);
    for (auto& t : threads) t.join();
  } else {
    for (std::size_t k = 0; k < ranges.size(); ++k) work(k);
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  std::size_t total = 0;
  for (const auto& p : parts) total += p->report.token_count;
  ShardGradients out{lm::zero_gradients(state.policy.config), std::nullopt, {}};
  if (state.critic) out.critic = lm::zero_gradients(state.critic->config);
  out.report.token_count = total;
  if (total == 0) return out;

  // Combined in shard order so the result does not depend on thread timing.
  for (const auto& p : parts) {
    const std::size_t n = p->report.token_count;
    if (n == 0) continue;
    const double w = static_cast<double>(n) / static_cast<double>(total);
    out.policy.add_scaled(p->policy, w);
    if (out.critic) out.critic->add_scaled(*p->critic, w);
    out.report.policy_loss += w * p->report.policy_loss;
    out.report.value_loss += w * p->report.value_loss;
    out.report.entropy += w * p->report.entropy;
    out.report.kl_mean += w * p->report.kl_mean;
    out.report.clip_fraction += w * p->report.clip_fraction;
    ++out.report.shards_used;
  }
  return out;
}

LearnerUpdate apply_gradients(const LearnerState& state, const ShardGradients& grads,
                              const LearnerConfig& config) {
  if (grads.report.token_count == 0) throw EmptyBatchError("learner update without unmasked tokens");
  LearnerUpdate out;
  out.report = grads.report;
  lm::OptimizerResult p = lm::optimizer_step(state.policy, grads.policy, state.policy_opt, config.policy_opt);
  out.report.grad_norm = p.grad_norm;
  out.state.policy = std::move(p.params);
  out.state.policy_opt = std::move(p.state);
  if (state.critic) {
    lm::OptimizerResult c = lm::optimizer_step(*state.critic, *grads.critic, *state.critic_opt, config.critic_opt);
    out.state.critic = std::move(c.params);
    out.state.critic_opt = std::move(c.state);
  }
  return out;
}

LearnerUpdate learner_update(const LearnerState& state, const TrajectoryBatch& batch,
                             const LearnerConfig& config, double beta, std::size_t n_workers) {
  return apply_gradients(state, batch_gradients(state, batch, config, beta, n_workers), config);
}

// ---------------------------------------------------------------------------
// Controller

Controller::Controller(const RunConfig& config) : config_(config) {
  config_.validate();
  learner_config_.ppo = config_.ppo;
  learner_config_.policy_opt = config_.optimizer.adam;
  learner_config_.critic_opt = config_.optimizer.critic();
  learner_config_.threaded = config_.pipeline.threaded;

  lm::ModelParams policy = lm::init_params(config_.policy_model());
  reference_ = policy;
  std::optional<lm::ModelParams> critic;
  if (config_.advantage == ppo::AdvantageMode::gae) critic = lm::init_params(config_.critic_model());
  learner_ = make_learner_state(std::move(policy), std::move(critic));

  scorer_ = rewards::make_verifier(config_.reward_mode);
  sampling_key_ = derive_key(config_.seed, "sampling");
  length_key_ = derive_key(config_.seed, "lengths");
  state_.kl = {config_.kl.init_beta, config_.kl.target, config_.kl.horizon};
  state_.version = learner_.policy.version;

  const PipelineConfig& pc = config_.pipeline;
  outbox_ = std::make_unique<BoundedChannel<EngineMessage>>(pc.queue_capacity);
  const std::size_t inbox_capacity = pc.rollout_batch_size + 16;
  outstanding_.assign(pc.n_rollout_engines, 0);
  acked_.resize(pc.n_rollout_engines);
  for (std::size_t e = 0; e < pc.n_rollout_engines; ++e) {
    RolloutWorker::Sink sink;
    if (pc.threaded) {
      sink = [this](EngineMessage&& m) { outbox_->push(std::move(m)); };
    } else {
      sink = [this](EngineMessage&& m) { deferred_.push_back(std::move(m)); };
    }
    workers_.push_back(std::make_unique<RolloutWorker>(e, config_.policy_model(), config_.engine, inbox_capacity,
                                                       std::move(sink), pc.jitter_us,
                                                       derive_key(derive_key(config_.seed, "jitter"), e)));
  }
  if (pc.threaded) {
    for (auto& w : workers_) w->start();
  }
  for (const auto& ack : broadcast_weights(learner_.policy)) {
    if (ack.rejected) throw Error("engine " + std::to_string(ack.engine) + " rejected the initial weights");
  }
  step_start_ = now_seconds();
}

Controller::~Controller() {
  try {
    shutdown();
  } catch (const std::exception& e) {
    spdlog::error("controller shutdown failed: {}", e.what());
  }
}

rollout::RolloutRequest Controller::make_request(std::uint64_t request_id) const {
  const rewards::TaskInstance inst = rewards::make_instance(config_.task, request_id);
  rollout::RolloutRequest r;
  r.request_id = request_id;
  r.prompt = inst.prompt;
  r.n_samples = static_cast<std::uint32_t>(config_.pipeline.group_size);
  r.seed = derive_key(sampling_key_, request_id);
  r.group_id = static_cast<std::int64_t>(request_id);
  const auto& mix = config_.pipeline.length_mix;
  if (!mix.empty()) r.max_new_tokens = mix[CounterRng(length_key_).at(request_id) % mix.size()];
  return r;
}

std::string Controller::channel_state() const {
  std::ostringstream os;
  os << "controller: step " << state_.step << ", version " << state_.version << ", pending groups "
     << state_.pending.size() << ", deferred " << deferred_.size();
  if (outbox_) os << ", outbox " << outbox_->size() << "/" << outbox_->capacity();
  for (std::size_t e = 0; e < workers_.size(); ++e) {
    os << "; engine " << e << ": inbox " << workers_[e]->inbox().size() << "/" << workers_[e]->inbox().capacity()
       << ", outstanding " << outstanding_[e] << (workers_[e]->stopped() ? ", stopped" : "");
  }
  return os.str();
}

void Controller::send(std::size_t engine, EngineMessage msg) {
  RolloutWorker& w = *workers_.at(engine);
  const double deadline = now_seconds() + config_.pipeline.watchdog_seconds;
  while (!w.inbox().try_push(std::move(msg))) {
    // Keep draining our own inbound traffic so a full worker inbox cannot
    // deadlock against a full outbox.
    if (config_.pipeline.threaded) {
      if (auto m = outbox_->pop_for(std::chrono::milliseconds(1))) deferred_.push_back(std::move(*m));
    } else {
      w.step();
    }
    if (w.stopped()) throw Error("engine " + std::to_string(engine) + " stopped; cannot deliver message");
    if (now_seconds() > deadline) {
      ++state_.watchdog_fires;
      throw WatchdogError("watchdog: could not deliver to engine " + std::to_string(engine) + " [" +
                          channel_state() + "]");
    }
  }
}

std::optional<EngineMessage> Controller::receive() {
  if (deferred_.empty()) {
    if (config_.pipeline.threaded) {
      if (auto m = outbox_->pop_for(std::chrono::milliseconds(20))) return m;
      return std::nullopt;
    }
    for (auto& w : workers_) {
      if (w->has_work()) w->step();
    }
  }
  if (deferred_.empty()) return std::nullopt;
  EngineMessage m = std::move(deferred_.front());
  deferred_.pop_front();
  return m;
}

EngineMessage Controller::receive_or_watchdog(const char* waiting_for) {
  const double deadline = now_seconds() + config_.pipeline.watchdog_seconds;
  for (;;) {
    if (auto m = receive()) return std::move(*m);
    bool idle = !config_.pipeline.threaded;
    if (idle) {
      for (const auto& w : workers_) idle = idle && !w->has_work();
    }
    if (idle || now_seconds() > deadline) {
      ++state_.watchdog_fires;
      throw WatchdogError(std::string("watchdog: no message while waiting for ") + waiting_for + " [" +
                          channel_state() + "]");
    }
  }
}

void Controller::on_report(const MetricsReport& r) {
  if (!r.error.empty()) throw Error("rollout engine " + std::to_string(r.engine) + " failed: " + r.error);
}

std::vector<BroadcastAck> Controller::broadcast_weights(const lm::ModelParams& params) {
  for (std::size_t e = 0; e < workers_.size(); ++e) send(e, WeightUpdate{params});
  std::vector<BroadcastAck> acks;
  std::vector<EngineMessage> held;
  while (acks.size() < workers_.size()) {
    EngineMessage m = receive_or_watchdog("weight acknowledgements");
    if (auto* r = std::get_if<MetricsReport>(&m); r && r->is_ack) {
      acks.push_back({r->engine, r->acked_version, r->rejected});
      if (!r->rejected) acked_[r->engine].push_back(r->acked_version);
      continue;
    }
    if (auto* r = std::get_if<MetricsReport>(&m)) on_report(*r);
    held.push_back(std::move(m));
  }
  for (auto it = held.rbegin(); it != held.rend(); ++it) deferred_.push_front(std::move(*it));
  std::sort(acks.begin(), acks.end(), [](const BroadcastAck& a, const BroadcastAck& b) { return a.engine < b.engine; });
  return acks;
}

void Controller::issue(std::size_t engine) {
  const std::uint64_t id = next_request_++;
  send(engine, RolloutTask{make_request(id)});
  ++outstanding_[engine];
}

std::size_t Controller::least_loaded_engine() const {
  return static_cast<std::size_t>(std::min_element(outstanding_.begin(), outstanding_.end()) - outstanding_.begin());
}

TrajectoryBatch Controller::generate_groups(std::size_t n_groups) {
  for (std::size_t i = 0; i < n_groups; ++i) issue(i % workers_.size());
  TrajectoryBatch batch;
  std::size_t received = 0;
  while (received < n_groups) {
    EngineMessage m = receive_or_watchdog("rollout groups");
    if (auto* ready = std::get_if<TrajectoryReady>(&m)) {
      --outstanding_[ready->engine];
      state_.audit.generated += ready->batch.size();
      step_tokens_ += response_tokens(ready->batch);
      batch.append(std::move(ready->batch));
      ++received;
    } else if (auto* r = std::get_if<MetricsReport>(&m)) {
      on_report(*r);
    }
  }
  std::stable_sort(batch.sequences.begin(), batch.sequences.end(), [](const Trajectory& a, const Trajectory& b) {
    return a.request_id != b.request_id ? a.request_id < b.request_id : a.sample_index < b.sample_index;
  });
  return batch;
}

void Controller::annotate(TrajectoryBatch& batch) const {
  for (auto& s : batch.sequences) {
    const std::vector<Token> tokens = s.tokens();
    const std::size_t P = s.prompt.size();
    s.ref_logprobs = lm::sequence_logprobs(reference_, tokens, P).logprobs;
    if (learner_.critic) {
      s.values = lm::sequence_values(*learner_.critic, tokens, P);
    } else {
      s.values.assign(s.length(), 0.0);
    }
  }
}

void Controller::consume(const TrajectoryBatch& batch) {
  for (const auto& s : batch.sequences) {
    if (!consumed_.emplace(s.request_id, s.sample_index).second) ++state_.audit.duplicates;
    const std::uint64_t staleness = state_.version - std::min(state_.version, s.generation_version);
    state_.max_trained_staleness = std::max(state_.max_trained_staleness, staleness);
  }
  state_.audit.trained += batch.size();
}

bool Controller::train_on(TrajectoryBatch batch, MetricsRecord& rec) {
  // Stage 2: rewards, then reference logprobs and values on what survives the filter.
  std::vector<rewards::TaskInstance> instances;
  for (const auto& s : batch.sequences) {
    if (instances.empty() || instances.back().index != s.request_id) {
      instances.push_back(rewards::make_instance(config_.task, s.request_id));
    }
  }
  rewards::score_batch(instances, batch, scorer_);
  for (const auto& s : batch.sequences) {
    step_reward_sum_ += s.total_reward();
    ++step_reward_n_;
    if (s.generation_version <= state_.version) {
      rec.max_staleness_seen = std::max(rec.max_staleness_seen, state_.version - s.generation_version);
    }
  }

  // Stage 3: filter, shaping, advantages.
  if (config_.dynamic_sampling) {
    ppo::FilterResult f = ppo::dynamic_sampling_filter(std::move(batch));
    rec.dropped_groups += f.dropped_groups;
    state_.audit.dropped_filtered += f.dropped_sequences;
    if (f.empty()) return false;
    batch = std::move(f.retained);
  }
  annotate(batch);
  const double beta = state_.kl.beta;
  ppo::shape_rewards(batch, beta, config_.ppo.kl_estimator, config_.ppo.kl_mode);
  if (config_.advantage == ppo::AdvantageMode::gae) {
    ppo::compute_gae(batch, config_.gae);
  } else {
    ppo::grpo_advantages(batch);
  }
  if (config_.ppo.whiten_advantages) ppo::whiten_advantages(batch);
  consume(batch);

  // Stage 4: optimization with KL early stop between epochs.
  UpdateReport last;
  for (std::size_t epoch = 0; epoch < config_.ppo.ppo_epochs; ++epoch) {
    ShardGradients g = batch_gradients(learner_, batch, learner_config_, beta, config_.pipeline.n_learner_workers);
    if (epoch > 0) {
      // The loss pass at the start of this epoch measures the KL reached after the previous one.
      const double observed = kl_probe_ ? kl_probe_(epoch, g.report.kl_mean) : g.report.kl_mean;
      if (observed > config_.ppo.max_kl) {
        rec.early_stopped = true;
        ++state_.early_stops;
        break;
      }
    }
    LearnerUpdate up = apply_gradients(learner_, g, learner_config_);
    learner_ = std::move(up.state);
    last = up.report;
    ++rec.epochs_run;
  }
  if (config_.kl.adaptive) state_.kl = ppo::kl_controller_step(state_.kl, last.kl_mean, config_.ppo.max_kl).state;

  rec.beta = beta;
  rec.mean_kl = last.kl_mean;
  rec.clip_fraction = last.clip_fraction;
  rec.policy_loss = last.policy_loss;
  rec.value_loss = last.value_loss;
  rec.entropy = last.entropy;
  state_.version = learner_.policy.version;
  last_batch_ = std::move(batch);

  for (const auto& ack : broadcast_weights(learner_.policy)) {
    if (ack.rejected) {
      throw Error("engine " + std::to_string(ack.engine) + " rejected weight version " +
                  std::to_string(learner_.policy.version));
    }
  }
  return true;
}

void Controller::emit(MetricsRecord rec) {
  const double now = now_seconds();
  const double elapsed = now - step_start_;
  rec.step = ++state_.step;
  rec.weight_version = state_.version;
  rec.mean_reward = step_reward_n_ ? step_reward_sum_ / static_cast<double>(step_reward_n_) : 0.0;
  rec.dropped_stale = step_dropped_stale_;
  rec.step_time_ms = elapsed * 1e3;
  rec.tokens_per_second = elapsed > 0.0 ? static_cast<double>(step_tokens_) / elapsed : 0.0;
  step_start_ = now;
  step_tokens_ = 0;
  step_dropped_stale_ = 0;
  step_reward_sum_ = 0.0;
  step_reward_n_ = 0;
  history_.push_back(rec);
  if (sink_) sink_(rec);
}

MetricsRecord Controller::run_sync_iteration() {
  if (shut_down_) throw Error("controller is shut down");
  step_start_ = now_seconds();
  MetricsRecord rec;
  // Stage 1 runs to completion before anything else; an all-filtered batch
  // sends us back to it a bounded number of times.
  while (!train_on(generate_groups(config_.pipeline.rollout_batch_size), rec)) {
    if (rec.rerolls >= config_.pipeline.max_rerolls) {
      throw EmptyBatchError("dynamic sampling filtered every group after " + std::to_string(rec.rerolls) +
                            " re-rolls");
    }
    ++rec.rerolls;
  }
  emit(rec);
  return history_.back();
}

void Controller::run_async(std::size_t total_steps) {
  if (shut_down_) throw Error("controller is shut down");
  const PipelineConfig& pc = config_.pipeline;
  const std::uint64_t target = state_.step + total_steps;
  const std::size_t train_batch = pc.effective_train_batch();

  std::size_t in_flight = 0;
  for (std::size_t n : outstanding_) in_flight += n;
  for (; in_flight < pc.rollout_batch_size; ++in_flight) issue(least_loaded_engine());
  step_start_ = now_seconds();

  MetricsRecord rec;
  auto is_stale = [&](const TrajectoryBatch& g) {
    for (const auto& s : g.sequences) {
      if (state_.version > s.generation_version && state_.version - s.generation_version > pc.max_staleness) {
        return true;
      }
    }
    return false;
  };
  auto drop_stale = [&](const TrajectoryBatch& g) {
    state_.audit.dropped_stale += g.size();
    step_dropped_stale_ += g.size();
  };

  while (state_.step < target) {
    EngineMessage m = receive_or_watchdog("trajectories");
    if (auto* r = std::get_if<MetricsReport>(&m)) {
      on_report(*r);
      continue;
    }
    auto* ready = std::get_if<TrajectoryReady>(&m);
    if (!ready) continue;
    --outstanding_[ready->engine];
    state_.audit.generated += ready->batch.size();
    step_tokens_ += response_tokens(ready->batch);
    if (is_stale(ready->batch)) {
      drop_stale(ready->batch);
    } else {
      state_.pending.push_back(std::move(ready->batch));
    }
    issue(least_loaded_engine());

    while (state_.step < target && state_.pending.size() >= train_batch) {
      // Groups can age past the bound while they wait.
      std::deque<TrajectoryBatch> fresh;
      for (auto& g : state_.pending) {
        if (is_stale(g)) {
          drop_stale(g);
        } else {
          fresh.push_back(std::move(g));
        }
      }
      state_.pending = std::move(fresh);
      if (state_.pending.size() < train_batch) break;

      TrajectoryBatch batch;
      for (std::size_t i = 0; i < train_batch; ++i) {
        batch.append(std::move(state_.pending.front()));
        state_.pending.pop_front();
      }
      if (!train_on(std::move(batch), rec)) {
        if (rec.rerolls >= pc.max_rerolls) {
          throw EmptyBatchError("dynamic sampling filtered every group after " + std::to_string(rec.rerolls) +
                                " re-rolls");
        }
        ++rec.rerolls;
        continue;
      }
      emit(rec);
      rec = MetricsRecord{};
    }
  }
}

void Controller::shutdown() {
  if (shut_down_) return;
  shut_down_ = true;
  std::size_t finals = 0;
  auto account = [&](EngineMessage& m) {
    if (auto* ready = std::get_if<TrajectoryReady>(&m)) {
      state_.audit.generated += ready->batch.size();
      state_.audit.leftover += ready->batch.size();
    } else if (auto* r = std::get_if<MetricsReport>(&m); r && r->final_report) {
      state_.audit.abandoned += r->abandoned;
      ++finals;
    }
  };
  for (auto& m : deferred_) account(m);
  deferred_.clear();

  std::size_t expected = 0;
  for (std::size_t e = 0; e < workers_.size(); ++e) {
    if (workers_[e]->stopped()) continue;
    ++expected;
    try {
      send(e, Shutdown{});
    } catch (const Error& err) {
      spdlog::warn("shutdown: {}", err.what());
    }
  }
  const double deadline = now_seconds() + config_.pipeline.watchdog_seconds;
  if (config_.pipeline.threaded) {
    while (finals < expected && now_seconds() < deadline) {
      if (auto m = outbox_->pop_for(std::chrono::milliseconds(20))) account(*m);
    }
  } else {
    for (auto& w : workers_) {
      while (w->step()) {
      }
    }
    for (auto& m : deferred_) account(m);
    deferred_.clear();
  }
  if (finals < expected) spdlog::error("shutdown: only {} of {} engines reported [{}]", finals, expected, channel_state());
  outbox_->close();
  for (auto& w : workers_) {
    w->inbox().close();
    w->join();
  }
  while (auto m = outbox_->try_pop()) account(*m);
  for (const auto& g : state_.pending) state_.audit.leftover += g.size();
  state_.pending.clear();
}

// ---------------------------------------------------------------------------

RunResult train(const RunConfig& config, const Controller::MetricsSink& sink) {
  const double t0 = now_seconds();
  Controller c(config);
  c.set_metrics_sink(sink);
  std::string stop_reason;
  try {
    if (config.pipeline.mode == PipelineMode::sync) {
      for (std::size_t i = 0; i < config.total_steps; ++i) c.run_sync_iteration();
    } else if (config.total_steps > 0) {
      c.run_async(config.total_steps);
    }
  } catch (const TrainingDivergence& e) {
    spdlog::error("training diverged at step {}: {}", c.state().step + 1, e.what());
    if (!c.history().empty()) {
      const MetricsRecord& m = c.history().back();
      spdlog::error("last metrics: reward {} kl {} policy_loss {} value_loss {} entropy {}", m.mean_reward,
                    m.mean_kl, m.policy_loss, m.value_loss, m.entropy);
    }
    spdlog::error("{}", c.channel_state());
    throw;
  } catch (const EmptyBatchError& e) {
    spdlog::error("stopping at step {}: {}", c.state().step + 1, e.what());
    stop_reason = e.what();
  }
  c.shutdown();

  RunResult out;
  out.params = c.policy();
  out.metrics = c.history();
  RunReport& r = out.report;
  r.mode = config.pipeline.mode;
  r.steps = c.state().step;
  r.final_version = c.state().version;
  r.audit = c.state().audit;
  r.early_stops = c.state().early_stops;
  r.max_trained_staleness = c.state().max_trained_staleness;
  const std::size_t window = std::min<std::size_t>(20, out.metrics.size());
  for (std::size_t i = out.metrics.size() - window; i < out.metrics.size(); ++i) {
    r.final_mean_reward += out.metrics[i].mean_reward / static_cast<double>(window);
  }
  r.wall_seconds = now_seconds() - t0;
  r.stop_reason = stop_reason;
  return out;
}

}  // namespace tinyrlhf::pipeline
