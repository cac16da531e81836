// Acceptance gate: one line per criterion, nonzero exit if any fails.
// Usage: acceptance [criterion numbers...]   (default: all)

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <set>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "invariants.hpp"
#include "oracles.hpp"
#include "run_configs.hpp"
#include "test_helpers.hpp"
#include "tinyrlhf/commands.hpp"
#include "tinyrlhf/config.hpp"
#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/orchestrator.hpp"
#include "tinyrlhf/ppo.hpp"
#include "tinyrlhf/rollout.hpp"

using namespace tinyrlhf;
using namespace testutil;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// 1. GAE recursion against the explicit double sum

Outcome gae_oracle() {
  const auto t0 = std::chrono::steady_clock::now();
  CounterRng rng(derive_key(1, "gae"));
  const double grid[] = {0.0, 0.5, 0.95, 1.0};
  double worst = 0.0;
  for (int i = 0; i < 1000; ++i) {
    const double gamma = grid[rng.below(4)], lam = grid[rng.below(4)];
    const std::size_t T = 1 + rng.below(32);
    Trajectory s;
    s.response.assign(T, 0);
    s.mask.assign(T, 1);
    for (std::size_t t = 0; t < T; ++t) {
      s.shaped_rewards.push_back(rng.uniform(-1, 1));
      s.values.push_back(rng.uniform(-1, 1));
    }
    ppo::compute_gae(s, {gamma, lam});
    const auto want = oracle::gae_double_sum(s.shaped_rewards, s.values, gamma, lam);
    worst = std::max(worst, max_abs_diff(s.advantages, want));
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-10 && secs < 5.0, fmt("max |diff| %.3g over 1000 trajectories in %.3f s", worst, secs)};
}

// ---------------------------------------------------------------------------
// 2. Gradient exactness of tinylm composed with the PPO losses

struct LossProblem {
  pipeline::LearnerState state;
  TrajectoryBatch batch;
  ppo::PpoConfig cfg;
  double beta = 0.0;
};

// The minimized objective, computed from scratch with the oracle forward pass.
double oracle_loss(const LossProblem& p, const lm::ModelParams& policy, const lm::ModelParams& critic) {
  double obj = 0.0, vloss = 0.0, ent = 0.0, kl = 0.0;
  std::size_t n = 0;
  for (const auto& s : p.batch.sequences) {
    const auto tokens = s.tokens();
    const std::size_t P = s.prompt.size();
    const auto f = oracle::forward(policy, tokens);
    const auto fv = oracle::forward(critic, tokens);
    for (std::size_t t = 0; t < s.length(); ++t) {
      if (!s.mask[t]) continue;
      ++n;
      const auto& row = f.logits[P + t - 1];
      double mx = row[0];
      for (double x : row) mx = std::max(mx, x);
      double z = 0.0;
      for (double x : row) z += std::exp(x - mx);
      const double lse = mx + std::log(z);
      const double logp = row[static_cast<std::size_t>(tokens[P + t])] - lse;
      double h = 0.0;
      for (double x : row) h -= std::exp(x - lse) * (x - lse);
      const double ratio = std::exp(logp - s.old_logprobs[t]);
      const double a = s.advantages[t];
      obj += std::min(ratio * a, std::clamp(ratio, 1.0 - p.cfg.eps_low, 1.0 + p.cfg.eps_high) * a);
      const double d = fv.values[P + t - 1] - s.returns[t];
      vloss += d * d;
      ent += h;
      const double lr = logp - s.ref_logprobs[t];
      kl += 0.5 * lr * lr;
    }
  }
  const double N = static_cast<double>(n);
  return -obj / N + p.cfg.c1 * vloss / N - p.cfg.c2 * ent / N + p.beta * kl / N;
}

LossProblem make_problem(std::uint64_t seed, bool all_clipped) {
  CounterRng rng(derive_key(seed, "grad-problem"));
  LossProblem p;
  const auto pc = tiny_config(7, 6, 8, 14, 2, false, seed);
  auto cc = pc;
  cc.has_value_head = true;
  p.state = pipeline::make_learner_state(random_params(pc, seed, 0.6), random_params(cc, seed + 1000, 0.6));
  p.cfg.eps_low = 0.2;
  p.cfg.eps_high = 0.28;
  p.cfg.c1 = 0.5;
  p.cfg.c2 = all_clipped ? 0.0 : 0.03;
  p.cfg.kl_estimator = ppo::KlEstimator::k2;
  p.cfg.kl_mode = ppo::KlMode::loss_term;
  p.beta = all_clipped ? 0.0 : 0.2;
  for (int i = 0; i < 3; ++i) {
    Trajectory s;
    s.prompt = random_tokens(rng, 2 + rng.below(3), 7);
    s.response = random_tokens(rng, 2 + rng.below(5), 7);
    const std::size_t T = s.length();
    const auto lp = lm::sequence_logprobs(p.state.policy, s.tokens(), s.prompt.size()).logprobs;
    for (std::size_t t = 0; t < T; ++t) {
      s.mask.push_back(all_clipped || rng.below(5) != 0);
      s.old_logprobs.push_back(all_clipped ? lp[t] - 0.5 : lp[t] + rng.uniform(-0.3, 0.3));
      s.ref_logprobs.push_back(lp[t] + rng.uniform(-0.5, 0.5));
      s.advantages.push_back(all_clipped ? rng.uniform(0.1, 1.0) : rng.uniform(-1, 1));
      s.returns.push_back(rng.uniform(-1, 1));
    }
    p.batch.sequences.push_back(std::move(s));
  }
  return p;
}

Outcome gradient_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  const double h = 1e-5;
  double worst = 0.0;
  std::size_t coords = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const LossProblem p = make_problem(seed, false);
    pipeline::LearnerConfig lc;
    lc.ppo = p.cfg;
    const auto g = pipeline::batch_gradients(p.state, p.batch, lc, p.beta, 1);
    CounterRng pick(derive_key(seed, "coords"));
    for (int k = 0; k < 100; ++k) {
      const bool critic = k % 4 == 3;
      lm::ModelParams pol = p.state.policy, cri = *p.state.critic;
      lm::ModelParams& target = critic ? cri : pol;
      const auto& grads = critic ? *g.critic : g.policy;
      const std::size_t ti = pick.below(target.tensors.size());
      const std::size_t i = pick.below(target.tensors[ti].size());
      const double keep = target.tensors[ti].data[i];
      target.tensors[ti].data[i] = keep + h;
      const double fp = oracle_loss(p, pol, cri);
      target.tensors[ti].data[i] = keep - h;
      const double fm = oracle_loss(p, pol, cri);
      worst = std::max(worst, rel_err((fp - fm) / (2 * h), grads.tensors[ti].data[i]));
      ++coords;
    }
  }

  // Every token clipped with zero entropy and KL weight: the policy gradient
  // must vanish exactly and the loss must be flat in the policy parameters.
  const LossProblem p = make_problem(99, true);
  pipeline::LearnerConfig lc;
  lc.ppo = p.cfg;
  const auto g = pipeline::batch_gradients(p.state, p.batch, lc, p.beta, 1);
  const double clipped_norm = g.policy.l2_norm();
  double fd_max = 0.0;
  CounterRng pick(derive_key(99, "coords"));
  for (int k = 0; k < 30; ++k) {
    lm::ModelParams pol = p.state.policy;
    const std::size_t ti = pick.below(pol.tensors.size());
    const std::size_t i = pick.below(pol.tensors[ti].size());
    const double keep = pol.tensors[ti].data[i];
    pol.tensors[ti].data[i] = keep + h;
    const double fp = oracle_loss(p, pol, *p.state.critic);
    pol.tensors[ti].data[i] = keep - h;
    const double fm = oracle_loss(p, pol, *p.state.critic);
    fd_max = std::max(fd_max, std::abs((fp - fm) / (2 * h)));
  }
  const double secs = seconds_since(t0);
  const bool pass = worst < 1e-4 && clipped_norm == 0.0 && fd_max < 1e-8 && secs < 60.0;
  return {pass, fmt("max rel err %.3g on %zu coords x 10 seeds; clipped case |g| = %.3g, max |fd| %.3g; %.2f s",
                    worst, coords / 10, clipped_norm, fd_max, secs)};
}

// ---------------------------------------------------------------------------
// 3. KV-cache coherence

Outcome kv_coherence() {
  CounterRng rng(derive_key(3, "kv"));
  double worst = 0.0;
  std::size_t positions = 0;
  for (int seq = 0; seq < 200; ++seq) {
    const std::size_t layers = 1 + seq % 2;
    const auto cfg = tiny_config(11, 8, 16, 20, layers, false, static_cast<std::uint64_t>(seq));
    const auto params = random_params(cfg, static_cast<std::uint64_t>(seq / 20), 0.7);
    const auto tokens = random_tokens(rng, 1 + rng.below(20), 11);
    const auto full = lm::forward_full(params, tokens);

    lm::KvCache cache(cfg);
    rollout::BlockAllocator alloc(8, 3, layers, cfg.d_model);
    rollout::BlockTable table;
    rollout::PagedKvStore paged(alloc, table);
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      const auto a = lm::forward_step(params, cache, tokens[t]);
      if (t == table.capacity(3)) table.blocks.push_back(*alloc.allocate());
      const auto b = lm::forward_step(params, paged, tokens[t]);
      for (std::size_t v = 0; v < cfg.vocab_size; ++v) {
        worst = std::max({worst, std::abs(a[v] - full.row(t)[v]), std::abs(b[v] - full.row(t)[v])});
      }
      ++positions;
    }
  }
  return {worst < 1e-9, fmt("max |diff| %.3g over %zu positions of 200 sequences (contiguous and paged)", worst,
                            positions)};
}

// ---------------------------------------------------------------------------
// 4. Allocator soundness under random admit / tick / release

Outcome allocator_soundness() {
  const auto params = random_params(tiny_config(9, 8, 12, 32, 2), 4, 0.5);
  rollout::EngineConfig ec;
  ec.total_blocks = 18;
  ec.block_size = 4;
  ec.max_batch = 12;
  ec.max_new_tokens = 16;
  ec.eos_token = 8;
  rollout::Engine engine(params.config, ec);
  engine.set_weights(params);

  CounterRng rng(derive_key(4, "ops"));
  std::size_t violations = 0, admits = 0, ticks = 0, releases = 0;
  std::string first;
  std::uint64_t next_id = 0;
  auto check = [&] {
    const auto v = engine_violations(engine);
    if (!v.empty() && first.empty()) first = v.front();
    violations += v.size();
  };
  for (int op = 0; op < 10000; ++op) {
    const auto kind = rng.below(10);
    if (kind < 3) {
      rollout::RolloutRequest r;
      r.request_id = next_id++;
      r.prompt = random_tokens(rng, 1 + rng.below(14), 8);
      r.n_samples = static_cast<std::uint32_t>(1 + rng.below(4));
      r.seed = r.request_id;
      r.max_new_tokens = 1 + rng.below(16);
      engine.admit(std::move(r));
      ++admits;
    } else if (kind < 9) {
      engine.tick();
      ++ticks;
    } else {
      const auto sessions = engine.sessions();
      if (!sessions.empty()) {
        engine.release(sessions[rng.below(sessions.size())].id);
        ++releases;
      }
    }
    check();
    engine.collect();
  }
  // Teardown: drop everything still running or waiting.
  while (!engine.idle()) {
    const auto sessions = engine.sessions();
    if (sessions.empty()) {
      engine.tick();
    } else {
      engine.release(sessions.front().id);
    }
    check();
  }
  engine.collect();
  const bool all_free = engine.allocator().free_count() == ec.total_blocks;
  if (!all_free) ++violations;
  return {violations == 0,
          fmt("%zu violations (%zu admits, %zu ticks, %zu releases, %llu preemptions); free list %zu/%zu after teardown%s%s",
              violations, admits, ticks, releases, static_cast<unsigned long long>(engine.stats().preemptions),
              engine.allocator().free_count(), ec.total_blocks, first.empty() ? "" : "; first: ", first.c_str())};
}

// ---------------------------------------------------------------------------
// 5. Paging transparency

Outcome paging_transparency() {
  const auto params = random_params(tiny_config(12, 8, 16, 28, 2), 5, 0.6);
  rollout::EngineConfig ec;
  ec.total_blocks = 30;
  ec.block_size = 3;
  ec.max_batch = 10;
  ec.max_new_tokens = 14;
  ec.eos_token = 11;
  rollout::Engine engine(params.config, ec);
  engine.set_weights(params);
  CounterRng rng(derive_key(5, "prompts"));
  std::map<std::pair<std::uint64_t, std::uint32_t>, std::vector<Token>> want;
  for (std::uint64_t id = 0; id < 100; ++id) {
    rollout::RolloutRequest r;
    r.request_id = id;
    r.prompt = random_tokens(rng, 1 + rng.below(12), 11);
    r.n_samples = static_cast<std::uint32_t>(1 + id % 3);
    r.seed = derive_key(5, id);
    for (std::uint32_t k = 0; k < r.n_samples; ++k) {
      want[{id, k}] = rollout::reference_generate(params, r.prompt, r.seed, k, ec);
    }
    engine.admit(std::move(r));
    if (id % 4 == 3) engine.tick();
  }
  while (!engine.idle()) engine.tick();
  const auto got = engine.collect();
  std::size_t mismatches = 0;
  std::set<std::uint64_t> prompts;
  for (const auto& t : got.sequences) {
    mismatches += t.response != want.at({t.request_id, t.sample_index});
    prompts.insert(t.request_id);
  }
  mismatches += want.size() - got.size();
  return {mismatches == 0 && prompts.size() == 100,
          fmt("%zu mismatches over %zu samples of %zu prompts (%llu preemptions)", mismatches, want.size(),
              prompts.size(), static_cast<unsigned long long>(engine.stats().preemptions))};
}

// ---------------------------------------------------------------------------
// 6. KL estimators

Outcome kl_estimators() {
  CounterRng rng(derive_key(6, "kl"));
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::vector<double> p(5), q(5);
    for (auto& x : p) x = rng.uniform(1e-3, 1.0);
    for (auto& x : q) x = rng.uniform(1e-3, 1.0);
    const double sp = std::accumulate(p.begin(), p.end(), 0.0), sq = std::accumulate(q.begin(), q.end(), 0.0);
    for (auto& x : p) x /= sp;
    for (auto& x : q) x /= sq;
    double mean_k1 = 0.0;
    for (std::size_t i = 0; i < 5; ++i) {
      mean_k1 += p[i] * ppo::kl_estimate(std::log(p[i]), std::log(q[i]), ppo::KlEstimator::k1);
    }
    worst = std::max(worst, std::abs(mean_k1 - oracle::kl_exact(p, q)));
  }
  std::size_t negatives = 0;
  for (int i = 0; i < 1000000; ++i) {
    const double logp = rng.uniform(-20, 0), logq = rng.uniform(-20, 0);
    negatives += ppo::kl_estimate(logp, logq, ppo::KlEstimator::k2) < 0.0;
    negatives += ppo::kl_estimate(logp, logq, ppo::KlEstimator::k3) < 0.0;
  }
  return {worst < 1e-12 && negatives == 0,
          fmt("mean k1 vs exact KL max |diff| %.3g on 1000 pairs; %zu negative k2/k3 values in 1e6 draws", worst,
              negatives)};
}

// ---------------------------------------------------------------------------
// 7. Data-parallel equivalence

Outcome data_parallel() {
  auto cfg = small_run(PipelineMode::sync, 7);
  cfg.pipeline.rollout_batch_size = 8;
  TrajectoryBatch batch;
  {
    pipeline::Controller c(cfg);
    c.run_sync_iteration();
    batch = c.last_batch();
  }
  pipeline::LearnerConfig lc;
  lc.ppo = cfg.ppo;
  lc.policy_opt = cfg.optimizer.adam;
  lc.critic_opt = cfg.optimizer.critic();
  lc.threaded = true;
  const auto state = pipeline::make_learner_state(lm::init_params(cfg.policy_model()),
                                                  lm::init_params(cfg.critic_model()));
  const auto base = pipeline::learner_update(state, batch, lc, 0.02, 1);
  double worst = 0.0;
  for (std::size_t n : {2, 4}) {
    const auto other = pipeline::learner_update(state, batch, lc, 0.02, n);
    worst = std::max({worst, max_param_diff(base.state.policy, other.state.policy),
                      max_param_diff(*base.state.critic, *other.state.critic)});
  }
  return {worst < 1e-8, fmt("max |param diff| %.3g for n_workers 1 vs {2, 4} on a %zu-sequence batch", worst,
                            batch.size())};
}

// ---------------------------------------------------------------------------
// 8. Pipeline audit

Outcome pipeline_audit() {
  auto cfg = small_run(PipelineMode::async, 8);
  cfg.total_steps = 50;
  cfg.pipeline.rollout_batch_size = 8;
  cfg.pipeline.train_batch_size = 4;
  cfg.pipeline.max_staleness = 1;
  cfg.pipeline.length_mix = {1, 3};
  cfg.ppo.ppo_epochs = 1;
  pipeline::RunResult async;
  std::string watchdog;
  try {
    async = pipeline::train(cfg);
  } catch (const WatchdogError& e) {
    watchdog = e.what();
  }
  if (!watchdog.empty()) return {false, "watchdog fired: " + watchdog};
  const auto& a = async.report.audit;

  auto sync_cfg = small_run(PipelineMode::sync, 8);
  sync_cfg.total_steps = 10;
  const auto s1 = pipeline::train(sync_cfg);
  const auto s2 = pipeline::train(sync_cfg);
  bool same = max_param_diff(s1.params, s2.params) == 0.0 && s1.metrics.size() == s2.metrics.size();
  for (std::size_t i = 0; same && i < s1.metrics.size(); ++i) {
    same = s1.metrics[i].mean_reward == s2.metrics[i].mean_reward &&
           s1.metrics[i].policy_loss == s2.metrics[i].policy_loss && s1.metrics[i].mean_kl == s2.metrics[i].mean_kl;
  }

  const bool pass = async.report.steps == 50 && a.balanced() && async.report.max_trained_staleness <= 1 && same;
  return {pass, fmt("async 50 steps: generated %llu = trained %llu + stale %llu + filtered %llu + leftover %llu, "
                    "duplicates %llu, max trained staleness %llu (bound 1), watchdog silent; sync rerun %s",
                    static_cast<unsigned long long>(a.generated), static_cast<unsigned long long>(a.trained),
                    static_cast<unsigned long long>(a.dropped_stale), static_cast<unsigned long long>(a.dropped_filtered),
                    static_cast<unsigned long long>(a.leftover), static_cast<unsigned long long>(a.duplicates),
                    static_cast<unsigned long long>(async.report.max_trained_staleness),
                    same ? "bitwise identical" : "DIFFERS")};
}

// ---------------------------------------------------------------------------
// 9. Async ordering on the bimodal-length benchmark

Outcome async_ordering(const std::string& config_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const RunConfig cfg = load_config(config_dir + "/bench_bimodal.conf");
  const auto r = cli::run_bench(cfg);
  const double secs = seconds_since(t0);
  const bool pass = r.async.mean_ms <= r.sync.mean_ms && r.speedup > 1.0 && secs < 300.0 &&
                    r.sync.excluded == 10 && r.async.excluded == 10;
  return {pass, fmt("sync %.1f ms/step, async %.1f ms/step (first 10 of %zu steps excluded), speedup %.3fx "
                    "+/- %.3f, %.1f s",
                    r.sync.mean_ms, r.async.mean_ms, r.sync.total_steps, r.speedup, r.noise_band * r.speedup, secs)};
}

// ---------------------------------------------------------------------------
// 10. End-to-end RLVR on the copy task

struct E2e {
  bool reached = false;
  std::size_t step = 0;
  double best_window = 0.0;
  double seconds = 0.0;
  double greedy_accuracy = 0.0;
};

E2e run_until(const RunConfig& cfg, std::size_t limit, double bar) {
  const auto t0 = std::chrono::steady_clock::now();
  E2e out;
  pipeline::Controller c(cfg);
  std::vector<double> rewards;
  double window_sum = 0.0;
  // `limit` counts optimizer updates; each iteration performs up to ppo.epochs of them.
  while (c.state().version < limit) {
    const auto rec = c.run_sync_iteration();
    rewards.push_back(rec.mean_reward);
    window_sum += rec.mean_reward;
    if (rewards.size() > 20) window_sum -= rewards[rewards.size() - 21];
    if (rewards.size() >= 20) {
      const double window = window_sum / 20.0;
      out.best_window = std::max(out.best_window, window);
      if (window >= bar) {
        out.reached = true;
        out.step = c.state().version;
        break;
      }
    }
  }
  out.greedy_accuracy = cli::evaluate(c.policy(), cfg).accuracy;
  out.seconds = seconds_since(t0);
  return out;
}

Outcome end_to_end(const std::string& config_dir) {
  const RunConfig gae = load_config(config_dir + "/copy_ppo_gae.conf");
  const RunConfig grpo = load_config(config_dir + "/copy_grpo_dapo.conf");
  const E2e a = run_until(gae, 2000, 0.9);
  const E2e b = run_until(grpo, 3000, 0.9);
  const bool pass = a.reached && b.reached && a.seconds < 900.0 && b.seconds < 900.0;
  auto describe = [](const char* name, const E2e& e, std::size_t limit) {
    return e.reached ? fmt("%s reached 0.9 after %zu/%zu optimizer steps (%.0f s, greedy exact-match %.3f)", name, e.step, limit,
                           e.seconds, e.greedy_accuracy)
                     : fmt("%s best 20-step mean %.3f within %zu optimizer steps (%.0f s)", name, e.best_window, limit,
                           e.seconds);
  };
  return {pass, describe("PPO+GAE", a, 2000) + "; " + describe("GRPO+dynamic sampling", b, 3000)};
}

// ---------------------------------------------------------------------------
// 11. Dynamic-sampling filter behavior

Trajectory scored(std::int64_t group, double reward) {
  Trajectory t;
  t.group_id = group;
  t.response = {1, 2};
  t.mask = {1, 1};
  t.rewards = {0.0, reward};
  return t;
}

Outcome dapo_filter() {
  TrajectoryBatch b;
  for (int i = 0; i < 4; ++i) b.sequences.push_back(scored(0, 1.0));
  for (int i = 0; i < 4; ++i) b.sequences.push_back(scored(1, i % 2 ? 1.0 : 0.0));
  for (int i = 0; i < 4; ++i) b.sequences.push_back(scored(2, 0.0));
  for (int i = 0; i < 4; ++i) b.sequences.push_back(scored(3, 0.25 * i));
  const auto f = ppo::dynamic_sampling_filter(b);
  std::set<std::int64_t> kept;
  for (const auto& s : f.retained.sequences) kept.insert(s.group_id);
  const bool synthetic_ok = f.dropped_groups == 2 && f.dropped_sequences == 8 && kept == std::set<std::int64_t>{1, 3};

  // Untrained policy + exact reward: groups are almost always flat at zero.
  auto cfg = small_run(PipelineMode::sync, 11);
  cfg.advantage = ppo::AdvantageMode::grpo;
  cfg.dynamic_sampling = true;
  cfg.reward_mode = rewards::RewardMode::exact;
  cfg.pipeline.max_rerolls = 3;
  bool bounded = false;
  std::uint64_t filtered = 0;
  {
    pipeline::Controller c(cfg);
    try {
      c.run_sync_iteration();
    } catch (const EmptyBatchError&) {
      bounded = true;
    }
    c.shutdown();
    filtered = c.state().audit.dropped_filtered;
    bounded = bounded && filtered == 4 * 4 * 3 && c.state().audit.balanced();
  }
  // With a generous bound the re-roll eventually finds an informative group.
  cfg.pipeline.max_rerolls = 1000;
  pipeline::Controller c(cfg);
  const auto rec = c.run_sync_iteration();
  const bool recovered = rec.rerolls > 0 && rec.epochs_run > 0 && rec.dropped_groups > 0;

  return {synthetic_ok && bounded && recovered,
          fmt("synthetic: dropped %zu flat groups, kept %zu mixed; bound 3: gave up after 4 rounds (%llu filtered); "
              "bound 1000: trained after %zu re-rolls, %llu groups dropped",
              f.dropped_groups, kept.size(), static_cast<unsigned long long>(filtered), rec.rerolls,
              static_cast<unsigned long long>(rec.dropped_groups))};
}

}  // namespace

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::warn);
  const std::string config_dir = TINYRLHF_CONFIG_DIR;
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"GAE oracle", gae_oracle},
      {"gradient exactness", gradient_exactness},
      {"KV-cache coherence", kv_coherence},
      {"allocator soundness", allocator_soundness},
      {"paging transparency", paging_transparency},
      {"KL estimators", kl_estimators},
      {"data-parallel equivalence", data_parallel},
      {"pipeline audit", pipeline_audit},
      {"async ordering", [&] { return async_ordering(config_dir); }},
      {"end-to-end RLVR", [&] { return end_to_end(config_dir); }},
      {"dynamic-sampling filter", dapo_filter},
  };
  std::set<std::size_t> selected;
  for (int i = 1; i < argc; ++i) selected.insert(static_cast<std::size_t>(std::stoul(argv[i])));

  int failures = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!selected.empty() && !selected.count(i + 1)) continue;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("[%s] criterion %zu (%s): %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(),
                o.detail.c_str());
    std::fflush(stdout);
  }
  return failures == 0 ? 0 : 1;
}
