#include "tinyrlhf/commands.hpp"

#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>

#include <spdlog/spdlog.h>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/metrics.hpp"
#include "tinyrlhf/rewards.hpp"
#include "tinyrlhf/rollout.hpp"
#include "tinyrlhf/weights_io.hpp"

namespace tinyrlhf::cli {

StepTimeSummary summarize_step_times(std::span<const double> step_ms, std::size_t excluded) {
  StepTimeSummary s;
  s.total_steps = step_ms.size();
  s.excluded = std::min(excluded, step_ms.size());
  s.counted = step_ms.size() - s.excluded;
  if (s.counted == 0) return s;
  double sum = 0.0;
  for (std::size_t i = s.excluded; i < step_ms.size(); ++i) sum += step_ms[i];
  s.mean_ms = sum / static_cast<double>(s.counted);
  double var = 0.0;
  for (std::size_t i = s.excluded; i < step_ms.size(); ++i) var += (step_ms[i] - s.mean_ms) * (step_ms[i] - s.mean_ms);
  s.stddev_ms = s.counted > 1 ? std::sqrt(var / static_cast<double>(s.counted - 1)) : 0.0;
  return s;
}

namespace {

std::vector<double> step_times(const std::vector<pipeline::MetricsRecord>& metrics) {
  std::vector<double> out;
  out.reserve(metrics.size());
  for (const auto& m : metrics) out.push_back(m.step_time_ms);
  return out;
}

double relative_se(const StepTimeSummary& s) {
  if (s.counted < 2 || s.mean_ms <= 0.0) return 0.0;
  return s.stddev_ms / std::sqrt(static_cast<double>(s.counted)) / s.mean_ms;
}

}  // namespace

BenchResult run_bench(const RunConfig& config) {
  if (config.total_steps < kBenchMinSteps) {
    throw ConfigError("bench needs run.total_steps >= " + std::to_string(kBenchMinSteps) + " (got " +
                      std::to_string(config.total_steps) + "); the first " + std::to_string(kBenchWarmupSteps) +
                      " steps are excluded from the means");
  }
  BenchResult out;
  RunConfig sync_cfg = config;
  sync_cfg.pipeline.mode = PipelineMode::sync;
  RunConfig async_cfg = config;
  async_cfg.pipeline.mode = PipelineMode::async;

  spdlog::info("bench: sync run, {} steps", config.total_steps);
  const pipeline::RunResult s = pipeline::train(sync_cfg);
  spdlog::info("bench: async run, {} steps", config.total_steps);
  const pipeline::RunResult a = pipeline::train(async_cfg);

  const auto st = step_times(s.metrics);
  const auto at = step_times(a.metrics);
  out.sync = summarize_step_times(st);
  out.async = summarize_step_times(at);
  out.speedup = out.async.mean_ms > 0.0 ? out.sync.mean_ms / out.async.mean_ms : 0.0;
  out.noise_band = 2.0 * std::hypot(relative_se(out.sync), relative_se(out.async));
  out.sync_report = s.report;
  out.async_report = a.report;
  return out;
}

std::string format_bench_table(const BenchResult& r) {
  char buf[512];
  std::ostringstream os;
  os << "mode    steps  counted  mean step (s)  stddev (s)\n";
  std::snprintf(buf, sizeof buf, "sync    %5zu  %7zu  %13.4f  %10.4f\n", r.sync.total_steps, r.sync.counted,
                r.sync.mean_ms / 1e3, r.sync.stddev_ms / 1e3);
  os << buf;
  std::snprintf(buf, sizeof buf, "async   %5zu  %7zu  %13.4f  %10.4f\n", r.async.total_steps, r.async.counted,
                r.async.mean_ms / 1e3, r.async.stddev_ms / 1e3);
  os << buf;
  std::snprintf(buf, sizeof buf, "speedup (sync / async): %.3fx  (noise band +/- %.3f)\n", r.speedup,
                r.noise_band * r.speedup);
  os << buf;
  os << "means exclude the first " << r.sync.excluded << " steps\n";
  return os.str();
}

nlohmann::json to_json(const BenchResult& r) {
  auto summary = [](const StepTimeSummary& s) {
    return nlohmann::json{{"total_steps", s.total_steps}, {"excluded_steps", s.excluded}, {"counted_steps", s.counted},
                          {"mean_step_ms", s.mean_ms},    {"stddev_step_ms", s.stddev_ms}};
  };
  return nlohmann::json{{"sync", summary(r.sync)},
                        {"async", summary(r.async)},
                        {"speedup", r.speedup},
                        {"noise_band", r.noise_band * r.speedup},
                        {"sync_report", tinyrlhf::to_json(r.sync_report)},
                        {"async_report", tinyrlhf::to_json(r.async_report)}};
}

EvalResult evaluate(const lm::ModelParams& params, const RunConfig& config) {
  EvalResult out;
  out.n = config.eval_size;
  if (out.n == 0) return out;
  const auto tasks = rewards::generate_tasks(config.task, out.n, kEvalIndexOffset);
  for (const auto& inst : tasks) {
    const auto response = rollout::greedy_generate(params, inst.prompt, config.engine.max_new_tokens,
                                                   config.engine.eos_token);
    out.accuracy += rewards::verify(inst, response, rewards::RewardMode::exact);
    out.mean_partial += rewards::verify(inst, response, rewards::RewardMode::partial);
  }
  out.accuracy /= static_cast<double>(out.n);
  out.mean_partial /= static_cast<double>(out.n);
  return out;
}

namespace {

template <typename F>
int guarded(F&& body) {
  try {
    return body();
  } catch (const ParseError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

RunConfig load_with_overrides(const std::string& path, const std::vector<std::string>& overrides) {
  RunConfig cfg = load_config(path);
  apply_overrides(cfg, overrides);
  return cfg;
}

}  // namespace

int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides) {
  return guarded([&] {
    const RunConfig cfg = load_with_overrides(config_path, overrides);
    MetricsWriter writer(cfg.metrics_path);
    const pipeline::RunResult result = pipeline::train(cfg, [&](const pipeline::MetricsRecord& m) {
      writer.write(m);
      spdlog::info("step {} v{} reward {:.4f} kl {:.5f} clip {:.3f} {:.1f} ms", m.step, m.weight_version,
                   m.mean_reward, m.mean_kl, m.clip_fraction, m.step_time_ms);
    });
    if (!cfg.weights_path.empty()) save_weights(result.params, cfg.weights_path);
    nlohmann::json report = tinyrlhf::to_json(result.report);
    report["config"] = serialize_config(cfg);
    if (!cfg.report_path.empty()) write_json_file(cfg.report_path, report);
    std::cout << "trained " << result.report.steps << " steps (" << to_string(cfg.pipeline.mode)
              << "), final version " << result.report.final_version << ", mean reward over last steps "
              << result.report.final_mean_reward << "\n";
    const auto& a = result.report.audit;
    std::cout << "audit: generated " << a.generated << " = trained " << a.trained << " + dropped_stale "
              << a.dropped_stale << " + dropped_filtered " << a.dropped_filtered << " + leftover " << a.leftover
              << (a.balanced() ? " (balanced)" : " (UNBALANCED)") << "\n";
    if (!a.balanced()) return 1;
    if (!result.report.stop_reason.empty()) {
      std::cerr << "stopped early: " << result.report.stop_reason << "\n";
      return 3;
    }
    return 0;
  });
}

int cmd_bench(const std::string& config_path, const std::vector<std::string>& overrides) {
  return guarded([&] {
    const RunConfig cfg = load_with_overrides(config_path, overrides);
    const BenchResult r = run_bench(cfg);
    std::cout << format_bench_table(r);
    if (!cfg.bench_path.empty()) write_json_file(cfg.bench_path, to_json(r));
    return 0;
  });
}

int cmd_eval(const std::string& config_path, const std::string& weights_path,
             const std::vector<std::string>& overrides) {
  return guarded([&] {
    const RunConfig cfg = load_with_overrides(config_path, overrides);
    const lm::ModelParams params = load_weights(weights_path, cfg.policy_model());
    const EvalResult r = evaluate(params, cfg);
    const nlohmann::json j{{"task", std::string(rewards::to_string(cfg.task.kind))},
                           {"n", r.n},
                           {"accuracy", r.accuracy},
                           {"mean_partial", r.mean_partial},
                           {"weights_version", params.version}};
    std::cout << j.dump(2) << "\n";
    return 0;
  });
}

}  // namespace tinyrlhf::cli
