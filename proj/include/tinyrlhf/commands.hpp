#pragma once

// The train / bench / eval commands behind the command-line tool.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "tinyrlhf/config.hpp"
#include "tinyrlhf/orchestrator.hpp"

namespace tinyrlhf::cli {

inline constexpr std::size_t kBenchWarmupSteps = 10;
inline constexpr std::size_t kBenchMinSteps = 20;
// Held-out evaluation prompts start here, far past any training request id.
inline constexpr std::uint64_t kEvalIndexOffset = std::uint64_t{1} << 40;

struct StepTimeSummary {
  std::size_t total_steps = 0;
  std::size_t excluded = 0;
  std::size_t counted = 0;
  double mean_ms = 0.0;
  double stddev_ms = 0.0;
};

// Mean and spread of per-step times after dropping the first `excluded` steps.
StepTimeSummary summarize_step_times(std::span<const double> step_ms, std::size_t excluded = kBenchWarmupSteps);

struct BenchResult {
  StepTimeSummary sync;
  StepTimeSummary async;
  double speedup = 0.0;  // sync mean / async mean
  double noise_band = 0.0;  // two standard errors of the speedup, relative
  pipeline::RunReport sync_report;
  pipeline::RunReport async_report;
};

// Runs the configured workload once per mode with identical seeds. Throws
// ConfigError when total_steps < kBenchMinSteps.
BenchResult run_bench(const RunConfig& config);
std::string format_bench_table(const BenchResult& result);
nlohmann::json to_json(const BenchResult& result);

struct EvalResult {
  std::size_t n = 0;
  double accuracy = 0.0;  // exact match
  double mean_partial = 0.0;  // matched-prefix fraction
};

// Greedy decoding over eval_size held-out task instances.
EvalResult evaluate(const lm::ModelParams& params, const RunConfig& config);

// Exit status 0 on success; errors are reported on stderr.
int cmd_train(const std::string& config_path, const std::vector<std::string>& overrides);
int cmd_bench(const std::string& config_path, const std::vector<std::string>& overrides);
int cmd_eval(const std::string& config_path, const std::string& weights_path,
             const std::vector<std::string>& overrides);

}  // namespace tinyrlhf::cli
