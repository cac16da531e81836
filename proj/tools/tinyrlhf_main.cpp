// Command-line front end: train, bench and eval subcommands.
// Log verbosity follows SPDLOG_LEVEL (e.g. SPDLOG_LEVEL=debug); default is info.

#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/cfg/env.h>
#include <spdlog/spdlog.h>

#include "tinyrlhf/commands.hpp"

int main(int argc, char** argv) {
  spdlog::set_level(spdlog::level::info);
  spdlog::cfg::load_env_levels();

  CLI::App app{"tinyrlhf: desk-scale RLHF with PPO/GRPO, paged rollouts and an async pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  std::string weights_path;
  std::vector<std::string> overrides;

  auto* train = app.add_subcommand("train", "run a training job");
  train->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  train->add_option("--set", overrides, "override a config key, key=value (repeatable)");

  auto* bench = app.add_subcommand("bench", "compare sync and async per-step time");
  bench->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  bench->add_option("--set", overrides, "override a config key, key=value (repeatable)");

  auto* eval = app.add_subcommand("eval", "greedy accuracy of saved weights on held-out tasks");
  eval->add_option("--config", config_path, "config file")->required()->check(CLI::ExistingFile);
  eval->add_option("--weights", weights_path, "weights file")->required()->check(CLI::ExistingFile);
  eval->add_option("--set", overrides, "override a config key, key=value (repeatable)");

  CLI11_PARSE(app, argc, argv);

  if (train->parsed()) return tinyrlhf::cli::cmd_train(config_path, overrides);
  if (bench->parsed()) return tinyrlhf::cli::cmd_bench(config_path, overrides);
  return tinyrlhf::cli::cmd_eval(config_path, weights_path, overrides);
}
