#pragma once

// Verifiable-reward task suite: deterministic prompt generators and
// rule-based verifiers standing in for a learned reward model.
//
// Token layout for a vocabulary of size V: digits 0 .. V-3, separator V-2,
// end-of-sequence V-1. Prompts are the digit payload followed by the separator.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string_view>
#include <vector>

#include "tinyrlhf/trajectory.hpp"

namespace tinyrlhf::rewards {

enum class TaskKind { copy, reverse, modular_add };
enum class RewardMode { exact, partial };

TaskKind parse_task_kind(std::string_view s);
RewardMode parse_reward_mode(std::string_view s);
std::string_view to_string(TaskKind k);
std::string_view to_string(RewardMode m);

struct TaskSpec {
  TaskKind kind = TaskKind::copy;
  std::size_t vocab_size = 16;
  std::size_t prompt_len = 8;
  std::size_t answer_len = 8;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t digit_base() const noexcept { return vocab_size - 2; }
  Token separator() const noexcept { return static_cast<Token>(vocab_size - 2); }
  Token eos() const noexcept { return static_cast<Token>(vocab_size - 1); }
};

struct TaskInstance {
  std::uint64_t index = 0;
  std::vector<Token> prompt;  // payload + separator
  std::vector<Token> answer;
  Token eos = 0;
};

// Deterministic in (spec, index).
TaskInstance make_instance(const TaskSpec& spec, std::uint64_t index);

// Instances first_index .. first_index + n - 1.
std::vector<TaskInstance> generate_tasks(const TaskSpec& spec, std::size_t n, std::uint64_t first_index = 0);

// The response is cut at the first EOS. Exact mode: 1 iff it equals the
// answer. Partial mode: length of the matched prefix over answer length.
double verify(const TaskInstance& instance, std::span<const Token> response, RewardMode mode);

// Pluggable scalar scorer; verify() bound to a mode is the default.
using Scorer = std::function<double(const TaskInstance&, std::span<const Token>)>;

Scorer make_verifier(RewardMode mode);

// Writes each sequence's score on its final response token and zero elsewhere.
// Sequences are matched to instances through request_id == instance.index.
void score_batch(std::span<const TaskInstance> instances, TrajectoryBatch& batch, const Scorer& scorer);
void score_batch(std::span<const TaskInstance> instances, TrajectoryBatch& batch, RewardMode mode);

}  // namespace tinyrlhf::rewards
