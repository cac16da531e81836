#include <doctest.h>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/rewards.hpp"

using namespace tinyrlhf;
using namespace tinyrlhf::rewards;

namespace {

TaskSpec spec(TaskKind kind, std::size_t prompt_len = 6, std::size_t answer_len = 6, std::size_t vocab = 12) {
  TaskSpec s;
  s.kind = kind;
  s.vocab_size = vocab;
  s.prompt_len = prompt_len;
  s.answer_len = answer_len;
  s.seed = 42;
  return s;
}

}  // namespace

TEST_CASE("task instances are deterministic and well formed") {
  const auto s = spec(TaskKind::copy);
  const auto a = make_instance(s, 17);
  const auto b = make_instance(s, 17);
  CHECK(a.prompt == b.prompt);
  CHECK(a.prompt.size() == 7);
  CHECK(a.prompt.back() == 10);
  CHECK(a.eos == 11);
  CHECK(a.answer == std::vector<Token>(a.prompt.begin(), a.prompt.end() - 1));
  for (Token t : a.answer) CHECK((t >= 0 && t < 10));
  CHECK(make_instance(s, 18).prompt != a.prompt);

  const auto batch = generate_tasks(s, 5, 100);
  REQUIRE(batch.size() == 5);
  CHECK(batch[2].index == 102);
  CHECK(batch[2].prompt == make_instance(s, 102).prompt);
}

TEST_CASE("reverse task") {
  const auto inst = make_instance(spec(TaskKind::reverse), 3);
  std::vector<Token> payload(inst.prompt.begin(), inst.prompt.end() - 1);
  CHECK(inst.answer == std::vector<Token>(payload.rbegin(), payload.rend()));
}

TEST_CASE("modular addition task") {
  const auto s = spec(TaskKind::modular_add, 4, 3, 12);
  for (std::uint64_t i = 0; i < 50; ++i) {
    const auto inst = make_instance(s, i);
    const auto& p = inst.prompt;
    const int a = p[0] * 10 + p[1], b = p[2] * 10 + p[3];
    const int sum = (a + b) % 1000;
    CHECK(inst.answer == std::vector<Token>{sum / 100, sum / 10 % 10, sum % 10});
  }
}

TEST_CASE("invalid task specs are rejected") {
  CHECK_THROWS_AS(spec(TaskKind::copy, 6, 5).validate(), ConfigError);
  CHECK_THROWS_AS(spec(TaskKind::copy, 6, 6, 2).validate(), ConfigError);
  CHECK_THROWS_AS(spec(TaskKind::modular_add, 3, 3).validate(), ConfigError);
  CHECK_THROWS_AS(spec(TaskKind::modular_add, 40, 40).validate(), ConfigError);
  CHECK_THROWS_AS(parse_task_kind("sort"), ConfigError);
  CHECK_THROWS_AS(parse_reward_mode("fuzzy"), ConfigError);
  CHECK(to_string(parse_task_kind("reverse")) == "reverse");
}

TEST_CASE("verifiers") {
  TaskInstance inst;
  inst.answer = {1, 2, 3, 4};
  inst.eos = 9;
  const std::vector<Token> right{1, 2, 3, 4};
  const std::vector<Token> right_eos{1, 2, 3, 4, 9, 5};
  const std::vector<Token> half{1, 2, 7, 4};
  const std::vector<Token> early{1, 9, 3, 4};
  const std::vector<Token> longer{1, 2, 3, 4, 5};
  CHECK(verify(inst, right, RewardMode::exact) == 1.0);
  CHECK(verify(inst, right_eos, RewardMode::exact) == 1.0);
  CHECK(verify(inst, half, RewardMode::exact) == 0.0);
  CHECK(verify(inst, longer, RewardMode::exact) == 0.0);
  CHECK(verify(inst, right, RewardMode::partial) == 1.0);
  CHECK(verify(inst, half, RewardMode::partial) == 0.5);
  CHECK(verify(inst, early, RewardMode::partial) == 0.25);
  CHECK(verify(inst, longer, RewardMode::partial) == 1.0);
  CHECK(verify(inst, std::vector<Token>{}, RewardMode::partial) == 0.0);
}

TEST_CASE("score_batch writes the score on the final token") {
  const auto s = spec(TaskKind::copy, 3, 3);
  const auto tasks = generate_tasks(s, 2);
  TrajectoryBatch b;
  Trajectory t;
  t.request_id = 1;
  t.response = tasks[1].answer;
  t.mask.assign(3, 1);
  b.sequences.push_back(t);
  t.request_id = 0;
  t.response = {tasks[0].answer[0], 11};
  t.mask.assign(2, 1);
  b.sequences.push_back(t);
  score_batch(tasks, b, RewardMode::partial);
  CHECK(b.sequences[0].rewards == std::vector<double>{0.0, 0.0, 1.0});
  CHECK(b.sequences[1].rewards == std::vector<double>{0.0, 1.0 / 3});

  const Scorer constant = [](const TaskInstance&, std::span<const Token>) { return 0.7; };
  score_batch(tasks, b, constant);
  CHECK(b.sequences[1].rewards.back() == 0.7);

  b.sequences[0].request_id = 5;
  CHECK_THROWS_AS(score_batch(tasks, b, RewardMode::exact), InputError);
}
