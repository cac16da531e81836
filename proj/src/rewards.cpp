#include "tinyrlhf/rewards.hpp"

#include <algorithm>
#include <string>
#include <unordered_map>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/rng.hpp"

namespace tinyrlhf::rewards {

TaskKind parse_task_kind(std::string_view s) {
  if (s == "copy") return TaskKind::copy;
  if (s == "reverse") return TaskKind::reverse;
  if (s == "modular_add") return TaskKind::modular_add;
  throw ConfigError("unknown task kind '" + std::string(s) + "' (expected copy, reverse or modular_add)");
}

RewardMode parse_reward_mode(std::string_view s) {
  if (s == "exact") return RewardMode::exact;
  if (s == "partial") return RewardMode::partial;
  throw ConfigError("unknown reward mode '" + std::string(s) + "' (expected exact or partial)");
}

std::string_view to_string(TaskKind k) {
  switch (k) {
    case TaskKind::copy: return "copy";
    case TaskKind::reverse: return "reverse";
    case TaskKind::modular_add: return "modular_add";
  }
  return "?";
}

std::string_view to_string(RewardMode m) { return m == RewardMode::exact ? "exact" : "partial"; }

namespace {

// base^exp, or 0 when it would not fit comfortably in 62 bits.
std::uint64_t checked_pow(std::uint64_t base, std::size_t exp) {
  std::uint64_t r = 1;
  for (std::size_t i = 0; i < exp; ++i) {
    if (r > (std::uint64_t{1} << 62) / base) return 0;
    r *= base;
  }
  return r;
}

std::uint64_t digits_value(std::span<const Token> digits, std::uint64_t base) {
  std::uint64_t v = 0;
  for (Token d : digits) v = v * base + static_cast<std::uint64_t>(d);
  return v;
}

}  // namespace

void TaskSpec::validate() const {
  if (vocab_size < 3) {
    throw ConfigError("task.vocab_size " + std::to_string(vocab_size) +
                      " leaves no digit tokens next to the separator and EOS");
  }
  if (prompt_len < 1) throw ConfigError("task.prompt_len must be >= 1");
  if (answer_len < 1) throw ConfigError("task.answer_len must be >= 1");
  switch (kind) {
    case TaskKind::copy:
    case TaskKind::reverse:
      if (answer_len != prompt_len) {
        throw ConfigError("task.answer_len must equal task.prompt_len for copy and reverse");
      }
      break;
    case TaskKind::modular_add:
      if (digit_base() < 2) throw ConfigError("modular_add needs at least two digit tokens");
      if (prompt_len % 2 != 0) throw ConfigError("modular_add needs an even task.prompt_len");
      if (checked_pow(digit_base(), std::max(prompt_len / 2 + 1, answer_len)) == 0) {
        throw ConfigError("modular_add operands too large for 64-bit arithmetic");
      }
      break;
  }
}

TaskInstance make_instance(const TaskSpec& spec, std::uint64_t index) {
  CounterRng rng(derive_key(derive_key(spec.seed, "data"), index));
  const std::uint64_t base = spec.digit_base();
  TaskInstance inst;
  inst.index = index;
  inst.eos = spec.eos();
  std::vector<Token> payload(spec.prompt_len);
  for (auto& d : payload) d = static_cast<Token>(rng.below(base));
  switch (spec.kind) {
    case TaskKind::copy:
      inst.answer = payload;
      break;
    case TaskKind::reverse:
      inst.answer.assign(payload.rbegin(), payload.rend());
      break;
    case TaskKind::modular_add: {
      const std::size_t k = spec.prompt_len / 2;
      const std::span<const Token> all(payload);
      const std::uint64_t a = digits_value(all.first(k), base);
      const std::uint64_t b = digits_value(all.subspan(k), base);
      std::uint64_t sum = (a + b) % checked_pow(base, spec.answer_len);
      inst.answer.assign(spec.answer_len, 0);
      for (std::size_t i = spec.answer_len; i-- > 0;) {
        inst.answer[i] = static_cast<Token>(sum % base);
        sum /= base;
      }
      break;
    }
  }
  inst.prompt = std::move(payload);
  inst.prompt.push_back(spec.separator());
  return inst;
}

std::vector<TaskInstance> generate_tasks(const TaskSpec& spec, std::size_t n, std::uint64_t first_index) {
  spec.validate();
  std::vector<TaskInstance> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(make_instance(spec, first_index + i));
  return out;
}

double verify(const TaskInstance& instance, std::span<const Token> response, RewardMode mode) {
  const auto end = std::find(response.begin(), response.end(), instance.eos);
  const std::span<const Token> body(response.begin(), end);
  if (mode == RewardMode::exact) {
    return std::ranges::equal(body, instance.answer) ? 1.0 : 0.0;
  }
  std::size_t matched = 0;
  while (matched < body.size() && matched < instance.answer.size() &&
         body[matched] == instance.answer[matched]) {
    ++matched;
  }
  return static_cast<double>(matched) / static_cast<double>(instance.answer.size());
}

Scorer make_verifier(RewardMode mode) {
  return [mode](const TaskInstance& inst, std::span<const Token> response) { return verify(inst, response, mode); };
}

void score_batch(std::span<const TaskInstance> instances, TrajectoryBatch& batch, const Scorer& scorer) {
  std::unordered_map<std::uint64_t, const TaskInstance*> by_index;
  for (const auto& inst : instances) by_index[inst.index] = &inst;
  for (auto& s : batch.sequences) {
    const auto it = by_index.find(s.request_id);
    if (it == by_index.end()) {
      throw InputError("no task instance for request " + std::to_string(s.request_id));
    }
    s.rewards.assign(s.length(), 0.0);
    if (!s.rewards.empty()) s.rewards.back() = scorer(*it->second, s.response);
  }
}

void score_batch(std::span<const TaskInstance> instances, TrajectoryBatch& batch, RewardMode mode) {
  score_batch(instances, batch, make_verifier(mode));
}

}  // namespace tinyrlhf::rewards
