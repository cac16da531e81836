#include "tinyrlhf/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>

#include "tinyrlhf/errors.hpp"
#include "tinyrlhf/rng.hpp"

namespace tinyrlhf {

PipelineMode parse_pipeline_mode(std::string_view s) {
  if (s == "sync") return PipelineMode::sync;
  if (s == "async") return PipelineMode::async;
  throw ConfigError("unknown pipeline mode '" + std::string(s) + "'");
}

std::string_view to_string(PipelineMode m) { return m == PipelineMode::sync ? "sync" : "async"; }

void PipelineConfig::validate() const {
  if (n_rollout_engines < 1) throw ConfigError("pipeline.n_rollout_engines must be >= 1");
  if (n_learner_workers < 1) throw ConfigError("pipeline.n_learner_workers must be >= 1");
  if (queue_capacity < 1) throw ConfigError("pipeline.queue_capacity must be >= 1");
  if (rollout_batch_size < 1) throw ConfigError("pipeline.rollout_batch_size must be >= 1");
  if (group_size < 1) throw ConfigError("pipeline.group_size must be >= 1");
  if (!(watchdog_seconds > 0.0)) throw ConfigError("pipeline.watchdog_seconds must be > 0");
  for (std::size_t n : length_mix) {
    if (n < 1) throw ConfigError("pipeline.length_mix entries must be >= 1");
  }
}

void RunConfig::resolve() {
  task.vocab_size = model.vocab_size;
  task.seed = derive_key(seed, "data");
  model.seed = derive_key(seed, "model-init");
  model.has_value_head = false;
  engine.eos_token = stop_on_eos ? task.eos() : rollout::kNoEos;
}

void RunConfig::validate() const {
  model.validate();
  task.validate();
  gae.validate();
  ppo.validate();
  engine.validate();
  pipeline.validate();
  if (!(kl.init_beta >= 0.0)) throw ConfigError("kl.init_beta must be >= 0");
  if (!(kl.target > 0.0)) throw ConfigError("kl.target must be > 0");
  if (!(kl.horizon > 0.0)) throw ConfigError("kl.horizon must be > 0");
  if (!(optimizer.adam.lr > 0.0) || !(optimizer.critic_lr > 0.0)) throw ConfigError("learning rates must be > 0");
  if (task.prompt_len + 1 >= model.context_window) {
    throw ConfigError("model.context_window leaves no room for a response after the prompt");
  }
  if (pipeline.group_size > engine.max_batch) {
    throw ConfigError("pipeline.group_size exceeds engine.max_batch");
  }
}

lm::ModelConfig RunConfig::policy_model() const {
  lm::ModelConfig m = model;
  m.has_value_head = false;
  m.seed = derive_key(seed, "model-init");
  return m;
}

lm::ModelConfig RunConfig::critic_model() const {
  lm::ModelConfig m = model;
  m.has_value_head = true;
  m.seed = derive_key(seed, "critic-init");
  return m;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && ((s.front() == '"' && s.back() == '"') || (s.front() == '\'' && s.back() == '\''))) {
    return s.substr(1, s.size() - 2);
  }
  return s;
}

struct BadValue {
  std::string what;
};

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected a non-negative integer"};
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected a non-negative integer"};
  return out;
}

double to_double(const std::string& v) {
  double out = 0.0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw BadValue{"expected a number"};
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw BadValue{"expected true or false"};
}

std::vector<std::size_t> to_size_list(const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(trim(item)));
  return out;
}

std::string fmt_double(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

std::string fmt_bool(bool b) { return b ? "true" : "false"; }

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

std::string quoted(std::string_view s) { return "\"" + std::string(s) + "\""; }

template <typename E, typename Parse>
E to_enum(const std::string& v, Parse parse) {
  try {
    return parse(v);
  } catch (const ConfigError& e) {
    throw BadValue{e.what()};
  }
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define SIZE_FIELD(k, m) \
  Field{k, [](RunConfig& c, const std::string& v) { c.m = to_size(v); }, [](const RunConfig& c) { return std::to_string(c.m); }}
#define DOUBLE_FIELD(k, m) \
  Field{k, [](RunConfig& c, const std::string& v) { c.m = to_double(v); }, [](const RunConfig& c) { return fmt_double(c.m); }}
#define BOOL_FIELD(k, m) \
  Field{k, [](RunConfig& c, const std::string& v) { c.m = to_bool(v); }, [](const RunConfig& c) { return fmt_bool(c.m); }}
#define STRING_FIELD(k, m) \
  Field{k, [](RunConfig& c, const std::string& v) { c.m = v; }, [](const RunConfig& c) { return quoted(c.m); }}
#define ENUM_FIELD(k, m, parse) \
  Field{k, [](RunConfig& c, const std::string& v) { c.m = to_enum<decltype(c.m)>(v, parse); }, \
        [](const RunConfig& c) { return quoted(to_string(c.m)); }}

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      SIZE_FIELD("model.vocab_size", model.vocab_size),
      SIZE_FIELD("model.d_model", model.d_model),
      SIZE_FIELD("model.d_mlp", model.d_mlp),
      SIZE_FIELD("model.context_window", model.context_window),
      SIZE_FIELD("model.n_layers", model.n_layers),

      ENUM_FIELD("task.kind", task.kind, rewards::parse_task_kind),
      SIZE_FIELD("task.prompt_len", task.prompt_len),
      SIZE_FIELD("task.answer_len", task.answer_len),
      ENUM_FIELD("task.reward_mode", reward_mode, rewards::parse_reward_mode),

      DOUBLE_FIELD("gae.gamma", gae.gamma),
      DOUBLE_FIELD("gae.lam", gae.lam),

      ENUM_FIELD("ppo.advantage", advantage, ppo::parse_advantage_mode),
      BOOL_FIELD("ppo.dynamic_sampling", dynamic_sampling),
      DOUBLE_FIELD("ppo.eps_low", ppo.eps_low),
      DOUBLE_FIELD("ppo.eps_high", ppo.eps_high),
      DOUBLE_FIELD("ppo.c1", ppo.c1),
      DOUBLE_FIELD("ppo.c2", ppo.c2),
      SIZE_FIELD("ppo.epochs", ppo.ppo_epochs),
      ENUM_FIELD("ppo.kl_mode", ppo.kl_mode, ppo::parse_kl_mode),
      ENUM_FIELD("ppo.kl_estimator", ppo.kl_estimator, ppo::parse_kl_estimator),
      BOOL_FIELD("ppo.whiten_advantages", ppo.whiten_advantages),
      DOUBLE_FIELD("ppo.max_kl", ppo.max_kl),

      DOUBLE_FIELD("kl.init_beta", kl.init_beta),
      DOUBLE_FIELD("kl.target", kl.target),
      DOUBLE_FIELD("kl.horizon", kl.horizon),
      BOOL_FIELD("kl.adaptive", kl.adaptive),

      SIZE_FIELD("engine.total_blocks", engine.total_blocks),
      SIZE_FIELD("engine.block_size", engine.block_size),
      SIZE_FIELD("engine.max_batch", engine.max_batch),
      DOUBLE_FIELD("engine.temperature", engine.temperature),
      SIZE_FIELD("engine.max_new_tokens", engine.max_new_tokens),
      BOOL_FIELD("engine.stop_on_eos", stop_on_eos),

      ENUM_FIELD("pipeline.mode", pipeline.mode, parse_pipeline_mode),
      SIZE_FIELD("pipeline.n_rollout_engines", pipeline.n_rollout_engines),
      SIZE_FIELD("pipeline.n_learner_workers", pipeline.n_learner_workers),
      SIZE_FIELD("pipeline.queue_capacity", pipeline.queue_capacity),
      SIZE_FIELD("pipeline.max_staleness", pipeline.max_staleness),
      SIZE_FIELD("pipeline.rollout_batch_size", pipeline.rollout_batch_size),
      SIZE_FIELD("pipeline.group_size", pipeline.group_size),
      SIZE_FIELD("pipeline.train_batch_size", pipeline.train_batch_size),
      SIZE_FIELD("pipeline.max_rerolls", pipeline.max_rerolls),
      DOUBLE_FIELD("pipeline.watchdog_seconds", pipeline.watchdog_seconds),
      BOOL_FIELD("pipeline.threaded", pipeline.threaded),
      Field{"pipeline.length_mix",
            [](RunConfig& c, const std::string& v) { c.pipeline.length_mix = to_size_list(v); },
            [](const RunConfig& c) { return quoted(fmt_list(c.pipeline.length_mix)); }},
      SIZE_FIELD("pipeline.jitter_us", pipeline.jitter_us),

      DOUBLE_FIELD("optimizer.lr", optimizer.adam.lr),
      DOUBLE_FIELD("optimizer.beta1", optimizer.adam.beta1),
      DOUBLE_FIELD("optimizer.beta2", optimizer.adam.beta2),
      DOUBLE_FIELD("optimizer.eps", optimizer.adam.eps),
      DOUBLE_FIELD("optimizer.clip_norm", optimizer.adam.clip_norm),
      DOUBLE_FIELD("optimizer.critic_lr", optimizer.critic_lr),

      SIZE_FIELD("run.total_steps", total_steps),
      Field{"run.seed", [](RunConfig& c, const std::string& v) { c.seed = to_u64(v); },
            [](const RunConfig& c) { return std::to_string(c.seed); }},
      SIZE_FIELD("run.eval_size", eval_size),

      STRING_FIELD("output.metrics", metrics_path),
      STRING_FIELD("output.weights", weights_path),
      STRING_FIELD("output.report", report_path),
      STRING_FIELD("output.bench", bench_path),
  };
  return table;
}

#undef SIZE_FIELD
#undef DOUBLE_FIELD
#undef BOOL_FIELD
#undef STRING_FIELD
#undef ENUM_FIELD

const Field* find_field(std::string_view key) {
  for (const Field& f : fields()) {
    if (f.key == key) return &f;
  }
  return nullptr;
}

std::string where(int line) { return line > 0 ? "line " + std::to_string(line) : "override"; }

void assign(RunConfig& config, const std::string& key, const std::string& raw, int line) {
  const Field* f = find_field(key);
  if (!f) throw ParseError(where(line) + ": unknown key '" + key + "'", key, line);
  try {
    f->set(config, unquote(raw));
  } catch (const BadValue& e) {
    throw ParseError(where(line) + ": bad value '" + raw + "' for '" + key + "': " + e.what, key, line);
  }
}

// Splits "key = value"; returns false for lines without '='.
bool split_assignment(std::string_view line, std::string& key, std::string& value) {
  const auto eq = line.find('=');
  if (eq == std::string_view::npos) return false;
  key = trim(line.substr(0, eq));
  value = trim(line.substr(eq + 1));
  return true;
}

void finish(RunConfig& config) {
  config.resolve();
  config.validate();
}

}  // namespace

RunConfig parse_config(std::string_view text) {
  RunConfig config;
  std::set<std::string> seen;
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string line = raw;
    if (const auto hash = line.find('#'); hash != std::string::npos) {
      // A '#' inside quotes is part of the value.
      const auto q = line.find('"');
      if (q == std::string::npos || hash < q) line = line.substr(0, hash);
    }
    line = trim(line);
    if (line.empty()) continue;
    std::string key, value;
    if (!split_assignment(line, key, value)) {
      throw ParseError("line " + std::to_string(line_no) + ": expected 'key = value'", line, line_no);
    }
    if (!seen.insert(key).second) {
      throw ParseError("line " + std::to_string(line_no) + ": duplicate key '" + key + "'", key, line_no);
    }
    assign(config, key, value, line_no);
  }
  finish(config);
  return config;
}

RunConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str());
}

void apply_overrides(RunConfig& config, const std::vector<std::string>& overrides) {
  for (const std::string& o : overrides) {
    std::string key, value;
    if (!split_assignment(o, key, value)) throw ParseError("override '" + o + "' is not key=value", o, 0);
    assign(config, key, value, 0);
  }
  finish(config);
}

std::string serialize_config(const RunConfig& config) {
  std::string out;
  std::string section;
  for (const Field& f : fields()) {
    const std::string s = f.key.substr(0, f.key.find('.'));
    if (s != section) {
      if (!section.empty()) out += "\n";
      section = s;
    }
    out += f.key + " = " + f.get(config) + "\n";
  }
  return out;
}

}  // namespace tinyrlhf
