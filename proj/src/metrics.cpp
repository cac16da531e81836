#include "tinyrlhf/metrics.hpp"

#include "tinyrlhf/errors.hpp"

namespace tinyrlhf {

nlohmann::json to_json(const pipeline::MetricsRecord& r) {
  return nlohmann::json{{"step", r.step},
                        {"weight_version", r.weight_version},
                        {"mean_reward", r.mean_reward},
                        {"mean_kl", r.mean_kl},
                        {"clip_fraction", r.clip_fraction},
                        {"policy_loss", r.policy_loss},
                        {"value_loss", r.value_loss},
                        {"entropy", r.entropy},
                        {"beta", r.beta},
                        {"dropped_stale", r.dropped_stale},
                        {"dropped_groups", r.dropped_groups},
                        {"tokens_per_second", r.tokens_per_second},
                        {"step_time_ms", r.step_time_ms}};
}

pipeline::MetricsRecord metrics_from_json(const nlohmann::json& j) {
  pipeline::MetricsRecord r;
  r.step = j.at("step").get<std::uint64_t>();
  r.weight_version = j.at("weight_version").get<std::uint64_t>();
  r.mean_reward = j.at("mean_reward").get<double>();
  r.mean_kl = j.at("mean_kl").get<double>();
  r.clip_fraction = j.at("clip_fraction").get<double>();
  r.policy_loss = j.at("policy_loss").get<double>();
  r.value_loss = j.at("value_loss").get<double>();
  r.entropy = j.at("entropy").get<double>();
  r.beta = j.at("beta").get<double>();
  r.dropped_stale = j.at("dropped_stale").get<std::uint64_t>();
  r.dropped_groups = j.at("dropped_groups").get<std::uint64_t>();
  r.tokens_per_second = j.at("tokens_per_second").get<double>();
  r.step_time_ms = j.at("step_time_ms").get<double>();
  return r;
}

nlohmann::json to_json(const pipeline::AuditTotals& a) {
  return nlohmann::json{{"generated", a.generated},         {"trained", a.trained},
                        {"dropped_stale", a.dropped_stale}, {"dropped_filtered", a.dropped_filtered},
                        {"leftover", a.leftover},           {"duplicates", a.duplicates},
                        {"abandoned", a.abandoned},         {"balanced", a.balanced()}};
}

nlohmann::json to_json(const pipeline::RunReport& r) {
  return nlohmann::json{{"mode", std::string(to_string(r.mode))},
                        {"steps", r.steps},
                        {"final_version", r.final_version},
                        {"audit", to_json(r.audit)},
                        {"early_stops", r.early_stops},
                        {"max_trained_staleness", r.max_trained_staleness},
                        {"final_mean_reward", r.final_mean_reward},
                        {"wall_seconds", r.wall_seconds},
                        {"stop_reason", r.stop_reason}};
}

MetricsWriter::MetricsWriter(const std::string& path) {
  if (path.empty()) return;
  out_.open(path, std::ios::out | std::ios::trunc);
  if (!out_) throw Error("cannot open metrics file '" + path + "'");
  enabled_ = true;
}

void MetricsWriter::write(const pipeline::MetricsRecord& rec) {
  ++written_;
  if (!enabled_) return;
  out_ << to_json(rec).dump() << '\n';
  out_.flush();
}

void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path, std::ios::out | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path + "' for writing");
  out << j.dump(2) << '\n';
}

}  // namespace tinyrlhf
