#pragma once

// JSON Lines metrics sink and JSON renderings of run reports.

#include <fstream>
#include <string>

#include <json.hpp>

#include "tinyrlhf/config.hpp"
#include "tinyrlhf/orchestrator.hpp"

namespace tinyrlhf {

// Exactly the fields of the metrics stream, nothing else.
nlohmann::json to_json(const pipeline::MetricsRecord& rec);
pipeline::MetricsRecord metrics_from_json(const nlohmann::json& j);

nlohmann::json to_json(const pipeline::AuditTotals& audit);
nlohmann::json to_json(const pipeline::RunReport& report);

// One record per line, flushed as written. An empty path discards records.
class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path);

  void write(const pipeline::MetricsRecord& rec);
  std::size_t written() const noexcept { return written_; }

 private:
  std::ofstream out_;
  bool enabled_ = false;
  std::size_t written_ = 0;
};

void write_json_file(const std::string& path, const nlohmann::json& j);

}  // namespace tinyrlhf
