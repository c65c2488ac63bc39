#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "micl/dataio.hpp"
#include "micl/protocol.hpp"

namespace micl::config {

// Data source of a run: the synthetic Gaussian stream (self-contained) or a
// CSV dataset partitioned into phases.
struct DataConfig {
  std::string type = "gaussian";  // "gaussian" | "csv"
  // gaussian
  dataio::GaussianMixtureSpec gaussian;
  // csv
  std::string csv_path;
  double test_fraction = 0.2;
};

struct RunConfig {
  DataConfig data;
  protocol::ExperimentConfig experiment;
  std::vector<std::uint64_t> seeds;  // master seeds to execute

  dataio::PhaseStream make_stream(std::uint64_t seed) const;
};

// Parses and exhaustively validates a config document. Unknown keys and
// out-of-range values throw ConfigError naming the offending field.
RunConfig parse_config_text(const std::string& json_text);
RunConfig load_config(const std::string& path);

// Fully materialized snapshot (all defaults resolved); re-running from the
// snapshot alone reproduces the run.
std::string snapshot_json(const RunConfig& config);

// Line-delimited result records: one JSON object per phase plus a summary
// record. Timing is deliberately omitted so identical runs are byte-equal.
std::string results_jsonl(const protocol::PhaseResults& results);
std::string timings_jsonl(const protocol::PhaseResults& results);

}  // namespace micl::config
