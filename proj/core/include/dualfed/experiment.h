#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "dualfed/config.h"
#include "dualfed/protocol.h"

namespace dualfed {

struct PreparedData {
  std::vector<std::shared_ptr<const ClientData>> clients;
  Tensor probe;
};

// Synthetic generation or flat-file loading, depending on config.source.
// Without a probe file the probe is every client's test inputs stacked.
PreparedData prepare_data(const RunConfig& config);

FederationSetup make_setup(const RunConfig& config, const PreparedData& data,
                           std::uint64_t seed);

struct SeedResult {
  std::uint64_t seed = 0;
  double best_mean_ensemble = 0.0;
  std::size_t best_round = 0;
  MetricsRow final_row;
  std::uint64_t comm_bytes = 0;
};

struct Summary {
  std::string label;
  std::string method;
  std::size_t rounds = 0;
  std::vector<SeedResult> seeds;
  // Population statistics (ddof 0) over seeds.
  double headline_mean = 0.0;
  double headline_std = 0.0;
};

// Population mean and std (ddof 0).
std::pair<double, double> mean_std(const std::vector<double>& values);

// One federation per seed. Writes metrics_seed{S}.csv, ledger_seed{S}.csv,
// summary.json and config.resolved into config.output_dir, plus reps/ and
// checkpoints/ when enabled. Every file is written whole via temp + rename.
Summary run_experiment(const RunConfig& config);

void write_summary(const std::filesystem::path& path, const Summary& summary);
Summary load_summary(const std::filesystem::path& path);

struct ComparisonTable {
  std::vector<std::string> columns;
  std::vector<std::vector<std::string>> rows;  // first cell is the label
  std::string csv;
  std::string text;
};

// "95.01±0.31": percent, two decimals, population std.
std::string format_mean_std(double mean, double std);

ComparisonTable compare_summaries(const std::vector<Summary>& summaries);
// Throws IoError on a missing file.
ComparisonTable compare_runs(const std::vector<std::filesystem::path>& summary_paths);

// Trains every configured seed up to `round` and writes z/u of each client's
// test set to output_dir/reps/seed{S}_round{R}_client{m}.csv.
std::vector<std::filesystem::path> dump_reps_at(const RunConfig& config, std::size_t round);

}  // namespace dualfed
