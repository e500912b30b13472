#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <vector>

#include "trfeddis/config.hpp"
#include "trfeddis/federation.hpp"

namespace trfeddis::experiment {

/// One CSV line of the metrics file.
struct MetricsRow {
  std::uint64_t seed = 0;
  std::size_t round = 0;
  std::size_t client = 0;
  std::string split;  // "train" (running batch metrics) or "test"
  double accuracy = 0.0;
  double accuracy_global = 0.0;
  double accuracy_local = 0.0;
  double mean_u = 0.0;
  losses::LossBreakdown loss;
};

std::string metrics_header();
std::string format_row(const MetricsRow& row);

/// Two rows (train, test) per client for one round.
std::vector<MetricsRow> rows_for(std::uint64_t seed, const federation::RoundReport& report);

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<federation::RoundReport> reports;
  std::vector<model::Model> final_models;  // one per client
  /// Mean fused test accuracy over clients after the last round (initial
  /// models if no rounds ran).
  double final_accuracy = 0.0;
};

struct SummaryStat {
  std::string metric;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation across seeds; 0 for one seed
  std::size_t n = 0;
};

struct ExperimentResult {
  std::shared_ptr<const std::vector<data::DomainData>> data;  // shared by all seeds
  std::vector<SeedRun> runs;
  std::vector<SummaryStat> summary;  // final-round client-mean test metrics across seeds
};

struct RunOptions {
  bool write_outputs = true;     // metrics.csv, summary.csv, checkpoints under output_dir
  std::ostream* progress = nullptr;
};

/// Trains every seed of the config. Outputs land in cfg.output_dir:
/// metrics.csv, summary.csv and checkpoints/seed<S>_client<I>.ckpt.
ExperimentResult run_experiment(const config::ExperimentConfig& cfg, const RunOptions& options = {});

/// Same as run_experiment but reusing already built client data.
ExperimentResult run_experiment(const config::ExperimentConfig& cfg,
                                std::shared_ptr<const std::vector<data::DomainData>> data,
                                const RunOptions& options = {});

/// Mean and sample std of `values`.
SummaryStat summarize(std::string metric, const std::vector<double>& values);

std::filesystem::path checkpoint_path(const std::filesystem::path& dir, std::uint64_t seed, std::size_t client);

}  // namespace trfeddis::experiment
