#pragma once

// Experiment driver shared by the command-line tool and the acceptance suite.

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "awm/cifar.hpp"
#include "awm/experiment_config.hpp"
#include "awm/trainer.hpp"

namespace awm {

enum ExitCode : int { kExitOk = 0, kExitUsage = 1, kExitData = 2, kExitNumerical = 3 };

struct ExperimentData {
  Dataset train;
  Dataset test;
  /// Computed from the (possibly subsetted) training split.
  Normalization norm;
};

/// Loads both splits from config.dir and applies the configured class-balanced subsets.
ExperimentData load_experiment_data(const DataConfig& config);

struct RunSummary {
  std::vector<EpochRecord> history;
  double final_test_error = 1.0;
  std::filesystem::path checkpoint;
};

/// Trains per config, writing config.txt, dataset.txt, history.jsonl and checkpoint.bin into
/// config.output_dir. A non-empty resume path continues from that checkpoint.
RunSummary run_experiment(const ExperimentConfig& config, const ExperimentData& data, std::ostream& log,
                          const std::filesystem::path& resume = {});

/// Entry point of the awm command-line tool; args excludes the program name.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace awm
