#pragma once

// Experiment configuration in a line-oriented "key = value" text format.
//
//   # comment
//   seed = 1
//   network.kind = resnet_awm
//   train.lr_decay_epochs = 17,29
//   data.dir = /data/cifar-10-batches-bin
//
// Doubles are written with 17 significant digits so a written file parses back to an
// identical configuration. Unknown keys are rejected.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "awm/cifar.hpp"
#include "awm/networks.hpp"
#include "awm/trainer.hpp"

namespace awm {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct DataConfig {
  CifarVariant dataset = CifarVariant::c10;
  std::string dir;
  /// Class-balanced training subset size per class; 0 keeps the whole split.
  int subset_per_class = 200;
  /// Same for the test split; the default evaluates on the full test set.
  int test_subset_per_class = 0;
  std::uint64_t subset_seed = 0;

  friend bool operator==(const DataConfig&, const DataConfig&) = default;
};

struct ExperimentConfig {
  /// Seeds network initialization; train.seed drives shuffling and augmentation.
  std::uint64_t seed = 1;
  NetworkConfig network;
  TrainConfig train;
  DataConfig data;
  std::string output_dir = "run";
  /// Write a checkpoint every n epochs (the final epoch is always written).
  int checkpoint_interval = 1;

  void validate() const;
  friend bool operator==(const ExperimentConfig&, const ExperimentConfig&) = default;
};

/// Decay milestones 150 and 250 of a 350-epoch schedule, scaled to total_epochs.
std::vector<int> rescaled_milestones(int total_epochs);

/// Desk-scale defaults: ResNet-20, 200 images per class, 40 epochs, rescaled milestones.
ExperimentConfig desk_scale_config();
/// Full-data schedule: 350 epochs, milestones 150/250, no subsetting.
ExperimentConfig full_scale_config();

std::string to_text(const ExperimentConfig& config);
ExperimentConfig parse_experiment_config(const std::string& text);
/// Applies "key = value" text on top of an existing configuration.
void apply_config_text(ExperimentConfig& config, const std::string& text);
/// Sets one key; throws ConfigError for unknown keys or malformed values.
void set_config_value(ExperimentConfig& config, const std::string& key, const std::string& value);

ExperimentConfig load_experiment_config(const std::filesystem::path& path);
void save_experiment_config(const std::filesystem::path& path, const ExperimentConfig& config);

}  // namespace awm
