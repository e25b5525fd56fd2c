#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "awm/cifar.hpp"
#include "awm/networks.hpp"

namespace awm {

struct TrainConfig {
  double lr0 = 0.1;
  std::vector<int> lr_decay_epochs{150, 250};
  double lr_factor = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int batch_size = 128;
  /// Alternation period in epochs; 0 trains backbone and AWM jointly.
  int t = 3;
  int total_epochs = 350;
  std::uint64_t seed = 1;
  /// Apply equal weights only in epoch 0 instead of the whole first backbone phase.
  bool equal_weights_first_epoch_only = false;
  bool augment = true;
  /// Evaluate the test set every n epochs (0: only after the final epoch).
  int eval_interval = 0;

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

enum class Phase { joint, backbone, awm, backbone_fixed_equal };

const char* to_string(Phase phase);
Phase parse_phase(const std::string& text);

/// lr0 * lr_factor^(number of decay milestones <= epoch).
double lr_at_epoch(const TrainConfig& config, int epoch);

/// t = 0: joint. t > 0: [0, t) backbone with equal weights, then blocks of t epochs alternating
/// awm, backbone, awm, ...
Phase phase_at_epoch(const TrainConfig& config, int epoch);

/// Momentum buffers keyed by parameter name.
using SgdState = std::map<std::string, Tensor>;

struct SgdOptions {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Nesterov SGD on the given parameters using their accumulated gradients:
///   v <- mu v + (g + wd p);  p <- p - lr (g + wd p + mu v)
void sgd_nesterov_step(std::span<Parameter* const> params, SgdState& state, const SgdOptions& opts);

struct EpochRecord {
  int epoch = 0;
  Phase phase = Phase::joint;
  double lr = 0.0;
  double train_loss = 0.0;
  double train_acc = 0.0;
  std::optional<double> test_err;

  friend bool operator==(const EpochRecord&, const EpochRecord&) = default;
};

/// One JSON object per line.
std::string to_json_line(const EpochRecord& r);
EpochRecord parse_history_line(const std::string& line);
std::vector<EpochRecord> read_history(std::istream& is);

class TrainingDiverged : public NumericalError {
 public:
  TrainingDiverged(int epoch, int batch, Phase phase, double lr, double loss);
  int epoch, batch;
  Phase phase;
  double lr, loss;
};

struct EvalResult {
  double top1_error = 0.0;
  double loss = 0.0;
};

/// Eval-mode, no-gradient pass over a dataset.
EvalResult evaluate(Network& net, const Dataset& data, const Normalization& norm, int batch_size = 100);

struct TrainCallbacks {
  std::function<void(const EpochRecord&)> on_epoch_end;
};

/// Runs epochs of mini-batch training with the alternating freeze schedule.
class Trainer {
 public:
  Trainer(Network& net, const Dataset& train, const Dataset* test, const Normalization& norm, TrainConfig config);

  /// Trains the next epoch and returns its record.
  EpochRecord run_epoch();
  /// Runs until total_epochs, appending to history().
  const std::vector<EpochRecord>& train(const TrainCallbacks& callbacks = {});

  int epoch() const noexcept { return epoch_; }
  const TrainConfig& config() const noexcept { return config_; }
  const std::vector<EpochRecord>& history() const noexcept { return history_; }
  const SgdState& optimizer_state() const noexcept { return sgd_; }

  /// Opaque text forms of the shuffle and augmentation generators.
  std::string shuffle_rng_state() const;
  std::string augment_rng_state() const;
  void restore(int epoch, SgdState optimizer, const std::string& shuffle_rng, const std::string& augment_rng);

  /// Parameters updated in the given phase (all of them for networks without AWM units).
  std::vector<Parameter*> active_parameters(Phase phase);
  /// Sets AWM modes for the phase and returns the matching forward options.
  ForwardOptions prepare_phase(Phase phase);

 private:
  Network& net_;
  const Dataset& train_;
  const Dataset* test_;
  Normalization norm_;
  TrainConfig config_;
  int epoch_ = 0;
  SgdState sgd_;
  std::mt19937_64 shuffle_rng_;
  std::mt19937_64 augment_rng_;
  std::vector<EpochRecord> history_;
};

}  // namespace awm
