#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "awm/autodiff.hpp"
#include "awm/awm_unit.hpp"

namespace awm {

enum class NetworkKind { resnet_awm, resnet_plain, densenet_awm, densenet_plain };

/// Stage-boundary shortcut of a residual block: 1x1 strided conv + BN, or subsample + zero channels.
enum class ShortcutKind { projection, padded_identity };

const char* to_string(NetworkKind kind);
NetworkKind parse_network_kind(const std::string& text);
const char* to_string(ShortcutKind kind);
ShortcutKind parse_shortcut_kind(const std::string& text);

inline bool is_resnet(NetworkKind k) { return k == NetworkKind::resnet_awm || k == NetworkKind::resnet_plain; }
inline bool has_awm(NetworkKind k) { return k == NetworkKind::resnet_awm || k == NetworkKind::densenet_awm; }

struct NetworkConfig {
  NetworkKind kind = NetworkKind::resnet_awm;
  int depth = 20;
  int num_classes = 10;
  Index base_channels = 16;
  Index growth_rate = 12;
  Index reduction = AwmUnit::kDefaultReduction;
  ShortcutKind shortcut = ShortcutKind::projection;

  /// Throws std::invalid_argument naming the violated rule.
  void validate() const;
  friend bool operator==(const NetworkConfig&, const NetworkConfig&) = default;
};

/// Number of residual merge points of a CIFAR ResNet: (depth - 2) / 2.
int mapping_unit_count(int depth);
/// Bottleneck layers per dense block of a DenseNet-BC: (depth - 4) / 6.
int dense_layers_per_block(int depth);

struct ConvLayer {
  Parameter kernel;
  Index stride = 1;
  Index padding = 0;

  Var operator()(Graph& g, Var x, bool trainable) { return conv2d(x, g.parameter(kernel, trainable), stride, padding); }
};

struct BatchNormLayer {
  Parameter gamma;
  Parameter beta;
  BatchNormStats<double> stats;

  Var operator()(Graph& g, Var x, BatchNormMode mode, bool trainable) {
    return batch_norm(x, g.parameter(gamma, trainable), g.parameter(beta, trainable), stats, mode);
  }
};

/// Values observed at one merge point during a forward pass.
struct MergeProbe {
  Tensor branch;    // F(x), or the newest dense layer output
  Tensor shortcut;  // projected x, or the block input bundle
  Tensor merged;    // value before the trailing activation / next layer
};

struct ForwardOptions {
  BatchNormMode bn_mode = BatchNormMode::train;
  /// false: backbone parameters enter the graph as constants (still differentiable w.r.t. inputs).
  bool backbone_trainable = true;
  /// true: no parameter enters the graph as trainable, AWM units included.
  bool inference = false;
  /// Scale applied to plain (non-AWM) residual sums; 1 is the ordinary identity mapping.
  double plain_merge_scale = 1.0;
  std::vector<MergeProbe>* probes = nullptr;
};

struct ForwardResult {
  Var logits;
  /// Per mapping unit, the B x n weights actually applied (empty for plain networks).
  std::vector<Tensor> lambdas;
  /// Per mapping unit, the raw sigmoid gates before normalization.
  std::vector<Tensor> gates;

  /// B x units matrix of first-path weights (lambda_1, the convolutional branch for ResNets).
  Tensor trace_matrix() const;
};

struct ParameterCount {
  Index backbone = 0;
  Index awm = 0;
  Index total = 0;
};

/// Named view over a tensor owned by the network, for checkpointing.
struct StateEntry {
  std::string name;
  Tensor* tensor;
};

struct ResidualBlock {
  Index in_channels = 0, out_channels = 0, stride = 1;
  ConvLayer conv1, conv2;
  BatchNormLayer bn1, bn2;
  std::optional<ConvLayer> projection;
  std::optional<BatchNormLayer> projection_bn;
  bool padded_shortcut = false;
  std::optional<AwmUnit> awm;

  /// 3x3 conv pair with a shortcut; stage changes use a projection or a padded identity.
  static ResidualBlock make(const std::string& name, Index in, Index out, Index stride, ShortcutKind shortcut,
                            bool with_awm, Index reduction, std::mt19937_64& rng, std::mt19937_64& awm_rng);
  std::vector<Parameter*> backbone_parameters();

  /// Returns relu(merge(F(x), shortcut(x))).
  Var forward(Graph& g, Var x, const ForwardOptions& opts, ForwardResult* result);
};

struct DenseLayer {
  BatchNormLayer bn1, bn2;
  ConvLayer conv1, conv2;  // 1x1 bottleneck to 4k, then 3x3 to k
  std::optional<AwmUnit> awm;
};

struct DenseBlock {
  std::vector<DenseLayer> layers;

  static DenseBlock make(const std::string& name, Index in_channels, int layers, Index growth, bool with_awm,
                         Index reduction, std::mt19937_64& rng, std::mt19937_64& awm_rng);
  std::vector<Parameter*> backbone_parameters();

  /// Each layer appends a k-channel bundle; its unit weights all bundles seen so far.
  Var forward(Graph& g, Var x, const ForwardOptions& opts, ForwardResult* result);
};

struct Transition {
  BatchNormLayer bn;
  ConvLayer conv;
};

class Network {
 public:
  /// Deterministic under seed. Backbone and AWM parameters draw from separate streams, so
  /// plain and AWM variants built with one seed share identical backbone weights.
  static Network build(const NetworkConfig& config, std::uint64_t seed);

  const NetworkConfig& config() const noexcept { return config_; }

  /// input: B x 3 x 32 x 32.
  ForwardResult forward(Graph& g, const Tensor& input, const ForwardOptions& opts = {});

  std::vector<AwmUnit*> awm_units();
  std::vector<const AwmUnit*> awm_units() const;
  void set_awm_mode(AwmMode mode);

  std::vector<Parameter*> backbone_parameters();
  std::vector<Parameter*> awm_parameters();
  std::vector<Parameter*> parameters();

  /// Every persistent tensor: trainable parameters followed by batch-norm running statistics.
  std::vector<StateEntry> state();

  ParameterCount count_parameters() const;

 private:
  Network() = default;
  void build_resnet(std::mt19937_64& rng, std::mt19937_64& awm_rng);
  void build_densenet(std::mt19937_64& rng, std::mt19937_64& awm_rng);

  template <typename Fn>
  void for_each_backbone(Fn&& fn);

  NetworkConfig config_;
  ConvLayer stem_;
  std::optional<BatchNormLayer> stem_bn_;  // ResNet only
  std::vector<ResidualBlock> blocks_;
  std::vector<DenseBlock> dense_blocks_;
  std::vector<Transition> transitions_;
  std::optional<BatchNormLayer> final_bn_;  // DenseNet only
  Parameter fc_weight_, fc_bias_;
};

}  // namespace awm
