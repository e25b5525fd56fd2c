#pragma once

#include <random>
#include <span>
#include <string>
#include <vector>

#include "awm/autodiff.hpp"

namespace awm {

enum class AwmMode {
  active,      // weights inferred from the input, parameters trainable
  frozen,      // weights inferred from the input, parameters held constant
  fixed_equal  // inference bypassed, every path weighted 1/n
};

const char* to_string(AwmMode mode);

/// Weights for one batch: lambda rows sum to one; gates are the raw sigmoid outputs.
struct InferredWeights {
  Var lambda;
  Var gates;
};

/// Pools each B x C_i x H x W path to B x C_i and concatenates the descriptors in path order.
Var embed_paths(std::span<const Var> paths);

/// Infers per-input merge weights for n paths from their pooled channel descriptors:
///   gates  = sigmoid(W2 * relu(W1 * z + b1) + b2)
///   lambda = gates / sum(gates)
class AwmUnit {
 public:
  static constexpr Index kDefaultReduction = 16;

  /// Parameters are He-normal initialized from rng; biases start at zero.
  AwmUnit(std::string name, std::vector<Index> channel_dims, Index reduction, std::mt19937_64& rng);

  Index path_count() const noexcept { return static_cast<Index>(channel_dims_.size()); }
  const std::vector<Index>& channel_dims() const noexcept { return channel_dims_; }
  Index descriptor_width() const noexcept { return w1_.value.dim(1); }
  Index reduction() const noexcept { return w1_.value.dim(0); }
  const std::string& name() const noexcept { return name_; }

  AwmMode mode() const noexcept { return mode_; }
  AwmUnit& set_mode(AwmMode mode) noexcept {
    mode_ = mode;
    return *this;
  }

  /// Weight inference from a B x sum(C_i) descriptor. Not available in fixed_equal mode.
  /// With record_gradients = false the parameters enter as constants regardless of mode.
  InferredWeights infer_weights(Graph& graph, Var descriptor, bool record_gradients = true);

  /// Weights for a set of paths under the current mode. In fixed_equal mode the paths are
  /// not consulted and lambda is the constant 1/n.
  InferredWeights weights_for(Graph& graph, std::span<const Var> paths, bool record_gradients = true);

  std::vector<Parameter*> parameters() { return {&w1_, &b1_, &w2_, &b2_}; }
  std::vector<const Parameter*> parameters() const { return {&w1_, &b1_, &w2_, &b2_}; }
  Index parameter_count() const;

 private:
  std::string name_;
  std::vector<Index> channel_dims_;
  AwmMode mode_ = AwmMode::active;
  Parameter w1_, b1_, w2_, b2_;
};

/// Trainable-parameter count of one unit: e*sum(C) + e + n*e + n.
Index awm_parameter_count(std::span<const Index> channel_dims, Index reduction);

/// He-normal (fan-in) initialization shared by every layer type.
Tensor he_normal(Shape shape, Index fan_in, std::mt19937_64& rng);

}  // namespace awm
