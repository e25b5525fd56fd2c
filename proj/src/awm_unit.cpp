#include "awm/awm_unit.hpp"

#include <cmath>
#include <numeric>

namespace awm {

const char* to_string(AwmMode mode) {
  switch (mode) {
    case AwmMode::active: return "active";
    case AwmMode::frozen: return "frozen";
    case AwmMode::fixed_equal: return "fixed_equal";
  }
  return "unknown";
}

Tensor he_normal(Shape shape, Index fan_in, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (double& v : t.values()) v = dist(rng);
  return t;
}

Index awm_parameter_count(std::span<const Index> channel_dims, Index reduction) {
  const Index width = std::accumulate(channel_dims.begin(), channel_dims.end(), Index{0});
  const Index n = static_cast<Index>(channel_dims.size());
  return reduction * width + reduction + n * reduction + n;
}

Var embed_paths(std::span<const Var> paths) {
  if (paths.empty()) throw ShapeError("embed_paths: no paths");
  const Shape& ref = paths[0].shape();
  std::vector<Var> pooled;
  pooled.reserve(paths.size());
  for (const Var& p : paths) {
    const Shape& s = p.shape();
    if (s.size() != 4 || s[0] != ref[0] || s[2] != ref[2] || s[3] != ref[3]) {
      throw ShapeError("embed_paths: path " + to_string(s) + " does not share batch/spatial size with " +
                       to_string(ref));
    }
    pooled.push_back(global_avg_pool(p));
  }
  return concat(pooled);
}

AwmUnit::AwmUnit(std::string name, std::vector<Index> channel_dims, Index reduction, std::mt19937_64& rng)
    : name_(std::move(name)), channel_dims_(std::move(channel_dims)) {
  const Index n = static_cast<Index>(channel_dims_.size());
  if (n < 2) throw std::invalid_argument("AwmUnit " + name_ + ": needs at least 2 paths");
  const Index width = std::accumulate(channel_dims_.begin(), channel_dims_.end(), Index{0});
  if (reduction <= 2 || reduction >= width) {
    throw std::invalid_argument("AwmUnit " + name_ + ": reduction width " + std::to_string(reduction) +
                                " must satisfy 2 < e < " + std::to_string(width));
  }
  w1_ = Parameter(name_ + ".w1", he_normal({reduction, width}, width, rng));
  b1_ = Parameter(name_ + ".b1", Tensor({reduction}));
  w2_ = Parameter(name_ + ".w2", he_normal({n, reduction}, reduction, rng));
  b2_ = Parameter(name_ + ".b2", Tensor({n}));
}

Index AwmUnit::parameter_count() const { return awm_parameter_count(channel_dims_, reduction()); }

InferredWeights AwmUnit::infer_weights(Graph& graph, Var descriptor, bool record_gradients) {
  if (mode_ == AwmMode::fixed_equal) throw std::logic_error("AwmUnit " + name_ + ": inference bypassed in fixed_equal mode");
  const Tensor& z = descriptor.value();
  require_rank(z, 2, "infer_weights descriptor");
  if (z.dim(1) != descriptor_width()) {
    throw ShapeError("AwmUnit " + name_ + ": descriptor width " + std::to_string(z.dim(1)) + ", expected " +
                     std::to_string(descriptor_width()));
  }
  const bool trainable = record_gradients && mode_ == AwmMode::active;
  Var w1 = graph.parameter(w1_, trainable);
  Var b1 = graph.parameter(b1_, trainable);
  Var w2 = graph.parameter(w2_, trainable);
  Var b2 = graph.parameter(b2_, trainable);
  Var hidden = relu(fully_connected(descriptor, w1, b1));
  Var gates = sigmoid(fully_connected(hidden, w2, b2));
  return {normalize_rows(gates), gates};
}

InferredWeights AwmUnit::weights_for(Graph& graph, std::span<const Var> paths, bool record_gradients) {
  if (static_cast<Index>(paths.size()) != path_count()) {
    throw ShapeError("AwmUnit " + name_ + ": expected " + std::to_string(path_count()) + " paths, got " +
                     std::to_string(paths.size()));
  }
  for (std::size_t i = 0; i < paths.size(); ++i) {
    if (paths[i].shape().size() != 4 || paths[i].shape()[1] != channel_dims_[i]) {
      throw ShapeError("AwmUnit " + name_ + ": path " + std::to_string(i) + " has shape " +
                       to_string(paths[i].shape()) + ", expected " + std::to_string(channel_dims_[i]) + " channels");
    }
  }
  if (mode_ == AwmMode::fixed_equal) {
    const Index batch = paths[0].shape()[0];
    const Index n = path_count();
    Var lambda = graph.constant(Tensor({batch, n}, 1.0 / static_cast<double>(n)));
    return {lambda, graph.constant(Tensor({batch, n}, 0.5))};
  }
  return infer_weights(graph, embed_paths(paths), record_gradients);
}

}  // namespace awm
