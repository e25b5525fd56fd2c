#include "awm/networks.hpp"

#include <stdexcept>

namespace awm {

const char* to_string(NetworkKind kind) {
  switch (kind) {
    case NetworkKind::resnet_awm: return "resnet_awm";
    case NetworkKind::resnet_plain: return "resnet_plain";
    case NetworkKind::densenet_awm: return "densenet_awm";
    case NetworkKind::densenet_plain: return "densenet_plain";
  }
  return "unknown";
}

NetworkKind parse_network_kind(const std::string& text) {
  for (auto k : {NetworkKind::resnet_awm, NetworkKind::resnet_plain, NetworkKind::densenet_awm,
                 NetworkKind::densenet_plain}) {
    if (text == to_string(k)) return k;
  }
  throw std::invalid_argument("unknown network kind '" + text + "'");
}

const char* to_string(ShortcutKind kind) {
  return kind == ShortcutKind::projection ? "projection" : "padded_identity";
}

ShortcutKind parse_shortcut_kind(const std::string& text) {
  if (text == "projection") return ShortcutKind::projection;
  if (text == "padded_identity") return ShortcutKind::padded_identity;
  throw std::invalid_argument("unknown shortcut kind '" + text + "'");
}

int mapping_unit_count(int depth) {
  if (depth < 8 || (depth - 2) % 6 != 0) {
    throw std::invalid_argument("ResNet depth " + std::to_string(depth) +
                                " is invalid: need depth >= 8 and (depth - 2) % 6 == 0");
  }
  return (depth - 2) / 2;
}

int dense_layers_per_block(int depth) {
  if (depth < 10 || (depth - 4) % 6 != 0) {
    throw std::invalid_argument("DenseNet-BC depth " + std::to_string(depth) +
                                " is invalid: need depth >= 10 and (depth - 4) % 6 == 0");
  }
  return (depth - 4) / 6;
}

void NetworkConfig::validate() const {
  if (is_resnet(kind)) {
    mapping_unit_count(depth);
  } else {
    dense_layers_per_block(depth);
    if (growth_rate < 1) throw std::invalid_argument("growth rate must be positive");
  }
  if (num_classes < 2) throw std::invalid_argument("num_classes must be at least 2");
  if (base_channels < 1) throw std::invalid_argument("base_channels must be positive");
  if (reduction < 3) throw std::invalid_argument("AWM reduction width must exceed 2");
}

Tensor ForwardResult::trace_matrix() const {
  if (lambdas.empty()) return {};
  const Index batch = lambdas.front().dim(0);
  Tensor out({batch, static_cast<Index>(lambdas.size())});
  for (std::size_t u = 0; u < lambdas.size(); ++u)
    for (Index b = 0; b < batch; ++b) out(b, static_cast<Index>(u)) = lambdas[u](b, 0);
  return out;
}

namespace {

ConvLayer make_conv(const std::string& name, Index in, Index out, Index k, Index stride, Index padding,
                    std::mt19937_64& rng) {
  return ConvLayer{Parameter(name, he_normal({out, in, k, k}, in * k * k, rng)), stride, padding};
}

BatchNormLayer make_bn(const std::string& name, Index channels) {
  return BatchNormLayer{Parameter(name + ".gamma", Tensor({channels}, 1.0)), Parameter(name + ".beta", Tensor({channels})),
                        BatchNormStats<double>::identity(channels)};
}

void record_weights(ForwardResult* result, const InferredWeights& w) {
  if (!result) return;
  result->lambdas.push_back(w.lambda.value());
  result->gates.push_back(w.gates.value());
}

}  // namespace

ResidualBlock ResidualBlock::make(const std::string& name, Index in, Index out, Index stride, ShortcutKind shortcut,
                                  bool with_awm, Index reduction, std::mt19937_64& rng, std::mt19937_64& awm_rng) {
  ResidualBlock b;
  b.in_channels = in;
  b.out_channels = out;
  b.stride = stride;
  b.conv1 = make_conv(name + ".conv1", in, out, 3, stride, 1, rng);
  b.bn1 = make_bn(name + ".bn1", out);
  b.conv2 = make_conv(name + ".conv2", out, out, 3, 1, 1, rng);
  b.bn2 = make_bn(name + ".bn2", out);
  if (stride != 1 || in != out) {
    if (shortcut == ShortcutKind::projection) {
      b.projection = make_conv(name + ".shortcut.conv", in, out, 1, stride, 0, rng);
      b.projection_bn = make_bn(name + ".shortcut.bn", out);
    } else {
      b.padded_shortcut = true;
    }
  }
  if (with_awm) b.awm.emplace(name + ".awm", std::vector<Index>{out, out}, reduction, awm_rng);
  return b;
}

std::vector<Parameter*> ResidualBlock::backbone_parameters() {
  std::vector<Parameter*> out{&conv1.kernel, &bn1.gamma, &bn1.beta, &conv2.kernel, &bn2.gamma, &bn2.beta};
  if (projection) {
    out.push_back(&projection->kernel);
    out.push_back(&projection_bn->gamma);
    out.push_back(&projection_bn->beta);
  }
  return out;
}

DenseBlock DenseBlock::make(const std::string& name, Index in_channels, int layers, Index growth, bool with_awm,
                            Index reduction, std::mt19937_64& rng, std::mt19937_64& awm_rng) {
  DenseBlock block;
  block.layers.reserve(static_cast<std::size_t>(layers));
  std::vector<Index> bundle_dims{in_channels};
  Index channels = in_channels;
  for (int l = 0; l < layers; ++l) {
    const std::string prefix = name + ".layer" + std::to_string(l);
    DenseLayer layer;
    layer.bn1 = make_bn(prefix + ".bn1", channels);
    layer.conv1 = make_conv(prefix + ".conv1", channels, 4 * growth, 1, 1, 0, rng);
    layer.bn2 = make_bn(prefix + ".bn2", 4 * growth);
    layer.conv2 = make_conv(prefix + ".conv2", 4 * growth, growth, 3, 1, 1, rng);
    bundle_dims.push_back(growth);
    if (with_awm) layer.awm.emplace(prefix + ".awm", bundle_dims, reduction, awm_rng);
    block.layers.push_back(std::move(layer));
    channels += growth;
  }
  return block;
}

std::vector<Parameter*> DenseBlock::backbone_parameters() {
  std::vector<Parameter*> out;
  for (DenseLayer& l : layers) {
    for (Parameter* p : {&l.bn1.gamma, &l.bn1.beta, &l.conv1.kernel, &l.bn2.gamma, &l.bn2.beta, &l.conv2.kernel})
      out.push_back(p);
  }
  return out;
}

Var ResidualBlock::forward(Graph& g, Var x, const ForwardOptions& opts, ForwardResult* result) {
  const bool t = opts.backbone_trainable && !opts.inference;
  Var f = relu(bn1(g, conv1(g, x, t), opts.bn_mode, t));
  f = bn2(g, conv2(g, f, t), opts.bn_mode, t);
  Var s = x;
  if (projection) {
    s = (*projection_bn)(g, (*projection)(g, x, t), opts.bn_mode, t);
  } else if (padded_shortcut) {
    s = pad_shortcut(x, out_channels, stride);
  }
  Var merged;
  if (awm) {
    const Var paths[] = {f, s};
    InferredWeights w = awm->weights_for(g, paths, !opts.inference);
    record_weights(result, w);
    merged = weighted_merge_sum(f, s, w.lambda);
  } else {
    merged = f + s;
    if (opts.plain_merge_scale != 1.0) merged = scale(merged, opts.plain_merge_scale);
  }
  if (opts.probes) opts.probes->push_back({f.value(), s.value(), merged.value()});
  return relu(merged);
}

Var DenseBlock::forward(Graph& g, Var x, const ForwardOptions& opts, ForwardResult* result) {
  const bool t = opts.backbone_trainable && !opts.inference;
  std::vector<Var> bundles{x};
  Var current = x;
  for (DenseLayer& layer : layers) {
    Var h = relu(layer.bn1(g, current, opts.bn_mode, t));
    h = layer.conv1(g, h, t);
    h = relu(layer.bn2(g, h, opts.bn_mode, t));
    h = layer.conv2(g, h, t);
    bundles.push_back(h);
    if (layer.awm) {
      InferredWeights w = layer.awm->weights_for(g, bundles, !opts.inference);
      record_weights(result, w);
      current = weighted_merge_concat(bundles, w.lambda);
    } else {
      current = concat(bundles);
    }
    if (opts.probes) opts.probes->push_back({h.value(), x.value(), current.value()});
  }
  return current;
}

Network Network::build(const NetworkConfig& config, std::uint64_t seed) {
  config.validate();
  Network net;
  net.config_ = config;
  std::mt19937_64 rng(seed);
  std::seed_seq awm_seed{seed, std::uint64_t{0x61776d}};
  std::mt19937_64 awm_rng(awm_seed);
  if (is_resnet(config.kind)) {
    net.build_resnet(rng, awm_rng);
  } else {
    net.build_densenet(rng, awm_rng);
  }
  return net;
}

void Network::build_resnet(std::mt19937_64& rng, std::mt19937_64& awm_rng) {
  const Index c0 = config_.base_channels;
  const int per_stage = (config_.depth - 2) / 6;
  const bool with_awm = has_awm(config_.kind);
  stem_ = make_conv("stem.conv", 3, c0, 3, 1, 1, rng);
  stem_bn_ = make_bn("stem.bn", c0);
  blocks_.reserve(static_cast<std::size_t>(3 * per_stage));
  Index in = c0;
  for (int stage = 0; stage < 3; ++stage) {
    const Index out = c0 << stage;
    for (int i = 0; i < per_stage; ++i) {
      const std::string name = "stage" + std::to_string(stage + 1) + ".block" + std::to_string(i);
      ResidualBlock b = ResidualBlock::make(name, in, out, (stage > 0 && i == 0) ? 2 : 1, config_.shortcut, with_awm,
                                            config_.reduction, rng, awm_rng);
      blocks_.push_back(std::move(b));
      in = out;
    }
  }
  fc_weight_ = Parameter("fc.weight", he_normal({config_.num_classes, in}, in, rng));
  fc_bias_ = Parameter("fc.bias", Tensor({config_.num_classes}));
}

void Network::build_densenet(std::mt19937_64& rng, std::mt19937_64& awm_rng) {
  const Index k = config_.growth_rate;
  const int layers = dense_layers_per_block(config_.depth);
  const bool with_awm = has_awm(config_.kind);
  Index channels = 2 * k;
  stem_ = make_conv("stem.conv", 3, channels, 3, 1, 1, rng);
  for (int blk = 0; blk < 3; ++blk) {
    DenseBlock block = DenseBlock::make("dense" + std::to_string(blk + 1), channels, layers, k, with_awm,
                                        config_.reduction, rng, awm_rng);
    channels += layers * k;
    dense_blocks_.push_back(std::move(block));
    if (blk < 2) {
      const std::string name = "transition" + std::to_string(blk + 1);
      const Index out = channels / 2;
      transitions_.push_back(Transition{make_bn(name + ".bn", channels), make_conv(name + ".conv", channels, out, 1, 1, 0, rng)});
      channels = out;
    }
  }
  final_bn_ = make_bn("final.bn", channels);
  fc_weight_ = Parameter("fc.weight", he_normal({config_.num_classes, channels}, channels, rng));
  fc_bias_ = Parameter("fc.bias", Tensor({config_.num_classes}));
}

ForwardResult Network::forward(Graph& g, const Tensor& input, const ForwardOptions& opts) {
  if (input.rank() != 4 || input.dim(1) != 3 || input.dim(2) != 32 || input.dim(3) != 32) {
    throw ShapeError("network input must be B x 3 x 32 x 32, got " + to_string(input.shape()));
  }
  const bool t = opts.backbone_trainable && !opts.inference;
  ForwardResult result;
  Var x = stem_(g, g.constant(input), t);
  if (is_resnet(config_.kind)) {
    x = relu((*stem_bn_)(g, x, opts.bn_mode, t));
    for (ResidualBlock& b : blocks_) x = b.forward(g, x, opts, &result);
  } else {
    for (std::size_t i = 0; i < dense_blocks_.size(); ++i) {
      x = dense_blocks_[i].forward(g, x, opts, &result);
      if (i < transitions_.size()) {
        Transition& tr = transitions_[i];
        x = avg_pool2x2(tr.conv(g, relu(tr.bn(g, x, opts.bn_mode, t)), t));
      }
    }
    x = relu((*final_bn_)(g, x, opts.bn_mode, t));
  }
  x = global_avg_pool(x);
  result.logits = fully_connected(x, g.parameter(fc_weight_, t), g.parameter(fc_bias_, t));
  return result;
}

std::vector<AwmUnit*> Network::awm_units() {
  std::vector<AwmUnit*> out;
  for (auto& b : blocks_)
    if (b.awm) out.push_back(&*b.awm);
  for (auto& blk : dense_blocks_)
    for (auto& l : blk.layers)
      if (l.awm) out.push_back(&*l.awm);
  return out;
}

std::vector<const AwmUnit*> Network::awm_units() const {
  std::vector<const AwmUnit*> out;
  for (auto* u : const_cast<Network*>(this)->awm_units()) out.push_back(u);
  return out;
}

void Network::set_awm_mode(AwmMode mode) {
  for (AwmUnit* u : awm_units()) u->set_mode(mode);
}

template <typename Fn>
void Network::for_each_backbone(Fn&& fn) {
  auto conv = [&](ConvLayer& c) { fn(c.kernel, nullptr); };
  auto bn = [&](BatchNormLayer& b) {
    fn(b.gamma, nullptr);
    fn(b.beta, &b.stats);
  };
  conv(stem_);
  if (stem_bn_) bn(*stem_bn_);
  for (auto& b : blocks_) {
    conv(b.conv1);
    bn(b.bn1);
    conv(b.conv2);
    bn(b.bn2);
    if (b.projection) {
      conv(*b.projection);
      bn(*b.projection_bn);
    }
  }
  for (std::size_t i = 0; i < dense_blocks_.size(); ++i) {
    for (auto& l : dense_blocks_[i].layers) {
      bn(l.bn1);
      conv(l.conv1);
      bn(l.bn2);
      conv(l.conv2);
    }
    if (i < transitions_.size()) {
      bn(transitions_[i].bn);
      conv(transitions_[i].conv);
    }
  }
  if (final_bn_) bn(*final_bn_);
  fn(fc_weight_, nullptr);
  fn(fc_bias_, nullptr);
}

std::vector<Parameter*> Network::backbone_parameters() {
  std::vector<Parameter*> out;
  for_each_backbone([&](Parameter& p, BatchNormStats<double>*) { out.push_back(&p); });
  return out;
}

std::vector<Parameter*> Network::awm_parameters() {
  std::vector<Parameter*> out;
  for (AwmUnit* u : awm_units())
    for (Parameter* p : u->parameters()) out.push_back(p);
  return out;
}

std::vector<Parameter*> Network::parameters() {
  auto out = backbone_parameters();
  for (Parameter* p : awm_parameters()) out.push_back(p);
  return out;
}

std::vector<StateEntry> Network::state() {
  std::vector<StateEntry> out;
  for (Parameter* p : parameters()) out.push_back({p->name, &p->value});
  for_each_backbone([&](Parameter& p, BatchNormStats<double>* stats) {
    if (!stats) return;
    // p is the beta of a batch-norm layer named "<layer>.beta"
    const std::string layer = p.name.substr(0, p.name.size() - 5);
    out.push_back({layer + ".running_mean", &stats->running_mean});
    out.push_back({layer + ".running_var", &stats->running_var});
  });
  return out;
}

ParameterCount Network::count_parameters() const {
  ParameterCount c;
  auto* self = const_cast<Network*>(this);
  for (const Parameter* p : self->backbone_parameters()) c.backbone += p->value.size();
  for (const Parameter* p : self->awm_parameters()) c.awm += p->value.size();
  c.total = c.backbone + c.awm;
  return c;
}

}  // namespace awm
