#include "awm/trainer.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <istream>
#include <numeric>
#include <sstream>

namespace awm {

void TrainConfig::validate() const {
  if (t < 0) throw std::invalid_argument("alternation period t must be >= 0");
  if (total_epochs < 1) throw std::invalid_argument("total_epochs must be positive");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be positive");
  for (std::size_t i = 0; i < lr_decay_epochs.size(); ++i) {
    if (i > 0 && lr_decay_epochs[i] <= lr_decay_epochs[i - 1]) {
      throw std::invalid_argument("lr_decay_epochs must be strictly increasing");
    }
    if (lr_decay_epochs[i] >= total_epochs) throw std::invalid_argument("lr_decay_epochs must be < total_epochs");
  }
}

const char* to_string(Phase phase) {
  switch (phase) {
    case Phase::joint: return "joint";
    case Phase::backbone: return "backbone";
    case Phase::awm: return "awm";
    case Phase::backbone_fixed_equal: return "backbone_fixed_equal";
  }
  return "unknown";
}

Phase parse_phase(const std::string& text) {
  for (auto p : {Phase::joint, Phase::backbone, Phase::awm, Phase::backbone_fixed_equal})
    if (text == to_string(p)) return p;
  throw std::invalid_argument("unknown phase '" + text + "'");
}

double lr_at_epoch(const TrainConfig& config, int epoch) {
  const auto passed = std::count_if(config.lr_decay_epochs.begin(), config.lr_decay_epochs.end(),
                                    [epoch](int m) { return m <= epoch; });
  return config.lr0 * std::pow(config.lr_factor, static_cast<double>(passed));
}

Phase phase_at_epoch(const TrainConfig& config, int epoch) {
  if (config.t == 0) return Phase::joint;
  const int block = epoch / config.t;
  if (block == 0) {
    return (config.equal_weights_first_epoch_only && epoch > 0) ? Phase::backbone : Phase::backbone_fixed_equal;
  }
  return block % 2 == 1 ? Phase::awm : Phase::backbone;
}

void sgd_nesterov_step(std::span<Parameter* const> params, SgdState& state, const SgdOptions& opts) {
  for (Parameter* p : params) {
    require_same_shape(p->value, p->grad, "sgd_nesterov_step");
    auto [it, inserted] = state.try_emplace(p->name, p->value.shape());
    Tensor& v = it->second;
    require_same_shape(p->value, v, "sgd_nesterov_step velocity");
    auto value = p->value.flat();
    const Eigen::VectorXd g = p->grad.flat() + opts.weight_decay * value;
    v.flat() = opts.momentum * v.flat() + g;
    value -= opts.lr * (g + opts.momentum * v.flat());
  }
}

std::string to_json_line(const EpochRecord& r) {
  nlohmann::json j{{"epoch", r.epoch},         {"phase", to_string(r.phase)}, {"lr", r.lr},
                   {"train_loss", r.train_loss}, {"train_acc", r.train_acc}};
  j["test_err"] = r.test_err ? nlohmann::json(*r.test_err) : nlohmann::json(nullptr);
  return j.dump();
}

EpochRecord parse_history_line(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  EpochRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.phase = parse_phase(j.at("phase").get<std::string>());
  r.lr = j.at("lr").get<double>();
  r.train_loss = j.at("train_loss").get<double>();
  r.train_acc = j.at("train_acc").get<double>();
  if (!j.at("test_err").is_null()) r.test_err = j.at("test_err").get<double>();
  return r;
}

std::vector<EpochRecord> read_history(std::istream& is) {
  std::vector<EpochRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (!line.empty()) out.push_back(parse_history_line(line));
  }
  return out;
}

TrainingDiverged::TrainingDiverged(int epoch, int batch, Phase phase, double lr, double loss)
    : NumericalError("non-finite training loss " + std::to_string(loss) + " at epoch " + std::to_string(epoch) +
                     ", batch " + std::to_string(batch) + ", phase " + to_string(phase) + ", lr " + std::to_string(lr)),
      epoch(epoch),
      batch(batch),
      phase(phase),
      lr(lr),
      loss(loss) {}

EvalResult evaluate(Network& net, const Dataset& data, const Normalization& norm, int batch_size) {
  ForwardOptions opts;
  opts.bn_mode = BatchNormMode::eval;
  opts.backbone_trainable = false;
  opts.inference = true;
  Index wrong = 0;
  double loss = 0.0;
  std::vector<Index> rows;
  for (Index start = 0; start < data.size(); start += batch_size) {
    const Index end = std::min<Index>(start + batch_size, data.size());
    rows.resize(static_cast<std::size_t>(end - start));
    std::iota(rows.begin(), rows.end(), start);
    Graph g;
    auto out = net.forward(g, make_batch(data, rows, norm), opts);
    const Tensor& logits = out.logits.value();
    std::span<const int> labels(data.labels.data() + start, static_cast<std::size_t>(end - start));
    loss += softmax_cross_entropy(logits, labels).loss * static_cast<double>(end - start);
    for (Index b = 0; b < logits.dim(0); ++b) {
      Index arg = 0;
      logits.matrix().row(b).maxCoeff(&arg);
      if (arg != labels[static_cast<std::size_t>(b)]) ++wrong;
    }
  }
  const double n = static_cast<double>(data.size());
  return {static_cast<double>(wrong) / n, loss / n};
}

namespace {

std::mt19937_64 stream(std::uint64_t seed, std::uint64_t tag) {
  std::seed_seq seq{seed, tag};
  return std::mt19937_64(seq);
}

std::string rng_text(const std::mt19937_64& rng) {
  std::ostringstream os;
  os << rng;
  return os.str();
}

}  // namespace

Trainer::Trainer(Network& net, const Dataset& train, const Dataset* test, const Normalization& norm, TrainConfig config)
    : net_(net),
      train_(train),
      test_(test),
      norm_(norm),
      config_(std::move(config)),
      shuffle_rng_(stream(config_.seed, 0x73687566)),
      augment_rng_(stream(config_.seed, 0x61756720)) {
  config_.validate();
  if (train_.images.empty()) throw std::invalid_argument("Trainer: empty training set");
}

std::string Trainer::shuffle_rng_state() const { return rng_text(shuffle_rng_); }
std::string Trainer::augment_rng_state() const { return rng_text(augment_rng_); }

void Trainer::restore(int epoch, SgdState optimizer, const std::string& shuffle_rng, const std::string& augment_rng) {
  epoch_ = epoch;
  sgd_ = std::move(optimizer);
  std::istringstream(shuffle_rng) >> shuffle_rng_;
  std::istringstream(augment_rng) >> augment_rng_;
}

std::vector<Parameter*> Trainer::active_parameters(Phase phase) {
  if (net_.awm_units().empty()) return net_.parameters();
  switch (phase) {
    case Phase::joint: return net_.parameters();
    case Phase::awm: return net_.awm_parameters();
    case Phase::backbone:
    case Phase::backbone_fixed_equal: return net_.backbone_parameters();
  }
  return {};
}

ForwardOptions Trainer::prepare_phase(Phase phase) {
  ForwardOptions opts;
  opts.bn_mode = BatchNormMode::train;
  switch (phase) {
    case Phase::joint: net_.set_awm_mode(AwmMode::active); break;
    case Phase::backbone_fixed_equal: net_.set_awm_mode(AwmMode::fixed_equal); break;
    case Phase::backbone: net_.set_awm_mode(AwmMode::frozen); break;
    case Phase::awm:
      net_.set_awm_mode(AwmMode::active);
      opts.backbone_trainable = net_.awm_units().empty();
      break;
  }
  return opts;
}

EpochRecord Trainer::run_epoch() {
  EpochRecord rec;
  rec.epoch = epoch_;
  rec.phase = net_.awm_units().empty() ? Phase::joint : phase_at_epoch(config_, epoch_);
  rec.lr = lr_at_epoch(config_, epoch_);
  const ForwardOptions opts = prepare_phase(rec.phase);
  const std::vector<Parameter*> active = active_parameters(rec.phase);
  const SgdOptions sgd{rec.lr, config_.momentum, config_.weight_decay};

  std::vector<Index> order(static_cast<std::size_t>(train_.size()));
  std::iota(order.begin(), order.end(), Index{0});
  std::shuffle(order.begin(), order.end(), shuffle_rng_);

  double loss_sum = 0.0;
  Index correct = 0;
  int batch_index = 0;
  for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config_.batch_size), ++batch_index) {
    const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
    const auto b = static_cast<Index>(end - start);
    Tensor batch({b, 3, kImageSide, kImageSide});
    std::vector<int> labels(static_cast<std::size_t>(b));
    for (Index i = 0; i < b; ++i) {
      const auto row = static_cast<std::size_t>(order[start + static_cast<std::size_t>(i)]);
      const Image img = config_.augment ? augment(train_.images[row], augment_rng_) : train_.images[row];
      normalize_into(img, norm_, batch.data() + i * kImageBytes);
      labels[static_cast<std::size_t>(i)] = train_.labels[row];
    }
    for (Parameter* p : active) p->zero_grad();
    Graph g;
    auto out = net_.forward(g, batch, opts);
    Var loss = softmax_cross_entropy(out.logits, labels);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) throw TrainingDiverged(epoch_, batch_index, rec.phase, rec.lr, value);
    g.backward(loss);
    sgd_nesterov_step(active, sgd_, sgd);
    loss_sum += value * static_cast<double>(b);
    const Tensor& logits = out.logits.value();
    for (Index i = 0; i < b; ++i) {
      Index arg = 0;
      logits.matrix().row(i).maxCoeff(&arg);
      if (arg == labels[static_cast<std::size_t>(i)]) ++correct;
    }
  }
  const double n = static_cast<double>(train_.size());
  rec.train_loss = loss_sum / n;
  rec.train_acc = static_cast<double>(correct) / n;
  ++epoch_;
  const bool last = epoch_ == config_.total_epochs;
  const bool scheduled = config_.eval_interval > 0 && epoch_ % config_.eval_interval == 0;
  if (test_ && !test_->images.empty() && (last || scheduled)) rec.test_err = evaluate(net_, *test_, norm_).top1_error;
  history_.push_back(rec);
  return rec;
}

const std::vector<EpochRecord>& Trainer::train(const TrainCallbacks& callbacks) {
  while (epoch_ < config_.total_epochs) {
    EpochRecord rec = run_epoch();
    if (callbacks.on_epoch_end) callbacks.on_epoch_end(rec);
  }
  return history_;
}

}  // namespace awm
