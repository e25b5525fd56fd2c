#include "awm/experiment_config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace awm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_int(const std::string& key, const std::string& text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ConfigError("config: " + key + ": expected an integer, got '" + text + "'");
  }
  return v;
}

double parse_double(const std::string& key, const std::string& text) {
  double v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || !std::isfinite(v)) {
    throw ConfigError("config: " + key + ": expected a finite number, got '" + text + "'");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: " + key + ": expected true or false, got '" + text + "'");
}

std::vector<int> parse_int_list(const std::string& key, const std::string& text) {
  std::vector<int> out;
  if (trim(text).empty()) return out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_int<int>(key, trim(item)));
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <typename Fn>
auto translate(const std::string& key, Fn&& fn) {
  try {
    return fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError("config: " + key + ": " + e.what());
  }
}

}  // namespace

void ExperimentConfig::validate() const {
  translate("network", [&] { network.validate(); return 0; });
  translate("train", [&] { train.validate(); return 0; });
  if (data.subset_per_class < 0 || data.test_subset_per_class < 0) {
    throw ConfigError("config: subset sizes must be non-negative");
  }
  if (checkpoint_interval < 1) throw ConfigError("config: checkpoint_interval must be >= 1");
  const int classes = data.dataset == CifarVariant::c10 ? 10 : 100;
  if (network.num_classes != classes) {
    throw ConfigError("config: network.num_classes = " + std::to_string(network.num_classes) + " but " +
                      to_string(data.dataset) + " has " + std::to_string(classes) + " classes");
  }
}

std::vector<int> rescaled_milestones(int total_epochs) {
  const auto scale = [&](int m) { return std::max(1, static_cast<int>(std::lround(m * total_epochs / 350.0))); };
  // Short schedules can collapse or overrun the milestones; keep the valid distinct ones.
  std::vector<int> out;
  for (int m : {scale(150), scale(250)})
    if (m < total_epochs && (out.empty() || m > out.back())) out.push_back(m);
  return out;
}

ExperimentConfig desk_scale_config() {
  ExperimentConfig c;
  c.train.total_epochs = 40;
  c.train.lr_decay_epochs = rescaled_milestones(40);
  return c;
}

ExperimentConfig full_scale_config() {
  ExperimentConfig c;
  c.network.depth = 110;
  c.train.total_epochs = 350;
  c.train.lr_decay_epochs = {150, 250};
  c.data.subset_per_class = 0;
  c.checkpoint_interval = 10;
  return c;
}

std::string to_text(const ExperimentConfig& c) {
  std::ostringstream os;
  const auto list = [](const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s;
  };
  os << "seed = " << c.seed << '\n'
     << "output.dir = " << c.output_dir << '\n'
     << "output.checkpoint_interval = " << c.checkpoint_interval << '\n'
     << "network.kind = " << to_string(c.network.kind) << '\n'
     << "network.depth = " << c.network.depth << '\n'
     << "network.num_classes = " << c.network.num_classes << '\n'
     << "network.base_channels = " << c.network.base_channels << '\n'
     << "network.growth_rate = " << c.network.growth_rate << '\n'
     << "network.reduction = " << c.network.reduction << '\n'
     << "network.shortcut = " << to_string(c.network.shortcut) << '\n'
     << "train.lr0 = " << fmt(c.train.lr0) << '\n'
     << "train.lr_decay_epochs = " << list(c.train.lr_decay_epochs) << '\n'
     << "train.lr_factor = " << fmt(c.train.lr_factor) << '\n'
     << "train.momentum = " << fmt(c.train.momentum) << '\n'
     << "train.weight_decay = " << fmt(c.train.weight_decay) << '\n'
     << "train.batch_size = " << c.train.batch_size << '\n'
     << "train.t = " << c.train.t << '\n'
     << "train.total_epochs = " << c.train.total_epochs << '\n'
     << "train.seed = " << c.train.seed << '\n'
     << "train.equal_weights_first_epoch_only = " << (c.train.equal_weights_first_epoch_only ? "true" : "false") << '\n'
     << "train.augment = " << (c.train.augment ? "true" : "false") << '\n'
     << "train.eval_interval = " << c.train.eval_interval << '\n'
     << "data.dataset = " << to_string(c.data.dataset) << '\n'
     << "data.dir = " << c.data.dir << '\n'
     << "data.subset_per_class = " << c.data.subset_per_class << '\n'
     << "data.test_subset_per_class = " << c.data.test_subset_per_class << '\n'
     << "data.subset_seed = " << c.data.subset_seed << '\n';
  return os.str();
}

void set_config_value(ExperimentConfig& c, const std::string& key, const std::string& value) {
  const std::string& v = value;
  if (key == "seed") c.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "output.dir") c.output_dir = v;
  else if (key == "output.checkpoint_interval") c.checkpoint_interval = parse_int<int>(key, v);
  else if (key == "network.kind") c.network.kind = translate(key, [&] { return parse_network_kind(v); });
  else if (key == "network.depth") c.network.depth = parse_int<int>(key, v);
  else if (key == "network.num_classes") c.network.num_classes = parse_int<int>(key, v);
  else if (key == "network.base_channels") c.network.base_channels = parse_int<Index>(key, v);
  else if (key == "network.growth_rate") c.network.growth_rate = parse_int<Index>(key, v);
  else if (key == "network.reduction") c.network.reduction = parse_int<Index>(key, v);
  else if (key == "network.shortcut") c.network.shortcut = translate(key, [&] { return parse_shortcut_kind(v); });
  else if (key == "train.lr0") c.train.lr0 = parse_double(key, v);
  else if (key == "train.lr_decay_epochs") c.train.lr_decay_epochs = parse_int_list(key, v);
  else if (key == "train.lr_factor") c.train.lr_factor = parse_double(key, v);
  else if (key == "train.momentum") c.train.momentum = parse_double(key, v);
  else if (key == "train.weight_decay") c.train.weight_decay = parse_double(key, v);
  else if (key == "train.batch_size") c.train.batch_size = parse_int<int>(key, v);
  else if (key == "train.t") c.train.t = parse_int<int>(key, v);
  else if (key == "train.total_epochs") c.train.total_epochs = parse_int<int>(key, v);
  else if (key == "train.seed") c.train.seed = parse_int<std::uint64_t>(key, v);
  else if (key == "train.equal_weights_first_epoch_only") c.train.equal_weights_first_epoch_only = parse_bool(key, v);
  else if (key == "train.augment") c.train.augment = parse_bool(key, v);
  else if (key == "train.eval_interval") c.train.eval_interval = parse_int<int>(key, v);
  else if (key == "data.dataset") c.data.dataset = translate(key, [&] { return parse_cifar_variant(v); });
  else if (key == "data.dir") c.data.dir = v;
  else if (key == "data.subset_per_class") c.data.subset_per_class = parse_int<int>(key, v);
  else if (key == "data.test_subset_per_class") c.data.test_subset_per_class = parse_int<int>(key, v);
  else if (key == "data.subset_seed") c.data.subset_seed = parse_int<std::uint64_t>(key, v);
  else throw ConfigError("config: unknown key '" + key + "'");
}

void apply_config_text(ExperimentConfig& c, const std::string& text) {
  std::istringstream is(text);
  std::string line;
  int line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + ": expected 'key = value'");
    }
    set_config_value(c, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
}

ExperimentConfig parse_experiment_config(const std::string& text) {
  ExperimentConfig c = desk_scale_config();
  apply_config_text(c, text);
  return c;
}

ExperimentConfig load_experiment_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_experiment_config(ss.str());
}

void save_experiment_config(const std::filesystem::path& path, const ExperimentConfig& config) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  os << "# resolved experiment configuration\n" << to_text(config);
}

}  // namespace awm
