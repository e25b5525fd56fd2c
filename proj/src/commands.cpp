#include "awm/commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "awm/checkpoint.hpp"
#include "awm/trace_analytics.hpp"

namespace awm {

namespace fs = std::filesystem;

namespace {

std::string fmt(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*g", digits, v);
  return buf;
}

Dataset load_split(const DataConfig& config, const std::string& split, int per_class) {
  if (config.dir.empty()) throw ConfigError("data.dir is not set (use --data-dir)");
  Dataset d = load_cifar_split(config.dir, config.dataset, split);
  return per_class > 0 ? subset(d, per_class, config.subset_seed) : d;
}

void write_manifest(const fs::path& path, const ExperimentData& data) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  for (const Dataset* d : {&data.train, &data.test}) {
    os << d->split << " images " << d->size() << '\n';
    for (std::size_t i = 0; i < d->sources.size(); ++i) {
      os << d->split << " source " << d->sources[i] << " fnv1a64 " << (i < d->checksums.size() ? d->checksums[i] : "")
         << '\n';
    }
  }
  for (int c = 0; c < 3; ++c) {
    os << "normalization channel " << c << " mean " << fmt(data.norm.mean[static_cast<std::size_t>(c)], 17)
       << " std " << fmt(data.norm.stddev[static_cast<std::size_t>(c)], 17) << '\n';
  }
}

std::vector<EpochRecord> read_history_file(const fs::path& path) {
  std::ifstream is(path);
  if (!is) return {};
  return read_history(is);
}

// Options that map one-to-one onto configuration keys.
struct Flag {
  const char* name;
  const char* key;
  const char* help;
};

constexpr Flag kNetworkFlags[] = {
    {"--arch", "network.kind", "resnet_awm | resnet_plain | densenet_awm | densenet_plain"},
    {"--depth", "network.depth", "network depth"},
    {"--classes", "network.num_classes", "number of output classes"},
    {"--shortcut", "network.shortcut", "projection | padded_identity"},
};
constexpr Flag kDataFlags[] = {
    {"--dataset", "data.dataset", "cifar10 | cifar100"},
    {"--data-dir", "data.dir", "directory holding the CIFAR binary files"},
    {"--subset", "data.subset_per_class", "training images per class (0 = all)"},
    {"--test-subset", "data.test_subset_per_class", "test images per class (0 = all)"},
};
constexpr Flag kTrainFlags[] = {
    {"--t", "train.t", "alternation period in epochs (0 = joint training)"},
    {"--epochs", "train.total_epochs", "total epochs"},
    {"--milestones", "train.lr_decay_epochs", "comma-separated learning-rate decay epochs"},
    {"--batch-size", "train.batch_size", "mini-batch size"},
    {"--lr", "train.lr0", "initial learning rate"},
    {"--eval-interval", "train.eval_interval", "evaluate the test set every n epochs"},
    {"--out", "output.dir", "output directory"},
};

class ConfigOptions {
 public:
  void add_common(CLI::App* app) {
    app->add_option("--config", config_path_, "key = value configuration file")->check(CLI::ExistingFile);
    seed_opt_ = app->add_option("--seed", seed_, "seed for initialization, shuffling and augmentation");
    app->add_option("--set", sets_, "override any configuration key (key=value)");
    app->add_flag("--full-scale", full_scale_, "start from the full-data 350-epoch schedule");
  }
  template <std::size_t N>
  void add(CLI::App* app, const Flag (&flags)[N]) {
    for (const Flag& f : flags) options_.push_back({app->add_option(f.name, values_[f.key], f.help), f.key});
  }

  ExperimentConfig resolve() const {
    ExperimentConfig c = full_scale_ ? full_scale_config() : desk_scale_config();
    if (!config_path_.empty()) {
      std::ifstream is(config_path_);
      std::stringstream ss;
      ss << is.rdbuf();
      apply_config_text(c, ss.str());
    }
    for (const std::string& s : sets_) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      set_config_value(c, s.substr(0, eq), s.substr(eq + 1));
    }
    bool epochs = false, milestones = false, classes = false, dataset = false;
    for (const auto& [opt, key] : options_) {
      if (opt->count() == 0) continue;
      set_config_value(c, key, values_.at(key));
      const std::string k = key;
      epochs |= k == "train.total_epochs";
      milestones |= k == "train.lr_decay_epochs";
      classes |= k == "network.num_classes";
      dataset |= k == "data.dataset";
    }
    if (epochs && !milestones) c.train.lr_decay_epochs = rescaled_milestones(c.train.total_epochs);
    if (dataset && !classes) c.network.num_classes = c.data.dataset == CifarVariant::c10 ? 10 : 100;
    if (seed_opt_ && seed_opt_->count() > 0) {
      c.seed = seed_;
      c.train.seed = seed_;
    }
    return c;
  }

 private:
  std::string config_path_;
  std::uint64_t seed_ = 1;
  CLI::Option* seed_opt_ = nullptr;
  std::vector<std::string> sets_;
  bool full_scale_ = false;
  std::map<std::string, std::string> values_;
  std::vector<std::pair<CLI::Option*, const char*>> options_;
};

Network load_network(const std::string& path, Checkpoint* out = nullptr) {
  Checkpoint ckpt = load_checkpoint(path);
  Network net = restore_network(ckpt);
  if (out) *out = std::move(ckpt);
  return net;
}

int cmd_train(const ExperimentConfig& c, const std::string& resume, std::ostream& out) {
  c.validate();
  const ExperimentData data = load_experiment_data(c.data);
  const RunSummary s = run_experiment(c, data, out, resume);
  out << "final_test_error " << fmt(s.final_test_error) << "\ncheckpoint " << s.checkpoint.string() << '\n';
  return kExitOk;
}

int cmd_eval(const ExperimentConfig& c, const std::string& checkpoint, const std::string& split, std::ostream& out) {
  Checkpoint ckpt;
  Network net = load_network(checkpoint, &ckpt);
  const Dataset data = load_split(c.data, split, split == "train" ? c.data.subset_per_class : c.data.test_subset_per_class);
  const EvalResult r = evaluate(net, data, ckpt.normalization);
  out << "images " << data.size() << "\ntop1_error " << fmt(r.top1_error) << "\nloss " << fmt(r.loss) << '\n';
  return kExitOk;
}

int cmd_trace(const ExperimentConfig& c, const std::string& checkpoint, const std::string& split,
              const std::string& out_path, std::ostream& out) {
  Checkpoint ckpt;
  Network net = load_network(checkpoint, &ckpt);
  const Dataset data = load_split(c.data, split, split == "train" ? c.data.subset_per_class : c.data.test_subset_per_class);
  const auto traces = extract_traces(net, data, ckpt.normalization);
  const TraceHeader header{ckpt.network.kind, ckpt.network.depth, static_cast<int>(net.awm_units().size())};
  write_traces(fs::path(out_path), header, traces);
  out << "wrote " << traces.size() << " traces of " << header.unit_count << " units to " << out_path << '\n';
  return kExitOk;
}

std::vector<double> fit_and_score(const Eigen::MatrixXd& train_x, const std::vector<int>& train_y,
                                  const Eigen::MatrixXd& test_x, const std::vector<int>& test_y, PipelineDims dims,
                                  std::ostream& out) {
  const LdaModel model = fit_pca_lda(train_x, train_y, dims.pca, dims.lda);
  if (model.pca.zero_variance_components > 0) {
    out << "warning: " << model.pca.zero_variance_components << " PCA components span zero-variance directions\n";
  }
  out << "pca_dim " << dims.pca << "\nlda_dim " << dims.lda << '\n';
  return cmc_curve(model, test_x, test_y);
}

int cmd_analyze_lda(const ExperimentConfig& c, const std::string& traces_path, const std::string& test_traces_path,
                    bool pixels, Eigen::Index dim, const std::string& out_path, std::ostream& out) {
  std::vector<double> curve;
  if (pixels) {
    const Dataset train = load_split(c.data, "train", c.data.subset_per_class);
    const Dataset test = load_split(c.data, "test", c.data.test_subset_per_class);
    const auto dims = pixel_pipeline_dims(train.size(), train.num_classes(), dim);
    curve = fit_and_score(pixel_matrix(train), train.labels, pixel_matrix(test), test.labels, dims, out);
  } else {
    if (traces_path.empty()) throw ConfigError("analyze-lda needs --traces or --pixels");
    std::vector<TraceRecord> train = read_traces(fs::path(traces_path));
    std::vector<TraceRecord> test;
    if (!test_traces_path.empty()) {
      test = read_traces(fs::path(test_traces_path));
    } else {
      // Deterministic holdout: every fifth record is a query.
      std::vector<TraceRecord> kept;
      for (std::size_t i = 0; i < train.size(); ++i) (i % 5 == 4 ? test : kept).push_back(train[i]);
      train = std::move(kept);
    }
    if (train.empty() || test.empty()) throw FormatError("analyze-lda: not enough trace records");
    std::map<int, int> classes;
    for (const auto& r : train) ++classes[r.label];
    const auto x = trace_matrix(train);
    const auto dims = trace_pipeline_dims(x.cols(), x.rows(), static_cast<int>(classes.size()), dim);
    curve = fit_and_score(x, trace_labels(train), trace_matrix(test), trace_labels(test), dims, out);
  }
  std::ofstream os(out_path);
  if (!os) throw FormatError("cannot write " + out_path);
  write_curve(os, curve);
  out << "rank1_accuracy " << fmt(curve.front()) << '\n';
  return kExitOk;
}

int cmd_count_params(const ExperimentConfig& c, std::ostream& out) {
  c.network.validate();
  const Network net = Network::build(c.network, c.seed);
  const ParameterCount n = net.count_parameters();
  out << "network " << to_string(c.network.kind) << '-' << c.network.depth << "\nbackbone " << n.backbone << "\nawm "
      << n.awm << "\ntotal " << n.total << '\n';
  return kExitOk;
}

int cmd_sweep_t(const ExperimentConfig& base, const std::vector<int>& values, const std::vector<std::uint64_t>& seeds,
                std::ostream& out) {
  base.validate();
  const ExperimentData data = load_experiment_data(base.data);
  fs::create_directories(base.output_dir);
  std::ofstream csv(fs::path(base.output_dir) / "sweep.csv");
  csv << "t,seed,final_test_error\n";
  std::vector<std::uint64_t> seed_list = seeds.empty() ? std::vector<std::uint64_t>{base.seed} : seeds;
  for (int t : values) {
    double sum = 0.0;
    for (std::uint64_t seed : seed_list) {
      ExperimentConfig c = base;
      c.train.t = t;
      c.seed = seed;
      c.train.seed = seed;
      c.output_dir = (fs::path(base.output_dir) / ("t" + std::to_string(t) + "-seed" + std::to_string(seed))).string();
      std::ostringstream log;
      const RunSummary s = run_experiment(c, data, log);
      csv << t << ',' << seed << ',' << fmt(s.final_test_error, 17) << '\n';
      csv.flush();
      sum += s.final_test_error;
    }
    out << "t " << t << " mean_final_test_error " << fmt(sum / static_cast<double>(seed_list.size())) << '\n';
  }
  return kExitOk;
}

int cmd_plot_data(const std::string& dir, const std::string& traces_path, std::ostream& out) {
  const fs::path root(dir);
  const fs::path history = root / "history.jsonl";
  if (!fs::exists(history)) throw FormatError("no history.jsonl in " + dir);
  {
    std::ofstream os(root / "plot_error.csv");
    os << "epoch,phase,lr,train_loss,train_error,test_error\n";
    for (const EpochRecord& r : read_history_file(history)) {
      os << r.epoch << ',' << to_string(r.phase) << ',' << fmt(r.lr, 17) << ',' << fmt(r.train_loss, 17) << ','
         << fmt(1.0 - r.train_acc, 17) << ',' << (r.test_err ? fmt(*r.test_err, 17) : "") << '\n';
    }
  }
  out << "wrote " << (root / "plot_error.csv").string() << '\n';
  const fs::path traces = traces_path.empty() ? root / "traces.csv" : fs::path(traces_path);
  if (fs::exists(traces)) {
    const auto records = read_traces(traces);
    std::ofstream os(root / "plot_lambda.csv");
    os << "label,unit,mean,variance\n";
    for (const auto& s : lambda_statistics(records)) {
      os << s.label << ',' << s.unit << ',' << fmt(s.mean, 17) << ',' << fmt(s.variance, 17) << '\n';
    }
    std::map<std::int64_t, double> sums;
    for (const auto& r : records) sums[r.image_id] = std::accumulate(r.lambda1.begin(), r.lambda1.end(), 0.0);
    std::ofstream sorted(root / "plot_sorted.csv");
    sorted << "rank,image_id,weight_sum\n";
    const auto ids = sort_by_weight_sum(records, SortOrder::ascending);
    for (std::size_t i = 0; i < ids.size(); ++i) sorted << i << ',' << ids[i] << ',' << fmt(sums[ids[i]], 17) << '\n';
    out << "wrote " << (root / "plot_lambda.csv").string() << " and " << (root / "plot_sorted.csv").string() << '\n';
  }
  return kExitOk;
}

}  // namespace

ExperimentData load_experiment_data(const DataConfig& config) {
  ExperimentData d;
  d.train = load_split(config, "train", config.subset_per_class);
  d.test = load_split(config, "test", config.test_subset_per_class);
  d.norm = compute_normalization(d.train);
  return d;
}

RunSummary run_experiment(const ExperimentConfig& config, const ExperimentData& data, std::ostream& log,
                          const fs::path& resume) {
  config.validate();
  const fs::path dir(config.output_dir);
  fs::create_directories(dir);
  save_experiment_config(dir / "config.txt", config);
  write_manifest(dir / "dataset.txt", data);

  Network net = Network::build(config.network, config.seed);
  Normalization norm = data.norm;
  Checkpoint ckpt;
  if (!resume.empty()) {
    ckpt = load_checkpoint(resume);
    if (!(ckpt.network == config.network)) throw ConfigError("resume: checkpoint network does not match the configuration");
    net = restore_network(ckpt);
    norm = ckpt.normalization;
  }
  Trainer trainer(net, data.train, &data.test, norm, config.train);

  RunSummary summary;
  const fs::path history_path = dir / "history.jsonl";
  if (!resume.empty()) {
    restore_trainer(trainer, ckpt);
    for (const EpochRecord& r : read_history_file(history_path))
      if (r.epoch < trainer.epoch()) summary.history.push_back(r);
  }
  {
    std::ofstream os(history_path, std::ios::trunc);
    for (const EpochRecord& r : summary.history) os << to_json_line(r) << '\n';
  }
  std::ofstream history(history_path, std::ios::app);
  summary.checkpoint = dir / "checkpoint.bin";

  TrainCallbacks callbacks;
  callbacks.on_epoch_end = [&](const EpochRecord& r) {
    history << to_json_line(r) << '\n';
    history.flush();
    summary.history.push_back(r);
    log << "epoch " << r.epoch << ' ' << to_string(r.phase) << " lr " << fmt(r.lr) << " loss " << fmt(r.train_loss)
        << " acc " << fmt(r.train_acc);
    if (r.test_err) log << " test_err " << fmt(*r.test_err);
    log << std::endl;
    if (trainer.epoch() % config.checkpoint_interval == 0 || trainer.epoch() == config.train.total_epochs) {
      Checkpoint c = capture_checkpoint(net, norm, &trainer);
      c.metadata["config"] = to_text(config);
      save_checkpoint(summary.checkpoint, c);
    }
  };
  trainer.train(callbacks);
  if (!summary.history.empty() && summary.history.back().test_err) {
    summary.final_test_error = *summary.history.back().test_err;
  } else {
    summary.final_test_error = evaluate(net, data.test, norm).top1_error;
  }
  return summary;
}

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Active weighted mapping networks on CIFAR: training, evaluation and weight-trace analysis", "awm"};
  app.require_subcommand(1);

  ConfigOptions train_opts, eval_opts, trace_opts, lda_opts, count_opts, sweep_opts, plot_opts;
  std::string resume, checkpoint, split = "test", out_path, traces, test_traces, history_dir;
  bool pixels = false;
  Eigen::Index dim = 30;
  std::vector<int> t_values;
  std::vector<std::uint64_t> seeds;

  auto* train = app.add_subcommand("train", "train a network, writing checkpoints and history");
  train_opts.add_common(train);
  train_opts.add(train, kNetworkFlags);
  train_opts.add(train, kDataFlags);
  train_opts.add(train, kTrainFlags);
  train->add_option("--resume", resume, "continue from a checkpoint")->check(CLI::ExistingFile);

  auto* eval = app.add_subcommand("eval", "print top-1 error of a checkpoint");
  eval_opts.add_common(eval);
  eval_opts.add(eval, kDataFlags);
  eval->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  eval->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}));

  auto* trace = app.add_subcommand("trace", "export per-image weight traces as CSV");
  trace_opts.add_common(trace);
  trace_opts.add(trace, kDataFlags);
  trace->add_option("--checkpoint", checkpoint, "checkpoint file")->required()->check(CLI::ExistingFile);
  trace->add_option("--split", split, "train | test")->check(CLI::IsMember({"train", "test"}));
  trace->add_option("--out", out_path, "output CSV")->required();

  auto* lda = app.add_subcommand("analyze-lda", "PCA+LDA class-mean classification, emits the rank-k curve");
  lda_opts.add_common(lda);
  lda_opts.add(lda, kDataFlags);
  lda->add_option("--traces", traces, "training traces CSV");
  lda->add_option("--test-traces", test_traces, "query traces CSV (default: every fifth training record)");
  lda->add_flag("--pixels", pixels, "run the raw-pixel baseline on the dataset instead");
  lda->add_option("--dim", dim, "final discriminant dimension (capped at classes - 1)")->check(CLI::PositiveNumber);
  lda->add_option("--out", out_path, "output curve CSV")->required();

  auto* count = app.add_subcommand("count-params", "print the backbone / awm / total parameter census");
  count_opts.add_common(count);
  count_opts.add(count, kNetworkFlags);

  auto* sweep = app.add_subcommand("sweep-t", "train once per alternation period and report final test error");
  sweep_opts.add_common(sweep);
  sweep_opts.add(sweep, kNetworkFlags);
  sweep_opts.add(sweep, kDataFlags);
  sweep_opts.add(sweep, kTrainFlags);
  sweep->add_option("--values", t_values, "alternation periods")->delimiter(',')->required();
  sweep->add_option("--seeds", seeds, "seeds to average over")->delimiter(',');

  auto* plot = app.add_subcommand("plot-data", "emit tidy CSVs from a run directory");
  plot_opts.add_common(plot);
  plot->add_option("--history", history_dir, "run directory holding history.jsonl")->required()->check(CLI::ExistingDirectory);
  plot->add_option("--traces", traces, "traces CSV (default: DIR/traces.csv)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    return app.exit(e, out, err) == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (train->parsed()) return cmd_train(train_opts.resolve(), resume, out);
    if (eval->parsed()) return cmd_eval(eval_opts.resolve(), checkpoint, split, out);
    if (trace->parsed()) return cmd_trace(trace_opts.resolve(), checkpoint, split, out_path, out);
    if (lda->parsed()) return cmd_analyze_lda(lda_opts.resolve(), traces, test_traces, pixels, dim, out_path, out);
    if (count->parsed()) return cmd_count_params(count_opts.resolve(), out);
    if (sweep->parsed()) return cmd_sweep_t(sweep_opts.resolve(), t_values, seeds, out);
    if (plot->parsed()) {
      plot_opts.resolve();
      return cmd_plot_data(history_dir, traces, out);
    }
  } catch (const NumericalError& e) {
    err << "error: " << e.what() << '\n';
    return kExitNumerical;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << '\n';
    return kExitUsage;
  } catch (const std::out_of_range& e) {
    err << "error: " << e.what() << '\n';
    return kExitData;
  }
  return kExitUsage;
}

}  // namespace awm
