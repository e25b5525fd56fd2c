#include "awm/trace_analytics.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

namespace awm {

std::vector<TraceRecord> extract_traces(Network& net, const Dataset& data, const Normalization& norm, int batch_size) {
  if (!has_awm(net.config().kind)) {
    throw std::invalid_argument(std::string("extract_traces: network kind ") + to_string(net.config().kind) +
                                " has no weighted mapping units");
  }
  if (batch_size < 1) throw std::invalid_argument("extract_traces: batch size must be positive");
  std::vector<TraceRecord> out;
  out.reserve(static_cast<std::size_t>(data.size()));
  ForwardOptions opts;
  opts.bn_mode = BatchNormMode::eval;
  opts.inference = true;
  for (Index start = 0; start < data.size(); start += batch_size) {
    const Index stop = std::min<Index>(data.size(), start + batch_size);
    std::vector<Index> rows(static_cast<std::size_t>(stop - start));
    std::iota(rows.begin(), rows.end(), start);
    Graph g;
    const ForwardResult res = net.forward(g, make_batch(data, rows, norm), opts);
    const Tensor m = res.trace_matrix();
    for (Index b = 0; b < m.dim(0); ++b) {
      const auto i = static_cast<std::size_t>(start + b);
      TraceRecord r{data.ids.empty() ? static_cast<std::int64_t>(i) : data.ids[i], data.labels[i], {}};
      r.lambda1.resize(static_cast<std::size_t>(m.dim(1)));
      for (Index u = 0; u < m.dim(1); ++u) r.lambda1[static_cast<std::size_t>(u)] = m(b, u);
      out.push_back(std::move(r));
    }
  }
  return out;
}

namespace {

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

template <typename T>
T parse_number(const std::string& text, std::size_t line_no) {
  T value{};
  const char* begin = text.data();
  const char* end = begin + text.size();
  const auto [ptr, ec] = std::from_chars(begin, end, value);
  if (ec != std::errc{} || ptr != end) {
    throw FormatError("traces: line " + std::to_string(line_no) + ": cannot parse '" + text + "'");
  }
  return value;
}

}  // namespace

void write_traces(std::ostream& os, const TraceHeader& header, std::span<const TraceRecord> traces) {
  os << to_string(header.kind) << ',' << header.depth << ',' << header.unit_count << '\n';
  os << "image_id,label";
  for (int u = 0; u < header.unit_count; ++u) os << ",unit" << u;
  os << '\n';
  for (const TraceRecord& r : traces) {
    if (static_cast<int>(r.lambda1.size()) != header.unit_count) {
      throw ShapeError("write_traces: record " + std::to_string(r.image_id) + " has " +
                       std::to_string(r.lambda1.size()) + " values, header says " + std::to_string(header.unit_count));
    }
    os << r.image_id << ',' << r.label;
    for (double v : r.lambda1) os << ',' << fmt_double(v);
    os << '\n';
  }
}

void write_traces(const std::filesystem::path& path, const TraceHeader& header, std::span<const TraceRecord> traces) {
  std::ofstream os(path);
  if (!os) throw FormatError("cannot write " + path.string());
  write_traces(os, header, traces);
}

std::vector<TraceRecord> read_traces(std::istream& is, TraceHeader* header) {
  std::string line;
  if (!std::getline(is, line)) throw FormatError("traces: missing header line");
  const auto head = split_csv(line);
  if (head.size() != 3) throw FormatError("traces: header must be 'kind,depth,unit_count'");
  TraceHeader h;
  try {
    h.kind = parse_network_kind(head[0]);
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("traces: ") + e.what());
  }
  h.depth = parse_number<int>(head[1], 1);
  h.unit_count = parse_number<int>(head[2], 1);
  if (h.unit_count < 1) throw FormatError("traces: unit count must be positive");
  if (!std::getline(is, line) || line.rfind("image_id,label", 0) != 0) {
    throw FormatError("traces: line 2 must be the column header");
  }
  std::vector<TraceRecord> out;
  std::size_t line_no = 2;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto cells = split_csv(line);
    if (cells.size() != static_cast<std::size_t>(h.unit_count) + 2) {
      throw FormatError("traces: line " + std::to_string(line_no) + " has " + std::to_string(cells.size()) +
                        " fields, expected " + std::to_string(h.unit_count + 2));
    }
    TraceRecord r;
    r.image_id = parse_number<std::int64_t>(cells[0], line_no);
    r.label = parse_number<int>(cells[1], line_no);
    for (std::size_t i = 2; i < cells.size(); ++i) r.lambda1.push_back(parse_number<double>(cells[i], line_no));
    out.push_back(std::move(r));
  }
  if (header) *header = h;
  return out;
}

std::vector<TraceRecord> read_traces(const std::filesystem::path& path, TraceHeader* header) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open traces " + path.string());
  return read_traces(is, header);
}

std::vector<std::int64_t> sort_by_weight_sum(std::span<const TraceRecord> traces, SortOrder order) {
  std::vector<double> sums;
  sums.reserve(traces.size());
  for (const auto& r : traces) sums.push_back(std::accumulate(r.lambda1.begin(), r.lambda1.end(), 0.0));
  std::vector<std::size_t> idx(traces.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (order == SortOrder::ascending) {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sums[a] < sums[b]; });
  } else {
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sums[a] > sums[b]; });
  }
  std::vector<std::int64_t> ids;
  ids.reserve(idx.size());
  for (auto i : idx) ids.push_back(traces[i].image_id);
  return ids;
}

std::vector<LambdaStatistic> lambda_statistics(std::span<const TraceRecord> traces) {
  std::map<int, std::vector<const TraceRecord*>> by_class;
  for (const auto& r : traces) by_class[r.label].push_back(&r);
  std::vector<LambdaStatistic> out;
  for (const auto& [label, rows] : by_class) {
    const std::size_t units = rows.front()->lambda1.size();
    for (std::size_t u = 0; u < units; ++u) {
      double mean = 0.0;
      for (const auto* r : rows) mean += r->lambda1.at(u);
      mean /= static_cast<double>(rows.size());
      double var = 0.0;
      for (const auto* r : rows) var += (r->lambda1[u] - mean) * (r->lambda1[u] - mean);
      var /= static_cast<double>(rows.size());
      out.push_back({label, static_cast<int>(u), mean, var});
    }
  }
  return out;
}

Eigen::VectorXd LdaModel::project(const Eigen::VectorXd& x) const {
  if (x.size() != input_dim()) {
    throw ShapeError("LdaModel: feature dimension " + std::to_string(x.size()) + ", expected " +
                     std::to_string(input_dim()));
  }
  return lda.basis.transpose() * (pca.basis.transpose() * (x - pca.mean));
}

LdaModel fit_pca_lda(const Eigen::MatrixXd& x, std::span<const int> labels, Eigen::Index pca_dim, Eigen::Index lda_dim) {
  LdaModel m;
  m.pca = fit_pca(x, pca_dim);
  const Eigen::MatrixXd reduced = m.pca.project(x);
  m.lda = fit_lda(reduced, labels, lda_dim);
  const Eigen::MatrixXd z = reduced * m.lda.basis;
  std::map<int, std::vector<Eigen::Index>> groups;
  for (Eigen::Index i = 0; i < x.rows(); ++i) groups[labels[static_cast<std::size_t>(i)]].push_back(i);
  m.class_means.resize(static_cast<Eigen::Index>(groups.size()), z.cols());
  Eigen::Index row = 0;
  for (const auto& [label, rows] : groups) {
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(z.cols());
    for (auto r : rows) mean += z.row(r).transpose();
    m.class_means.row(row++) = (mean / static_cast<double>(rows.size())).transpose();
    m.classes.push_back(label);
  }
  return m;
}

std::vector<RankedClass> classify_class_mean(const LdaModel& model, const Eigen::VectorXd& x) {
  const Eigen::VectorXd z = model.project(x);
  std::vector<RankedClass> out;
  out.reserve(model.classes.size());
  for (std::size_t c = 0; c < model.classes.size(); ++c) {
    out.push_back({model.classes[c], (model.class_means.row(static_cast<Eigen::Index>(c)).transpose() - z).norm()});
  }
  std::sort(out.begin(), out.end(), [](const RankedClass& a, const RankedClass& b) {
    return a.distance != b.distance ? a.distance < b.distance : a.label < b.label;
  });
  return out;
}

std::vector<double> cmc_curve(const LdaModel& model, const Eigen::MatrixXd& x, std::span<const int> labels) {
  if (static_cast<Eigen::Index>(labels.size()) != x.rows()) throw ShapeError("cmc_curve: label count mismatch");
  const std::size_t k = model.classes.size();
  std::vector<double> hits(k, 0.0);
  for (Eigen::Index i = 0; i < x.rows(); ++i) {
    const auto ranking = classify_class_mean(model, x.row(i).transpose());
    for (std::size_t r = 0; r < ranking.size(); ++r) {
      if (ranking[r].label == labels[static_cast<std::size_t>(i)]) {
        hits[r] += 1.0;
        break;
      }
    }
  }
  std::vector<double> curve(k, 0.0);
  double running = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    running += hits[r];
    curve[r] = x.rows() > 0 ? running / static_cast<double>(x.rows()) : 0.0;
  }
  return curve;
}

void write_curve(std::ostream& os, std::span<const double> curve) {
  os << "rank,accuracy\n";
  for (std::size_t k = 0; k < curve.size(); ++k) os << (k + 1) << ',' << fmt_double(curve[k]) << '\n';
}

Eigen::MatrixXd trace_matrix(std::span<const TraceRecord> traces) {
  if (traces.empty()) return {};
  const auto d = static_cast<Eigen::Index>(traces.front().lambda1.size());
  Eigen::MatrixXd m(static_cast<Eigen::Index>(traces.size()), d);
  for (std::size_t i = 0; i < traces.size(); ++i) {
    if (static_cast<Eigen::Index>(traces[i].lambda1.size()) != d) throw ShapeError("trace_matrix: ragged traces");
    for (Eigen::Index u = 0; u < d; ++u) m(static_cast<Eigen::Index>(i), u) = traces[i].lambda1[static_cast<std::size_t>(u)];
  }
  return m;
}

std::vector<int> trace_labels(std::span<const TraceRecord> traces) {
  std::vector<int> labels;
  labels.reserve(traces.size());
  for (const auto& r : traces) labels.push_back(r.label);
  return labels;
}

Eigen::MatrixXd pixel_matrix(const Dataset& data) {
  Eigen::MatrixXd m(data.size(), kImageBytes);
  for (Index i = 0; i < data.size(); ++i) {
    const Image& img = data.images[static_cast<std::size_t>(i)];
    for (Index j = 0; j < kImageBytes; ++j) m(i, j) = img[static_cast<std::size_t>(j)] / 255.0;
  }
  return m;
}

namespace {

PipelineDims cap(Eigen::Index pca, int classes, Eigen::Index requested) {
  const Eigen::Index lda = std::min({requested, static_cast<Eigen::Index>(classes - 1), pca});
  if (pca < 1 || lda < 1) throw std::invalid_argument("pipeline: not enough samples or classes for PCA+LDA");
  return {pca, lda};
}

}  // namespace

PipelineDims trace_pipeline_dims(Eigen::Index feature_dim, Eigen::Index samples, int classes, Eigen::Index requested) {
  return cap(std::min(feature_dim, samples - 1), classes, requested);
}

PipelineDims pixel_pipeline_dims(Eigen::Index samples, int classes, Eigen::Index requested) {
  return cap(std::min<Eigen::Index>(samples - 1, 200), classes, requested);
}

}  // namespace awm
