#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "awm/cifar.hpp"
#include "awm/linalg.hpp"
#include "awm/networks.hpp"

namespace awm {

/// First-path weights of every mapping unit for one image.
struct TraceRecord {
  std::int64_t image_id = 0;
  int label = 0;
  std::vector<double> lambda1;
};

struct TraceHeader {
  NetworkKind kind = NetworkKind::resnet_awm;
  int depth = 0;
  int unit_count = 0;
};

/// One record per image in dataset order, eval-mode batch norm, no augmentation.
std::vector<TraceRecord> extract_traces(Network& net, const Dataset& data, const Normalization& norm,
                                        int batch_size = 100);

void write_traces(std::ostream& os, const TraceHeader& header, std::span<const TraceRecord> traces);
void write_traces(const std::filesystem::path& path, const TraceHeader& header, std::span<const TraceRecord> traces);
std::vector<TraceRecord> read_traces(std::istream& is, TraceHeader* header = nullptr);
std::vector<TraceRecord> read_traces(const std::filesystem::path& path, TraceHeader* header = nullptr);

enum class SortOrder { ascending, descending };

/// Image ids ordered by the sum of lambda_1 over all units; stable for equal sums.
std::vector<std::int64_t> sort_by_weight_sum(std::span<const TraceRecord> traces, SortOrder order);

/// Per class and unit, mean and (population) variance of lambda_1.
struct LambdaStatistic {
  int label;
  int unit;
  double mean;
  double variance;
};
std::vector<LambdaStatistic> lambda_statistics(std::span<const TraceRecord> traces);

/// PCA followed by LDA with class means in the reduced space.
struct LdaModel {
  PcaModel<double> pca;
  LdaProjection<double> lda;
  Eigen::MatrixXd class_means;  // classes x d
  std::vector<int> classes;     // ascending

  Eigen::Index input_dim() const { return pca.mean.size(); }
  Eigen::Index output_dim() const { return lda.basis.cols(); }
  Eigen::VectorXd project(const Eigen::VectorXd& x) const;
};

/// Fits PCA to p components then LDA to d dimensions on the rows of x.
LdaModel fit_pca_lda(const Eigen::MatrixXd& x, std::span<const int> labels, Eigen::Index pca_dim, Eigen::Index lda_dim);

struct RankedClass {
  int label;
  double distance;
};

/// Classes by ascending Euclidean distance to their mean; ties broken by lower class id.
std::vector<RankedClass> classify_class_mean(const LdaModel& model, const Eigen::VectorXd& x);

/// Rank-k accuracy for k = 1..classes (cumulative match characteristic).
std::vector<double> cmc_curve(const LdaModel& model, const Eigen::MatrixXd& x, std::span<const int> labels);

void write_curve(std::ostream& os, std::span<const double> curve);

Eigen::MatrixXd trace_matrix(std::span<const TraceRecord> traces);
std::vector<int> trace_labels(std::span<const TraceRecord> traces);
/// Raw pixels scaled to [0, 1], one 3072-wide row per image.
Eigen::MatrixXd pixel_matrix(const Dataset& data);

/// Target dimensions used by both the trace and pixel pipelines.
struct PipelineDims {
  Eigen::Index pca;
  Eigen::Index lda;
};
/// Traces keep every component; pixels keep min(n - 1, 200). LDA is capped at classes - 1.
PipelineDims trace_pipeline_dims(Eigen::Index feature_dim, Eigen::Index samples, int classes, Eigen::Index requested);
PipelineDims pixel_pipeline_dims(Eigen::Index samples, int classes, Eigen::Index requested);

}  // namespace awm
