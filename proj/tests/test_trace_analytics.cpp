#include <doctest.h>

#include <numeric>
#include <random>
#include <sstream>

#include "analytics_oracles.hpp"
#include "awm/trace_analytics.hpp"
#include "test_support.hpp"

using namespace awm;
using namespace awm::testing;

namespace {

std::vector<TraceRecord> random_traces(int count, int units, int classes, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> dist(0.05, 0.95);
  std::vector<TraceRecord> out;
  for (int i = 0; i < count; ++i) {
    TraceRecord r{1000 + i, i % classes, {}};
    for (int u = 0; u < units; ++u) r.lambda1.push_back(dist(rng));
    out.push_back(std::move(r));
  }
  return out;
}

/// Gaussian clusters around well-separated class centres.
Eigen::MatrixXd clustered(int classes, int per_class, int dim, double spread, std::vector<int>& labels, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, spread);
  Eigen::MatrixXd x(classes * per_class, dim);
  labels.clear();
  for (int i = 0; i < x.rows(); ++i) {
    const int c = i % classes;
    labels.push_back(c);
    for (int j = 0; j < dim; ++j) x(i, j) = (j % classes == c ? 4.0 : 0.0) + noise(rng);
  }
  return x;
}

}  // namespace

TEST_CASE("eigensolver, PCA and LDA match brute-force oracles") {
  const LinalgOracleReport r = run_linalg_oracles(40, 17);
  CHECK(r.instances == 40);
  CHECK(r.eigen < 1e-8);
  CHECK(r.pca < 1e-6);
  CHECK(r.lda < 1e-6);
}

TEST_CASE("jacobi handles degenerate and diagonal input") {
  const auto diag = jacobi_eigen(Eigen::Vector3d(1.0, 3.0, 2.0).asDiagonal().toDenseMatrix());
  CHECK(diag.values(0) == 3.0);
  CHECK(diag.values(2) == 1.0);
  const auto ident = jacobi_eigen(Eigen::MatrixXd::Identity(4, 4));
  CHECK((ident.vectors.transpose() * ident.vectors - Eigen::MatrixXd::Identity(4, 4)).norm() < 1e-12);
  CHECK_THROWS_AS(jacobi_eigen(Eigen::MatrixXd(2, 3)), std::invalid_argument);
  // Above the Jacobi limit the Householder path is used; both must agree on the spectrum.
  std::mt19937_64 rng(3);
  const Eigen::MatrixXd r = random_matrix(kJacobiLimit + 5, kJacobiLimit + 5, rng);
  const auto big = symmetric_eigen(Eigen::MatrixXd(r + r.transpose()));
  CHECK(big.values(0) >= big.values(1));
  CHECK(std::abs(big.values.sum() - 2.0 * r.trace()) < 1e-6 * big.values.cwiseAbs().maxCoeff());
}

TEST_CASE("PCA properties") {
  std::mt19937_64 rng(4);
  SUBCASE("points on a line") {
    Eigen::MatrixXd x(30, 3);
    const Eigen::Vector3d dir = Eigen::Vector3d(1, 2, -2).normalized();
    std::normal_distribution<double> t(0, 3);
    for (int i = 0; i < 30; ++i) x.row(i) = (Eigen::Vector3d(1, 1, 1) + t(rng) * dir).transpose();
    const auto m = fit_pca<double>(x, 1);
    CHECK(std::abs(std::abs(m.basis.col(0).dot(dir)) - 1.0) < 1e-12);
    const Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
    const Eigen::MatrixXd residual = centered - m.project(x) * m.basis.transpose();
    CHECK(residual.squaredNorm() / 29 < 1e-10);
  }
  SUBCASE("orthonormal basis and sign convention") {
    const Eigen::MatrixXd x = random_matrix(60, 8, rng);
    const auto m = fit_pca<double>(x, 8);
    CHECK((m.basis.transpose() * m.basis - Eigen::MatrixXd::Identity(8, 8)).norm() < 1e-8);
    for (Eigen::Index j = 0; j < 8; ++j) {
      Eigen::Index idx = 0;
      m.basis.col(j).cwiseAbs().maxCoeff(&idx);
      CHECK(m.basis(idx, j) > 0);
    }
    // A full basis preserves pairwise distances.
    const Eigen::MatrixXd z = m.project(x);
    for (int i = 1; i < 10; ++i) CHECK(std::abs((z.row(i) - z.row(0)).norm() - (x.row(i) - x.row(0)).norm()) < 1e-8);
  }
  SUBCASE("gram path with more components than the data rank") {
    const Eigen::MatrixXd x = random_matrix(5, 12, rng);
    const auto m = fit_pca<double>(x, 4);
    CHECK(m.zero_variance_components == 0);
    CHECK((m.basis.transpose() * m.basis - Eigen::MatrixXd::Identity(4, 4)).norm() < 1e-8);
    // Rank-2 data asked for 3 components gets one zero-variance direction.
    const Eigen::MatrixXd low = random_matrix(6, 2, rng) * random_matrix(2, 10, rng);
    const auto ml = fit_pca<double>(low, 3);
    CHECK(ml.zero_variance_components == 1);
    CHECK((ml.basis.transpose() * ml.basis - Eigen::MatrixXd::Identity(3, 3)).norm() < 1e-8);
  }
  SUBCASE("invalid targets") {
    CHECK_THROWS_AS(fit_pca<double>(random_matrix(4, 3, rng), 4), std::invalid_argument);
    CHECK_THROWS_AS(fit_pca<double>(random_matrix(4, 3, rng), 0), std::invalid_argument);
  }
}

TEST_CASE("LDA separates clouds and ignores shuffled labels") {
  std::mt19937_64 rng(8);
  std::normal_distribution<double> noise(0.0, 1.0);
  Eigen::MatrixXd x(80, 2);
  std::vector<int> labels;
  for (int i = 0; i < 80; ++i) {
    labels.push_back(i % 2);
    x(i, 0) = noise(rng) + (i % 2) * 10.0;
    x(i, 1) = noise(rng) + (i % 2) * 4.0;
  }
  const auto lda = fit_lda<double>(x, labels, 1);
  const Eigen::VectorXd z = x * lda.basis.col(0);
  double m0 = 0, m1 = 0, s = 0;
  for (int i = 0; i < 80; ++i) (i % 2 ? m1 : m0) += z(i) / 40;
  for (int i = 0; i < 80; ++i) s += std::pow(z(i) - (i % 2 ? m1 : m0), 2);
  CHECK(std::abs(m1 - m0) > 5 * std::sqrt(s / 78));

  // Shuffled labels: the Fisher ratio collapses to the order of the chance baseline.
  std::vector<int> shuffled = labels;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const auto null_lda = fit_lda<double>(x, shuffled, 1);
  CHECK(null_lda.eigenvalues(0) < 0.2);
  CHECK(lda.eigenvalues(0) > 10.0);

  CHECK_THROWS_AS(fit_lda<double>(x, std::vector<int>(80, 0), 1), std::invalid_argument);
  std::vector<int> lonely = labels;
  lonely[0] = 7;
  CHECK_THROWS_AS(fit_lda<double>(x, lonely, 1), std::invalid_argument);
  CHECK_THROWS_AS(fit_lda<double>(x, labels, 2), std::invalid_argument);
}

TEST_CASE("class-mean ranking is invariant to an invertible input transform") {
  std::mt19937_64 rng(9);
  std::vector<int> labels;
  const Eigen::MatrixXd x = clustered(4, 12, 6, 1.5, labels, rng);
  const Eigen::MatrixXd a = random_matrix(6, 6, rng) + 3.0 * Eigen::MatrixXd::Identity(6, 6);
  const Eigen::MatrixXd xt = x * a.transpose();
  const LdaModel m1 = fit_pca_lda(x, labels, 6, 3), m2 = fit_pca_lda(xt, labels, 6, 3);
  for (int i = 0; i < 10; ++i) {
    const auto r1 = classify_class_mean(m1, x.row(i).transpose());
    const auto r2 = classify_class_mean(m2, xt.row(i).transpose());
    CHECK(r1.front().label == r2.front().label);
  }
}

TEST_CASE("class-mean classification") {
  std::mt19937_64 rng(10);
  std::vector<int> labels;
  const Eigen::MatrixXd x = clustered(5, 10, 7, 0.8, labels, rng);
  const LdaModel model = fit_pca_lda(x, labels, 7, 4);
  CHECK(model.classes == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(model.output_dim() == 4);
  CHECK((model.pca.basis.transpose() * model.pca.basis - Eigen::MatrixXd::Identity(7, 7)).norm() < 1e-8);

  SUBCASE("exhaustive oracle on random queries") {
    for (int q = 0; q < 20; ++q) {
      const Eigen::VectorXd query = 3.0 * random_matrix(7, 1, rng);
      const auto ranking = classify_class_mean(model, query);
      const Eigen::VectorXd z = model.lda.basis.transpose() * (model.pca.basis.transpose() * (query - model.pca.mean));
      std::vector<std::pair<double, int>> oracle;
      for (int c = 0; c < 5; ++c) oracle.emplace_back((model.class_means.row(c).transpose() - z).norm(), c);
      std::sort(oracle.begin(), oracle.end());
      REQUIRE(ranking.size() == 5);
      for (int c = 0; c < 5; ++c) CHECK(ranking[static_cast<std::size_t>(c)].label == oracle[static_cast<std::size_t>(c)].second);
    }
  }
  SUBCASE("query at a class mean ranks it first at distance zero") {
    LdaModel m = model;
    m.pca.mean.setZero();
    m.pca.basis = Eigen::MatrixXd::Identity(7, 7);
    m.lda.basis = Eigen::MatrixXd::Identity(7, 4);
    Eigen::VectorXd q = Eigen::VectorXd::Zero(7);
    q.head(4) = m.class_means.row(2).transpose();
    const auto ranking = classify_class_mean(m, q);
    CHECK(ranking.front().label == 2);
    CHECK(ranking.front().distance == 0.0);
  }
  SUBCASE("ties go to the lower class id") {
    LdaModel m;
    m.pca.mean = Eigen::VectorXd::Zero(1);
    m.pca.basis = Eigen::MatrixXd::Identity(1, 1);
    m.lda.basis = Eigen::MatrixXd::Identity(1, 1);
    m.class_means = Eigen::MatrixXd(2, 1);
    m.class_means << 1.0, -1.0;
    m.classes = {7, 3};
    const auto ranking = classify_class_mean(m, Eigen::VectorXd::Zero(1));
    CHECK(ranking[0].label == 3);
    CHECK(ranking[1].label == 7);
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(classify_class_mean(model, Eigen::VectorXd::Zero(6)), ShapeError);
  }
}

TEST_CASE("CMC curves") {
  std::mt19937_64 rng(11);
  std::vector<int> labels;
  SUBCASE("separable data is perfect at rank 1") {
    const Eigen::MatrixXd x = clustered(4, 10, 5, 0.1, labels, rng);
    const LdaModel model = fit_pca_lda(x, labels, 5, 3);
    const auto curve = cmc_curve(model, x, labels);
    REQUIRE(curve.size() == 4);
    CHECK(curve.front() == 1.0);
  }
  SUBCASE("noise features sit near the chance line") {
    const int classes = 10;
    const Eigen::MatrixXd train = random_matrix(400, 12, rng), test = random_matrix(2000, 12, rng);
    std::vector<int> train_labels, test_labels;
    for (int i = 0; i < 400; ++i) train_labels.push_back(i % classes);
    for (int i = 0; i < 2000; ++i) test_labels.push_back(i % classes);
    const LdaModel model = fit_pca_lda(train, train_labels, 12, 9);
    const auto curve = cmc_curve(model, test, test_labels);
    REQUIRE(curve.size() == 10);
    for (std::size_t k = 1; k < curve.size(); ++k) CHECK(curve[k] >= curve[k - 1]);
    CHECK(curve.back() == 1.0);
    for (std::size_t k = 0; k < curve.size(); ++k) CHECK(std::abs(curve[k] - (k + 1) / 10.0) < 0.05);
  }
  std::ostringstream os;
  const std::vector<double> curve{0.5, 1.0};
  write_curve(os, curve);
  CHECK(os.str() == "rank,accuracy\n1,0.5\n2,1\n");
}

TEST_CASE("sorting by summed weight") {
  std::mt19937_64 rng(12);
  std::vector<TraceRecord> two{{1, 0, std::vector<double>(54, 0.6)}, {2, 0, std::vector<double>(54, 0.4)}};
  CHECK(sort_by_weight_sum(two, SortOrder::ascending) == std::vector<std::int64_t>{2, 1});
  CHECK(sort_by_weight_sum(two, SortOrder::descending) == std::vector<std::int64_t>{1, 2});

  std::vector<TraceRecord> same;
  for (int i = 0; i < 6; ++i) same.push_back({10 - i, 0, {0.25, 0.5}});
  CHECK(sort_by_weight_sum(same, SortOrder::ascending) == std::vector<std::int64_t>{10, 9, 8, 7, 6, 5});
  CHECK(sort_by_weight_sum(same, SortOrder::descending) == std::vector<std::int64_t>{10, 9, 8, 7, 6, 5});

  const auto traces = random_traces(20, 9, 3, rng);
  std::vector<std::pair<double, std::int64_t>> oracle;
  for (const auto& r : traces) {
    double s = 0;
    for (double v : r.lambda1) s += v;
    oracle.emplace_back(s, r.image_id);
  }
  std::sort(oracle.begin(), oracle.end());
  const auto ids = sort_by_weight_sum(traces, SortOrder::ascending);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == oracle[i].second);
}

TEST_CASE("per-class lambda statistics") {
  std::vector<TraceRecord> t{{0, 1, {0.2, 0.4}}, {1, 1, {0.4, 0.4}}, {2, 0, {0.9, 0.1}}};
  const auto stats = lambda_statistics(t);
  REQUIRE(stats.size() == 4);
  CHECK(stats[0].label == 0);
  CHECK(stats[0].variance == 0.0);
  CHECK(stats[2].label == 1);
  CHECK(stats[2].unit == 0);
  CHECK(stats[2].mean == doctest::Approx(0.3));
  CHECK(stats[2].variance == doctest::Approx(0.01));
  CHECK(stats[3].variance == 0.0);
}

TEST_CASE("trace files round-trip bit-exactly and report bad lines") {
  std::mt19937_64 rng(13);
  auto traces = random_traces(7, 5, 3, rng);
  traces[3].lambda1[2] = 0.1 + 0.2;  // not representable in short decimal
  const TraceHeader header{NetworkKind::resnet_awm, 12, 5};
  std::stringstream ss;
  write_traces(ss, header, traces);
  TraceHeader back;
  const auto read = read_traces(ss, &back);
  CHECK(back.kind == header.kind);
  CHECK(back.depth == 12);
  CHECK(back.unit_count == 5);
  REQUIRE(read.size() == traces.size());
  for (std::size_t i = 0; i < read.size(); ++i) {
    CHECK(read[i].image_id == traces[i].image_id);
    CHECK(read[i].label == traces[i].label);
    CHECK(read[i].lambda1 == traces[i].lambda1);
  }

  std::istringstream bad("resnet_awm,8,2\nimage_id,label,unit0,unit1\n0,1,0.5,0.5\n1,2,0.5,x\n");
  try {
    read_traces(bad);
    FAIL("bad line accepted");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
  std::istringstream short_row("resnet_awm,8,2\nimage_id,label,unit0,unit1\n0,1,0.5\n");
  CHECK_THROWS_AS(read_traces(short_row), FormatError);
  std::ostringstream sink;
  CHECK_THROWS_AS(write_traces(sink, TraceHeader{NetworkKind::resnet_awm, 8, 4}, traces), ShapeError);
}

TEST_CASE("trace extraction from networks") {
  const Dataset data = synthetic_dataset(1, 10, 14);
  const Normalization norm = compute_normalization(data);
  NetworkConfig c;
  c.depth = 8;
  Network net = Network::build(c, 5);

  SUBCASE("one record per image with the unit count as length") {
    const auto traces = extract_traces(net, data, norm, 3);
    REQUIRE(traces.size() == 10);
    for (std::size_t i = 0; i < traces.size(); ++i) {
      CHECK(traces[i].lambda1.size() == 3);
      CHECK(traces[i].label == data.labels[i]);
      CHECK(traces[i].image_id == data.ids[i]);
      for (double v : traces[i].lambda1) CHECK((v > 0.0 && v < 1.0));
    }
    // Batch composition does not change per-image traces in eval mode.
    const auto again = extract_traces(net, data, norm, 10);
    for (std::size_t i = 0; i < traces.size(); ++i)
      for (std::size_t u = 0; u < 3; ++u) CHECK(std::abs(again[i].lambda1[u] - traces[i].lambda1[u]) < 1e-12);
  }
  SUBCASE("duplicate images give identical traces") {
    Dataset dup = data;
    dup.images[5] = dup.images[0];
    const auto traces = extract_traces(net, dup, norm, 10);
    CHECK(traces[5].lambda1 == traces[0].lambda1);
  }
  SUBCASE("fixed_equal networks trace the constant half") {
    net.set_awm_mode(AwmMode::fixed_equal);
    for (const auto& r : extract_traces(net, data, norm))
      for (double v : r.lambda1) CHECK(v == 0.5);
  }
  SUBCASE("plain networks are rejected") {
    c.kind = NetworkKind::resnet_plain;
    Network plain = Network::build(c, 5);
    CHECK_THROWS_AS(extract_traces(plain, data, norm), std::invalid_argument);
  }
}

TEST_CASE("pipeline dimensions and pixel features") {
  CHECK(trace_pipeline_dims(54, 50000, 100, 30).pca == 54);
  CHECK(trace_pipeline_dims(54, 50000, 100, 30).lda == 30);
  CHECK(trace_pipeline_dims(9, 400, 10, 30).lda == 9);
  CHECK(trace_pipeline_dims(54, 20, 10, 30).pca == 19);
  CHECK(pixel_pipeline_dims(50000, 100, 30).pca == 200);
  CHECK(pixel_pipeline_dims(120, 10, 30).pca == 119);
  CHECK(pixel_pipeline_dims(120, 10, 30).lda == 9);
  CHECK_THROWS_AS(pixel_pipeline_dims(1, 10, 30), std::invalid_argument);

  const Dataset data = synthetic_dataset(1, 10, 15);
  const Eigen::MatrixXd px = pixel_matrix(data);
  CHECK(px.rows() == 10);
  CHECK(px.cols() == 3072);
  CHECK(px(3, 100) == data.images[3][100] / 255.0);
  CHECK(px.maxCoeff() <= 1.0);
}
