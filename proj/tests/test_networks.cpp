#include <doctest.h>

#include <cmath>
#include <random>

#include "awm/cifar.hpp"
#include "awm/networks.hpp"
#include "test_support.hpp"

using namespace awm;
using awm::testing::random_tensor;

namespace {

NetworkConfig resnet(NetworkKind kind, int depth) {
  NetworkConfig c;
  c.kind = kind;
  c.depth = depth;
  return c;
}

// Closed-form AWM overhead of a CIFAR ResNet: per unit e*2C + e + 2e + 2 over widths 16/32/64.
Index awm_overhead_oracle(int depth, Index e) {
  const Index per_stage = (depth - 2) / 6;
  Index total = 0;
  for (Index c : {16, 32, 64}) total += per_stage * (e * 2 * c + e + 2 * e + 2);
  return total;
}

}  // namespace

TEST_CASE("mapping unit counts reproduce the depth table") {
  const int depths[] = {14, 20, 32, 44, 56, 110};
  const int units[] = {6, 9, 15, 21, 27, 54};
  for (int i = 0; i < 6; ++i) {
    CHECK(mapping_unit_count(depths[i]) == units[i]);
    const Network net = Network::build(resnet(NetworkKind::resnet_awm, depths[i]), 1);
    CHECK(static_cast<int>(net.awm_units().size()) == units[i]);
  }
  CHECK(mapping_unit_count(26) == 12);
  CHECK(Network::build(resnet(NetworkKind::resnet_awm, 26), 1).awm_units().size() == 12);
  CHECK(mapping_unit_count(8) == 3);
  CHECK(Network::build(resnet(NetworkKind::resnet_awm, 8), 1).awm_units().size() == 3);
  CHECK(Network::build(resnet(NetworkKind::resnet_plain, 20), 1).awm_units().empty());
}

TEST_CASE("invalid depths are rejected with the divisibility rule") {
  try {
    mapping_unit_count(21);
    FAIL("depth 21 accepted");
  } catch (const std::invalid_argument& e) {
    CHECK(std::string(e.what()).find("% 6") != std::string::npos);
  }
  CHECK_THROWS_AS(Network::build(resnet(NetworkKind::resnet_awm, 22), 1), std::invalid_argument);
  NetworkConfig d;
  d.kind = NetworkKind::densenet_awm;
  d.depth = 23;
  CHECK_THROWS_AS(Network::build(d, 1), std::invalid_argument);
}

TEST_CASE("parameter census matches the reported model sizes") {
  const auto plain = Network::build(resnet(NetworkKind::resnet_plain, 110), 1).count_parameters();
  const auto awm = Network::build(resnet(NetworkKind::resnet_awm, 110), 1).count_parameters();
  CHECK(std::abs(static_cast<double>(plain.total) / 1.70e6 - 1.0) < 0.03);
  CHECK(std::abs(static_cast<double>(awm.total) / 1.78e6 - 1.0) < 0.03);
  CHECK(awm.awm == awm_overhead_oracle(110, 16));
  CHECK(awm.awm == 67212);
  CHECK(awm.backbone == plain.total);
  CHECK(awm.total == awm.backbone + awm.awm);
  for (int depth : {14, 20, 56}) {
    const auto a = Network::build(resnet(NetworkKind::resnet_awm, depth), 3).count_parameters();
    const auto p = Network::build(resnet(NetworkKind::resnet_plain, depth), 3).count_parameters();
    CHECK(a.awm == awm_overhead_oracle(depth, 16));
    CHECK(a.backbone == p.total);
  }
  NetworkConfig padded = resnet(NetworkKind::resnet_plain, 110);
  padded.shortcut = ShortcutKind::padded_identity;
  CHECK(Network::build(padded, 1).count_parameters().total < plain.total);
}

TEST_CASE("construction is deterministic under a seed") {
  Network a = Network::build(resnet(NetworkKind::resnet_awm, 8), 42);
  Network b = Network::build(resnet(NetworkKind::resnet_awm, 8), 42);
  Network c = Network::build(resnet(NetworkKind::resnet_awm, 8), 43);
  auto sa = a.state(), sb = b.state(), sc = c.state();
  REQUIRE(sa.size() == sb.size());
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < sa.size(); ++i) {
    all_equal &= *sa[i].tensor == *sb[i].tensor;
    any_diff |= !(*sa[i].tensor == *sc[i].tensor);
  }
  CHECK(all_equal);
  CHECK(any_diff);
}

TEST_CASE("fixed_equal blocks output half the identity-mapping sum") {
  std::mt19937_64 rng(5);
  const Tensor input = random_tensor({2, 3, 32, 32}, rng);
  for (ShortcutKind shortcut : {ShortcutKind::projection, ShortcutKind::padded_identity}) {
    NetworkConfig ca = resnet(NetworkKind::resnet_awm, 14), cp = resnet(NetworkKind::resnet_plain, 14);
    ca.shortcut = cp.shortcut = shortcut;
    Network awm = Network::build(ca, 9);
    Network plain = Network::build(cp, 9);
    awm.set_awm_mode(AwmMode::fixed_equal);

    std::vector<MergeProbe> awm_probes, plain_probes;
    ForwardOptions oa, op;
    oa.probes = &awm_probes;
    op.probes = &plain_probes;
    op.plain_merge_scale = 0.5;
    Graph ga, gp;
    const ForwardResult ra = awm.forward(ga, input, oa);
    const ForwardResult rp = plain.forward(gp, input, op);

    REQUIRE(awm_probes.size() == 6);
    double worst_block = 0.0, worst_oracle = 0.0;
    for (std::size_t k = 0; k < awm_probes.size(); ++k) {
      const MergeProbe& p = awm_probes[k];
      for (Index i = 0; i < p.merged.size(); ++i) {
        worst_block = std::max(worst_block, std::abs(p.merged[i] - 0.5 * (p.branch[i] + p.shortcut[i])));
        worst_oracle = std::max(worst_oracle, std::abs(p.merged[i] - plain_probes[k].merged[i]));
      }
    }
    CHECK(worst_block <= 1e-15);
    CHECK(worst_oracle <= 1e-15);
    CHECK((ra.logits.value().flat() - rp.logits.value().flat()).cwiseAbs().maxCoeff() <= 1e-15);
    const Tensor traces = ra.trace_matrix();
    for (double v : traces.values()) CHECK(v == 0.5);
  }
}

TEST_CASE("permuting the batch permutes logits and traces") {
  std::mt19937_64 rng(6);
  Network net = Network::build(resnet(NetworkKind::resnet_awm, 8), 2);
  const Tensor input = random_tensor({4, 3, 32, 32}, rng);
  const std::vector<Index> perm{2, 0, 3, 1};
  Tensor permuted(input.shape());
  for (Index b = 0; b < 4; ++b)
    for (Index k = 0; k < kImageBytes; ++k) permuted.data()[b * kImageBytes + k] = input.data()[perm[static_cast<std::size_t>(b)] * kImageBytes + k];
  ForwardOptions opts;
  opts.bn_mode = BatchNormMode::eval;
  opts.inference = true;
  Graph g1, g2;
  const ForwardResult r1 = net.forward(g1, input, opts);
  const ForwardResult r2 = net.forward(g2, permuted, opts);
  const Tensor t1 = r1.trace_matrix(), t2 = r2.trace_matrix();
  for (Index b = 0; b < 4; ++b) {
    const Index src = perm[static_cast<std::size_t>(b)];
    for (Index k = 0; k < 10; ++k) CHECK(std::abs(r2.logits.value()(b, k) - r1.logits.value()(src, k)) < 1e-12);
    for (Index u = 0; u < t1.dim(1); ++u) CHECK(std::abs(t2(b, u) - t1(src, u)) < 1e-12);
  }
}

TEST_CASE("forward validates the input shape and yields finite logits") {
  Network net = Network::build(resnet(NetworkKind::resnet_awm, 8), 2);
  Graph g;
  CHECK_THROWS_AS(net.forward(g, Tensor({1, 3, 16, 16})), ShapeError);
  CHECK_THROWS_AS(net.forward(g, Tensor({1, 1, 32, 32})), ShapeError);
  std::mt19937_64 rng(1);
  const ForwardResult r = net.forward(g, random_tensor({2, 3, 32, 32}, rng));
  CHECK(r.logits.value().shape() == Shape{2, 10});
  CHECK(r.logits.value().all_finite());
  CHECK(r.lambdas.size() == 3);
  CHECK(r.gates.size() == 3);
}

TEST_CASE("weighted DenseNet conserves channels and normalizes every layer") {
  NetworkConfig ca, cp;
  ca.kind = NetworkKind::densenet_awm;
  cp.kind = NetworkKind::densenet_plain;
  ca.depth = cp.depth = 22;
  CHECK(dense_layers_per_block(22) == 3);
  Network awm = Network::build(ca, 4);
  Network plain = Network::build(cp, 4);
  CHECK(awm.awm_units().size() == 9);
  CHECK(plain.awm_units().empty());
  CHECK(awm.count_parameters().backbone == plain.count_parameters().total);
  // Bundle counts grow by one per layer within a block: 2, 3, 4.
  CHECK(awm.awm_units()[0]->path_count() == 2);
  CHECK(awm.awm_units()[2]->path_count() == 4);

  std::mt19937_64 rng(3);
  const Tensor input = random_tensor({2, 3, 32, 32}, rng);
  std::vector<MergeProbe> pa, pp;
  ForwardOptions oa, op;
  oa.probes = &pa;
  op.probes = &pp;
  Graph ga, gp;
  const ForwardResult ra = awm.forward(ga, input, oa);
  plain.forward(gp, input, op);
  REQUIRE(pa.size() == pp.size());
  for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i].merged.shape() == pp[i].merged.shape());
  REQUIRE(ra.lambdas.size() == 9);
  for (const Tensor& lambda : ra.lambdas)
    for (Index b = 0; b < lambda.dim(0); ++b) CHECK(std::abs(lambda.matrix().row(b).sum() - 1.0) <= 1e-9);
  CHECK(ra.logits.value().all_finite());
}
