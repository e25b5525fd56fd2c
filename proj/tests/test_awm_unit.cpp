#include <doctest.h>

#include <cmath>
#include <random>

#include "awm/awm_unit.hpp"
#include "awm/kernels.hpp"
#include "test_support.hpp"

using namespace awm;
using awm::testing::random_tensor;

namespace {

void zero_parameters(AwmUnit& unit) {
  for (Parameter* p : unit.parameters()) p->value.fill(0.0);
}

}  // namespace

TEST_CASE("embed_paths pools each path and concatenates in order") {
  Graph g;
  const Var a = g.constant(Tensor({1, 2, 3, 3}, 1.5));
  const Var b = g.constant(Tensor({1, 2, 3, 3}, -4.0));
  const Var both[] = {a, b};
  const Tensor z = embed_paths(both).value();
  CHECK(z == Tensor({1, 4}, std::vector<double>{1.5, 1.5, -4.0, -4.0}));

  std::mt19937_64 rng(1);
  const Tensor x = random_tensor({2, 3, 4, 5}, rng), y = random_tensor({2, 2, 4, 5}, rng);
  const Var xy[] = {g.constant(x), g.constant(y)};
  const Tensor e = embed_paths(xy).value();
  const Tensor px = global_avg_pool(x), py = global_avg_pool(y);
  for (Index i = 0; i < 2; ++i) {
    for (Index c = 0; c < 3; ++c) CHECK(e(i, c) == px(i, c));
    for (Index c = 0; c < 2; ++c) CHECK(e(i, 3 + c) == py(i, c));
  }

  const Tensor pixel = random_tensor({2, 3, 1, 1}, rng);
  const Var single[] = {g.constant(pixel), g.constant(pixel)};
  const Tensor s = embed_paths(single).value();
  for (Index i = 0; i < 2; ++i)
    for (Index c = 0; c < 3; ++c) CHECK(s(i, c) == pixel(i, c, 0, 0));

  const Var mismatched[] = {g.constant(Tensor({1, 2, 3, 3})), g.constant(Tensor({1, 2, 2, 3}))};
  CHECK_THROWS_AS(embed_paths(mismatched), ShapeError);
}

TEST_CASE("unit construction enforces 2 < e < sum of channels") {
  std::mt19937_64 rng(2);
  CHECK_THROWS_AS(AwmUnit("u", {4}, 3, rng), std::invalid_argument);
  CHECK_THROWS_AS(AwmUnit("u", {4, 4}, 2, rng), std::invalid_argument);
  CHECK_THROWS_AS(AwmUnit("u", {4, 4}, 8, rng), std::invalid_argument);
  AwmUnit unit("u", {16, 16}, 16, rng);
  CHECK(unit.parameter_count() == 16 * 32 + 16 + 2 * 16 + 2);
  CHECK(unit.mode() == AwmMode::active);
}

TEST_CASE("infer_weights: zero parameters give equal weights") {
  std::mt19937_64 rng(3);
  AwmUnit unit("u", {4, 4}, 3, rng);
  zero_parameters(unit);
  Graph g;
  const auto w = unit.infer_weights(g, g.constant(random_tensor({2, 8}, rng)));
  for (double v : w.lambda.value().values()) CHECK(v == 0.5);
  for (double v : w.gates.value().values()) CHECK(v == 0.5);
}

TEST_CASE("infer_weights: saturated logits give a one-hot weight") {
  std::mt19937_64 rng(4);
  AwmUnit unit("u", {4, 4}, 3, rng);
  zero_parameters(unit);
  auto params = unit.parameters();
  params[3]->value = Tensor({2}, std::vector<double>{20.0, -20.0});  // b2
  Graph g;
  const Tensor lambda = unit.infer_weights(g, g.constant(random_tensor({3, 8}, rng))).lambda.value();
  for (Index b = 0; b < 3; ++b) {
    CHECK(std::abs(lambda(b, 0) - 1.0) < 1e-8);
    CHECK(lambda(b, 1) < 1e-8);
    CHECK(lambda(b, 1) > 0.0);
  }
}

TEST_CASE("infer_weights matches a straight-line recomputation") {
  std::mt19937_64 rng(5);
  AwmUnit unit("u", {3, 5}, 4, rng);
  for (Parameter* p : unit.parameters()) p->value = random_tensor(p->value.shape(), rng);
  const Tensor z = random_tensor({3, 8}, rng);
  Graph g;
  const Tensor lambda = unit.infer_weights(g, g.constant(z)).lambda.value();
  auto params = unit.parameters();
  const Tensor &w1 = params[0]->value, &b1 = params[1]->value, &w2 = params[2]->value, &b2 = params[3]->value;
  for (Index b = 0; b < 3; ++b) {
    std::vector<double> hidden(4), gate(2);
    for (Index h = 0; h < 4; ++h) {
      double acc = b1[h];
      for (Index k = 0; k < 8; ++k) acc += w1(h, k) * z(b, k);
      hidden[static_cast<std::size_t>(h)] = std::max(acc, 0.0);
    }
    for (Index o = 0; o < 2; ++o) {
      double acc = b2[o];
      for (Index h = 0; h < 4; ++h) acc += w2(o, h) * hidden[static_cast<std::size_t>(h)];
      gate[static_cast<std::size_t>(o)] = 1.0 / (1.0 + std::exp(-acc));
    }
    const double total = gate[0] + gate[1];
    CHECK(std::abs(lambda(b, 0) - gate[0] / total) < 1e-12);
    CHECK(std::abs(lambda(b, 1) - gate[1] / total) < 1e-12);
  }
  Graph g2;
  CHECK_THROWS_AS(unit.infer_weights(g2, g2.constant(Tensor({3, 7}))), ShapeError);
}

TEST_CASE("normalization holds for 10,000 random inputs in every mode") {
  std::mt19937_64 rng(6);
  AwmUnit unit("u", {6, 6}, 4, rng);
  for (AwmMode mode : {AwmMode::active, AwmMode::frozen, AwmMode::fixed_equal}) {
    unit.set_mode(mode);
    double worst = 0.0;
    bool open_interval = true;
    for (int batch = 0; batch < 10; ++batch) {
      Graph g;
      const Var paths[] = {g.constant(random_tensor({1000, 6, 1, 1}, rng, -5, 5)),
                           g.constant(random_tensor({1000, 6, 1, 1}, rng, -5, 5))};
      const Tensor lambda = unit.weights_for(g, paths).lambda.value();
      for (Index b = 0; b < 1000; ++b) {
        worst = std::max(worst, std::abs(lambda(b, 0) + lambda(b, 1) - 1.0));
        open_interval &= lambda(b, 0) > 0 && lambda(b, 0) < 1 && lambda(b, 1) > 0 && lambda(b, 1) < 1;
      }
    }
    CHECK(worst <= 1e-9);
    CHECK(open_interval);
  }
}

TEST_CASE("fixed_equal bypasses inference") {
  std::mt19937_64 rng(7);
  AwmUnit unit("u", {4, 4, 4}, 3, rng);
  unit.set_mode(AwmMode::fixed_equal);
  Graph g;
  const Var paths[] = {g.constant(random_tensor({2, 4, 2, 2}, rng)), g.constant(random_tensor({2, 4, 2, 2}, rng)),
                       g.constant(random_tensor({2, 4, 2, 2}, rng))};
  const Tensor lambda = unit.weights_for(g, paths).lambda.value();
  for (double v : lambda.values()) CHECK(v == 1.0 / 3.0);
  CHECK_THROWS_AS(unit.infer_weights(g, g.constant(Tensor({2, 12}))), std::logic_error);
}

TEST_CASE("frozen units receive no gradient, active units resume") {
  std::mt19937_64 rng(8);
  AwmUnit unit("u", {4, 4}, 3, rng);
  const auto run = [&] {
    for (Parameter* p : unit.parameters()) p->zero_grad();
    Graph g;
    const Var paths[] = {g.variable(random_tensor({4, 4, 2, 2}, rng)), g.variable(random_tensor({4, 4, 2, 2}, rng))};
    const Var lambda = unit.weights_for(g, paths).lambda;
    g.backward(sum(multiply(lambda, g.constant(random_tensor({4, 2}, rng)))));
    double norm = 0;
    for (Parameter* p : unit.parameters()) norm += p->grad.flat().squaredNorm();
    return norm;
  };
  unit.set_mode(AwmMode::frozen);
  CHECK(run() == 0.0);
  unit.set_mode(AwmMode::active);
  CHECK(run() > 0.0);
}

TEST_CASE("weighted_merge_sum endpoints and broadcast") {
  std::mt19937_64 rng(9);
  Graph g;
  const Tensor f = random_tensor({1, 2, 2, 2}, rng), x = random_tensor({1, 2, 2, 2}, rng);
  const auto merge = [&](double a, double b) {
    return weighted_merge_sum(g.constant(f), g.constant(x), g.constant(Tensor({1, 2}, std::vector<double>{a, b}))).value();
  };
  CHECK(merge(1, 0) == f);
  CHECK(merge(0, 1) == x);
  CHECK(weighted_merge_sum(g.constant(x), g.constant(x), g.constant(Tensor({1, 2}, 0.5))).value() == x);
  const Tensor m = merge(0.3, 0.7);
  for (Index i = 0; i < 8; ++i) CHECK(std::abs(m[i] - (0.3 * f[i] + 0.7 * x[i])) <= 1e-15);
  CHECK_THROWS_AS(weighted_merge_sum(g.constant(f), g.constant(Tensor({1, 3, 2, 2})), g.constant(Tensor({1, 2}, 0.5))),
                  ShapeError);
}

TEST_CASE("weighted_merge_concat scales then concatenates") {
  std::mt19937_64 rng(10);
  Graph g;
  const Tensor a = random_tensor({2, 1, 2, 2}, rng), b = random_tensor({2, 2, 2, 2}, rng), c = random_tensor({2, 3, 2, 2}, rng);
  const Tensor lambda = random_tensor({2, 3}, rng, 0.1, 1.0);
  const Var paths[] = {g.constant(a), g.constant(b), g.constant(c)};
  const Tensor out = weighted_merge_concat(paths, g.constant(lambda)).value();
  REQUIRE(out.shape() == Shape{2, 6, 2, 2});
  const Tensor* src[] = {&a, &b, &b, &c, &c, &c};
  const Index offset[] = {0, 0, 1, 0, 1, 2};
  const Index which[] = {0, 1, 1, 2, 2, 2};
  for (Index n = 0; n < 2; ++n)
    for (Index ch = 0; ch < 6; ++ch)
      for (Index i = 0; i < 2; ++i)
        for (Index j = 0; j < 2; ++j) {
          const double expected = lambda(n, which[ch]) * (*src[ch])(n, offset[ch], i, j);
          CHECK(std::abs(out(n, ch, i, j) - expected) <= 1e-15);
        }

  const Var halves[] = {g.constant(b), g.constant(b)};
  const Tensor eq = weighted_merge_concat(halves, g.constant(Tensor({2, 2}, 0.5))).value();
  for (Index i = 0; i < b.size(); ++i) CHECK(eq[i] == 0.5 * b[i % 8 + (i / 16) * 8]);

  const Tensor one_hot({2, 3}, std::vector<double>{0, 1, 0, 0, 1, 0});
  const Tensor oh = weighted_merge_concat(paths, g.constant(one_hot)).value();
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 2; ++j) {
        CHECK(oh(n, 0, i, j) == 0.0);
        CHECK(oh(n, 1, i, j) == b(n, 0, i, j));
        CHECK(oh(n, 5, i, j) == 0.0);
      }
  CHECK_THROWS_AS(weighted_merge_concat(paths, g.constant(Tensor({2, 2}, 0.5))), ShapeError);
}

TEST_CASE("trained units respond to their input") {
  std::mt19937_64 rng(11);
  AwmUnit unit("u", {4, 4}, 3, rng);
  for (Parameter* p : unit.parameters()) p->value = random_tensor(p->value.shape(), rng);
  Graph g;
  const Tensor lambda = unit.infer_weights(g, g.constant(random_tensor({16, 8}, rng))).lambda.value();
  double lo = 1, hi = 0;
  for (Index b = 0; b < 16; ++b) {
    lo = std::min(lo, lambda(b, 0));
    hi = std::max(hi, lambda(b, 0));
  }
  CHECK(hi - lo > 1e-6);
}
