#include <cstring>

#include "doctest.h"
#include "op_cases.hpp"

using namespace metapoison;
using metapoison::testing::check_op;
using metapoison::testing::op_cases;

TEST_CASE("add of scalars records a two-leaf graph") {
  Graph<float> g;
  const Var a = g.constant(Tensor<float>::vector({2.0f}));
  const Var b = g.constant(Tensor<float>::vector({3.0f}));
  const Var c = g.add(a, b);
  CHECK(g.value(c).item() == 5.0f);
  CHECK(g.size() == 3);
}

TEST_CASE("matmul by identity returns the matrix") {
  Graph<double> g;
  const Var eye = g.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
  const Var a = g.constant(Tensor<double>({2, 2}, {1.5, -2, 3, 0.25}));
  CHECK(g.value(g.matmul(eye, a)) == g.value(a));
}

TEST_CASE("relu forward and backward") {
  Graph<double> g;
  const Var x = g.parameter(Tensor<double>::vector({-1, 2}));
  const Var r = g.relu(x);
  CHECK(g.value(r) == Tensor<double>::vector({0, 2}));
  const Var loss = g.sum(g.mul(r, g.constant(Tensor<double>::vector({1, 1}))));
  const auto grads = g.gradients(loss, std::vector<Var>{x});
  CHECK(grads[0] == Tensor<double>::vector({0, 1}));
}

TEST_CASE("derivative of x squared") {
  Graph<double> g;
  const Var x = g.parameter(Tensor<double>::scalar(3.0));
  const Var loss = g.mul(x, x);
  CHECK(g.gradients(loss, std::vector<Var>{x})[0].item() == doctest::Approx(6.0));
}

TEST_CASE("gradient through an sgd update node") {
  // theta1 = theta0 - 0.1 * 2 theta0 = 0.8 theta0; loss = theta1^2 -> dloss/dtheta0 = 2 * 0.8 * 0.8 theta0.
  Graph<double> g;
  const Var theta0 = g.parameter(Tensor<double>::scalar(1.0));
  const Var inner = g.mul(theta0, theta0);
  const Var grad = g.gradient_nodes(inner, std::vector<Var>{theta0})[0];
  const Var theta1 = sgd_update_node(g, theta0, grad, 0.1);
  CHECK(g.value(theta1).item() == doctest::Approx(0.8));
  const Var loss = g.mul(theta1, theta1);
  CHECK(g.gradients(loss, std::vector<Var>{theta0})[0].item() == doctest::Approx(1.28).epsilon(1e-12));

  // Central finite-difference cross-check of the same pipeline.
  auto pipeline = [](double t0) {
    const double t1 = t0 - 0.1 * 2 * t0;
    return t1 * t1;
  };
  const double h = 1e-4;
  CHECK((pipeline(1 + h) - pipeline(1 - h)) / (2 * h) == doctest::Approx(1.28).epsilon(1e-8));
}

TEST_CASE("sgd_update_node arithmetic and zero step") {
  Graph<double> g;
  const Var theta = g.parameter(Tensor<double>::scalar(4.0));
  const Var x = g.parameter(Tensor<double>::scalar(1.0));
  // inner loss theta * x: gradient w.r.t. theta is x (here 2 * x with x=1 scaled).
  const Var inner = g.scale(g.mul(theta, x), 2.0);
  const Var grad = g.gradient_nodes(inner, std::vector<Var>{theta})[0];
  CHECK(g.value(grad).item() == 2.0);
  CHECK(g.value(sgd_update_node(g, theta, grad, 0.5)).item() == 3.0);

  const Var same = sgd_update_node(g, theta, grad, 0.0);
  CHECK(g.value(same).item() == 4.0);
  const Var loss = g.mul(same, same);
  CHECK(g.gradients(loss, std::vector<Var>{x})[0].item() == 0.0);
}

TEST_CASE("sgd_update_node rejects detached gradients") {
  Graph<double> g;
  const Var theta = g.parameter(Tensor<double>::scalar(4.0));
  const Var detached = g.constant(Tensor<double>::scalar(2.0));
  CHECK_THROWS_AS(sgd_update_node(g, theta, detached, 0.5), ConfigError);
  const Var wrong = g.parameter(Tensor<double>::vector({1, 2}));
  CHECK_THROWS_AS(sgd_update_node(g, theta, wrong, 0.5), ShapeError);
}

TEST_CASE("shape errors name the op") {
  Graph<float> g;
  const Var a = g.constant(Tensor<float>({2, 3}));
  const Var b = g.constant(Tensor<float>({2, 3}));
  try {
    g.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find("matmul") != std::string::npos);
    CHECK(std::string(e.what()).find("(2, 3)") != std::string::npos);
  }
  CHECK_THROWS_AS(g.add(a, g.constant(Tensor<float>({3, 2}))), ShapeError);
  CHECK_THROWS_AS(g.softmax_xent(a, std::vector<int>{0, 3}), ShapeError);
}

TEST_CASE("backward requires a scalar loss") {
  Graph<double> g;
  const Var x = g.parameter(Tensor<double>::vector({1, 2}));
  CHECK_THROWS_AS(g.gradients(g.mul(x, x), std::vector<Var>{x}), ShapeError);
}

TEST_CASE("unreachable wrt gets a zero gradient") {
  Graph<double> g;
  const Var x = g.parameter(Tensor<double>::vector({1, 2}));
  const Var y = g.parameter(Tensor<double>::vector({5, 6, 7}));
  const auto grads = g.gradients(g.sum(g.mul(x, x)), std::vector<Var>{x, y});
  CHECK(grads[1] == Tensor<double>({3}));
}

TEST_CASE("gradients leave the graph untouched and are repeatable") {
  Graph<float> g;
  std::mt19937_64 rng(7);
  std::normal_distribution<float> n;
  Tensor<float> w({4, 3}), xs({5, 4});
  for (auto& v : w.storage()) v = n(rng);
  for (auto& v : xs.storage()) v = n(rng);
  const Var wv = g.parameter(w);
  const Var xv = g.constant(xs);
  const Var loss = g.mean(g.softmax_xent(g.relu(g.matmul(xv, wv)), std::vector<int>{0, 1, 2, 0, 1}));
  const std::size_t before = g.size();
  const auto first = g.gradients(loss, std::vector<Var>{wv});
  CHECK(g.size() == before);
  const auto second = g.gradients(loss, std::vector<Var>{wv});
  REQUIRE(first[0].size() == second[0].size());
  CHECK(std::memcmp(first[0].data(), second[0].data(), first[0].size() * sizeof(float)) == 0);
}

TEST_CASE("chained zero-lr updates reduce to the plain input gradient") {
  // loss(theta_k(x)) with alpha = 0 equals loss(theta_0) so d/dx matches.
  std::mt19937_64 rng(11);
  const auto theta0 = metapoison::testing::random_tensor({3, 2}, rng);
  const auto xs = metapoison::testing::random_tensor({4, 3}, rng);
  const std::vector<int> labels{0, 1, 1, 0};

  auto run = [&](std::size_t steps) {
    Graph<double> g;
    const Var x = g.parameter(xs);
    Var theta = g.parameter(theta0);
    for (std::size_t k = 0; k < steps; ++k) {
      const Var inner = g.mean(g.softmax_xent(g.matmul(x, theta), labels));
      const Var grad = g.gradient_nodes(inner, std::vector<Var>{theta})[0];
      theta = sgd_update_node(g, theta, grad, 0.0);
    }
    const Var outer = g.mean(g.softmax_xent(g.matmul(x, theta), std::vector<int>{1, 0, 0, 1}));
    return g.gradients(outer, std::vector<Var>{x})[0];
  };
  const auto base = run(0);
  const auto unrolled = run(3);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(unrolled[i] == doctest::Approx(base[i]).epsilon(1e-12));
}

TEST_CASE("every op matches finite differences, first and second order") {
  const auto cases = op_cases();
  std::uint64_t seed = 100;
  for (const auto& c : cases) {
    const auto s = check_op(c, 25, seed++);
    INFO("op " << s.name << " first=" << s.worst_first << " second=" << s.worst_second);
    CHECK(s.worst_first <= 1e-5);
    CHECK(s.worst_second <= 1e-5);
  }
}

TEST_CASE("grid stencil weights form a convex combination") {
  const Tensor<double> colors({2, 3}, {0.0, 0.5, 1.0, 0.13, 0.77, 0.42});
  const auto st = GridStencil<double>::build(colors.values(), 5, {2, 3});
  for (std::size_t p = 0; p < st.pixels; ++p) {
    double total = 0;
    for (std::size_t k = 0; k < 8; ++k) {
      CHECK(st.weight[p * 8 + k] >= 0.0);
      total += st.weight[p * 8 + k];
    }
    CHECK(total == doctest::Approx(1.0));
  }
  CHECK_THROWS_AS(GridStencil<double>::build(colors.values(), 1, {2, 3}), ConfigError);
}
