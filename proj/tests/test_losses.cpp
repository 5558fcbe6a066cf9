#include <doctest.h>

#include <cmath>
#include <random>

#include "metapoison/losses.hpp"

using namespace metapoison;

namespace {

double eval_cw(std::vector<double> z, int y, std::optional<double> kappa = std::nullopt) {
  Graph<double> g;
  const Var l = g.constant(Tensor<double>({1, z.size()}, z));
  return g.value(cw_loss(g, l, y, kappa)).item();
}

LabeledSet one_target(int y_true, std::size_t classes = 2) {
  LabeledSet t;
  t.height = t.width = 1;
  t.channels = 1;
  t.num_classes = classes;
  t.images = {0.5f};
  t.labels = {y_true};
  return t;
}

}  // namespace

TEST_CASE("train loss values") {
  Graph<double> g;
  const int l4[] = {2};
  CHECK(g.value(train_loss(g, g.constant(Tensor<double>({1, 4}, 0.0)), l4)).item() ==
        doctest::Approx(std::log(4.0)));
  const int l1[] = {1};
  CHECK(g.value(train_loss(g, g.constant(Tensor<double>({1, 2}, {0.0, 200.0})), l1)).item() ==
        doctest::Approx(0.0));
  // Hand softmax: row 0 (1, 0) label 0 -> log(1 + e^-1); row 1 (0, 2) label 0 -> log(1 + e^2) - 0.
  const int l2[] = {0, 0};
  const double expect = 0.5 * (std::log(1 + std::exp(-1.0)) + std::log(1 + std::exp(2.0)));
  CHECK(g.value(train_loss(g, g.constant(Tensor<double>({2, 2}, {1.0, 0.0, 0.0, 2.0})), l2)).item() ==
        doctest::Approx(expect));
  const int bad[] = {5};
  CHECK_THROWS_AS(train_loss(g, g.constant(Tensor<double>({1, 4}, 0.0)), bad), ShapeError);
}

TEST_CASE("cw loss definition and clamp") {
  CHECK(eval_cw({2, 5}, 1) == doctest::Approx(-3));
  CHECK(eval_cw({2, 5}, 0) == doctest::Approx(3));
  CHECK(eval_cw({0, 10}, 1, 2.0) == doctest::Approx(-2));
  CHECK(eval_cw({1, 4, 3}, 0) == doctest::Approx(3));
  const float z[] = {2, 5};
  CHECK(cw_value(z, 1) == doctest::Approx(-3));
  CHECK(cw_value(z, 1, 2.0) == doctest::Approx(-2));
}

TEST_CASE("cw sign law over random logits") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> n(0, 3);
  std::size_t bad = 0;
  for (int trial = 0; trial < 10000; ++trial) {
    const std::size_t classes = 2 + trial % 9;
    std::vector<double> z(classes);
    for (auto& v : z) v = n(rng);
    const int y = static_cast<int>(trial % classes);
    const auto arg = static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
    bad += (eval_cw(z, y) < 0) != (arg == y);
  }
  CHECK(bad == 0);
  // Tied maximum is not a success.
  CHECK(eval_cw({4, 4}, 0) >= 0);
}

TEST_CASE("cw gradient picks the first maximizing competitor") {
  Graph<double> g;
  const Var l = g.parameter(Tensor<double>({1, 3}, {7, 7, 1}));
  const Var loss = cw_loss(g, l, 2);
  const Var wrt[] = {l};
  const auto grad = g.gradients(loss, wrt)[0];
  CHECK(grad == Tensor<double>({1, 3}, {1, 0, -1}));
}

TEST_CASE("adversarial loss per scheme") {
  AttackSpec spec;
  spec.targets = one_target(0);
  spec.y_adv = 1;
  spec.poison_class = 1;
  spec.validate(2);
  const AdvBatch batch = adv_batch(spec, 0);
  {
    Graph<double> g;
    const Var l = g.constant(Tensor<double>({1, 2}, {2, 5}));
    CHECK(g.value(adv_loss(g, spec, l, batch)).item() == doctest::Approx(-3));
  }
  spec.scheme = Scheme::kSelfConceal;
  spec.poison_class = 0;
  spec.validate(2);
  {
    Graph<double> g;
    const Var l = g.constant(Tensor<double>({1, 2}, {1, 1}));
    CHECK(g.value(adv_loss(g, spec, l, batch)).item() == doctest::Approx(std::log(2.0)));
    const Var sure = g.constant(Tensor<double>({1, 2}, {100, 0}));
    CHECK(g.value(adv_loss(g, spec, sure, batch)).item() == doctest::Approx(-std::log(1e-6)).epsilon(1e-6));
    const Var gone = g.constant(Tensor<double>({1, 2}, {-100, 0}));
    const double tiny = g.value(adv_loss(g, spec, gone, batch)).item();
    CHECK(tiny >= 0);
    CHECK(tiny < 1e-12);
  }
  spec.scheme = Scheme::kMultiTarget;
  spec.poison_class = 1;
  spec.targets.images = {0.1f, 0.2f};
  spec.targets.labels = {0, 0};
  spec.validate(2);
  {
    Graph<double> g;
    // margins: row 0 -> 2 - 5 = -3, row 1 -> 4 - 3 = 1
    const Var l = g.constant(Tensor<double>({2, 2}, {2, 5, 4, 3}));
    CHECK(g.value(adv_loss(g, spec, l, adv_batch(spec, 0))).item() == doctest::Approx(-1));
  }
}

TEST_CASE("indiscriminate schemes sample the holdout deterministically") {
  AttackSpec spec;
  spec.scheme = Scheme::kIndiscriminateAll;
  CHECK_THROWS_AS(spec.validate(2), ConfigError);
  SynthOptions so;
  so.n_per_class = 20;
  spec.holdout = synth_dataset(so);
  spec.holdout_batch = 8;
  spec.validate(2);
  const auto a = adv_batch(spec, 3), b = adv_batch(spec, 3), c = adv_batch(spec, 4);
  CHECK(a.images.size() == 8);
  CHECK(a.images.images == b.images.images);
  CHECK(a.images.images != c.images.images);
  Graph<double> g;
  const Var l = g.constant(Tensor<double>({8, 2}, 0.0));
  CHECK(g.value(adv_loss(g, spec, l, a)).item() == doctest::Approx(-std::log(2.0)));
}

TEST_CASE("scheme invariants") {
  AttackSpec spec;
  spec.targets = one_target(0);
  spec.y_adv = 1;
  spec.poison_class = 0;
  CHECK_THROWS_AS(spec.validate(2), ConfigError);  // collision needs y_adv == poison class
  spec.scheme = Scheme::kSelfConceal;
  spec.validate(2);
  spec.poison_class = 1;
  CHECK_THROWS_AS(spec.validate(2), ConfigError);
  spec.scheme = Scheme::kMulticlass;
  CHECK_THROWS_AS(spec.validate(2), ConfigError);
  spec.poison_class.reset();
  spec.validate(2);
  CHECK(parse_scheme("indiscriminate_class") == Scheme::kIndiscriminateClass);
  CHECK_THROWS_AS(parse_scheme("nope"), ConfigError);
}
