#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "gradcheck.hpp"
#include "metapoison/perturbation.hpp"

using namespace metapoison;

namespace {

Tensor<float> random_image(std::mt19937_64& rng, std::size_t h = 4, std::size_t w = 4) {
  std::uniform_real_distribution<float> u(0, 1);
  Tensor<float> t(Shape{h, w, 3});
  for (auto& v : t.storage()) v = u(rng);
  return t;
}

}  // namespace

TEST_CASE("identity and constant shift") {
  std::mt19937_64 rng(1);
  auto base = random_image(rng);
  base[0] = 1.0f;
  auto p = PerturbationParams<float>::zeros(base.shape(), 8, 8, 0.04);
  CHECK(apply(base, p) == base);
  for (auto& v : p.delta.storage()) v = 8.0f / 255.0f;
  const auto out = apply(base, p);
  for (std::size_t i = 0; i < base.size(); ++i) CHECK(out[i] == std::min(1.0f, base[i] + 8.0f / 255.0f));
  CHECK(out[0] == 1.0f);
  CHECK_THROWS_AS(PerturbationParams<float>::zeros(base.shape(), 1, 8, 0.04), ConfigError);
}

TEST_CASE("lattice point reads its own grid node") {
  // G = 5: lattice colors are multiples of 0.25.
  Tensor<double> base({1, 1, 3}, {0.25, 0.5, 0.75});
  auto p = PerturbationParams<double>::zeros(base.shape(), 5, 8, 0.04);
  const std::size_t cell = (1 * 5 + 2) * 5 + 3;
  p.grid[cell * 3 + 0] = 0.04;
  const auto out = apply(base, p);
  CHECK(out[0] == doctest::Approx(0.29).epsilon(1e-12));
  CHECK(out[1] == doctest::Approx(0.5).epsilon(1e-12));
  CHECK(out[2] == doctest::Approx(0.75).epsilon(1e-12));
  // Midway between two nodes the displacement averages.
  Tensor<double> mid({1, 1, 3}, {0.375, 0.5, 0.75});
  CHECK(apply(mid, p)[0] == doctest::Approx(0.375 + 0.02).epsilon(1e-12));
}

TEST_CASE("projection clips and is idempotent") {
  auto p = PerturbationParams<float>::zeros({2, 2, 3}, 4, 8, 0.04);
  p.delta[0] = 12.0f / 255.0f;
  p.delta[1] = -1.0f;
  p.grid[0] = -0.1f;
  p.grid[1] = 0.01f;
  const auto q = project(p);
  CHECK(q.delta[0] == doctest::Approx(8.0 / 255.0));
  CHECK(static_cast<double>(q.delta[0]) <= 8.0 / 255.0);
  CHECK(q.delta[1] == doctest::Approx(-8.0 / 255.0));
  CHECK(q.grid[0] == doctest::Approx(-0.04));
  CHECK(q.grid[1] == 0.01f);
  const auto r = project(q);
  CHECK(r.delta == q.delta);
  CHECK(r.grid == q.grid);
}

TEST_CASE("watermark blend") {
  Tensor<float> base({1, 1, 3}, 0.0f), target({1, 1, 3}, 1.0f);
  CHECK(watermark(base, target, 0.0) == base);
  CHECK(watermark(base, target, 1.0) == target);
  CHECK(watermark(base, target, 0.3)[0] == doctest::Approx(0.3));
  CHECK_THROWS_AS(watermark(base, Tensor<float>({1, 2, 3}), 0.3), ShapeError);
}

TEST_CASE("interpolated displacement is bounded by the largest node displacement") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1), s(-1, 1);
  double worst = -1;
  for (int trial = 0; trial < 100; ++trial) {
    Tensor<double> grid(Shape{8, 8, 8, 3});
    double node_max = 0;
    for (auto& v : grid.storage()) node_max = std::max(node_max, std::abs(v = 0.05 * s(rng)));
    Tensor<double> colors(Shape{100, 3});
    for (auto& v : colors.storage()) v = u(rng);
    const auto disp = color_displacement(colors, grid);
    for (double v : disp.values()) worst = std::max(worst, std::abs(v) - node_max);
  }
  CHECK(worst <= 1e-7);
}

TEST_CASE("project then apply is always feasible") {
  std::mt19937_64 rng(9);
  std::normal_distribution<float> big(0, 0.2f);
  std::size_t violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto base = random_image(rng, 3, 3);
    auto p = PerturbationParams<float>::zeros(base.shape(), 2 + trial % 7, 1 + trial % 16, 0.01 + 0.001 * (trial % 50));
    for (auto& v : p.delta.storage()) v = big(rng);
    for (auto& v : p.grid.storage()) v = big(rng);
    p = project(p);
    violations += !feasibility_violation(base, p, apply(base, p)).empty();
  }
  CHECK(violations == 0);
}

TEST_CASE("render gradients match finite differences") {
  using testing::gradcheck;
  std::mt19937_64 rng(2);
  Tensor<double> base(Shape{3, 3, 3});
  std::uniform_real_distribution<double> u(0.2, 0.8);
  for (auto& v : base.storage()) v = u(rng);
  const auto stencil = color_stencil(base, 4);
  Tensor<double> grid(Shape{4, 4, 4, 3}), delta(Shape{3, 3, 3}), weights(Shape{3, 3, 3});
  std::uniform_real_distribution<double> s(-0.03, 0.03);
  for (auto& v : grid.storage()) v = s(rng);
  for (auto& v : delta.storage()) v = s(rng);
  for (auto& v : weights.storage()) v = s(rng) * 30;
  const double err = gradcheck(
      [&](Graph<double>& g, std::span<const Var> in) {
        const Var x = render(g, base, in[0], in[1], stencil);
        return g.sum(g.mul(x, g.constant(weights)));
      },
      {grid, delta});
  CHECK(err <= 1e-5);
}

TEST_CASE("poison set lifecycle") {
  SynthOptions so;
  so.n_per_class = 10;
  const auto data = synth_dataset(so);
  const auto bases = select_poison_bases(data, 1, 0.2);
  PoisonInit init;
  init.watermark_target = image_tensor<float>(data, 0);
  init.watermark_opacity = 0.3;
  auto set = make_poison_set(data, bases, init);
  CHECK(set.size() == 4);
  set.check_feasible();
  CHECK(set.bases[0][0] == doctest::Approx(0.3 * data.image(0)[0] + 0.7 * data.image(bases[0])[0]));

  set.params[1].delta[0] = 1.0f;
  CHECK_THROWS_AS(set.check_feasible(), InvariantError);
  set.params[1] = project(set.params[1]);
  CHECK_THROWS_AS(set.check_feasible(), InvariantError);  // stale cache
  set.render_all();
  set.check_feasible();

  const auto poisoned = substitute_poisons(data, set);
  CHECK(poisoned.labels == data.labels);
  CHECK(poisoned.image(bases[1])[0] == set.rendered[1][0]);
  CHECK(poisoned.image(2)[0] == data.image(2)[0]);

  const auto dir = std::filesystem::temp_directory_path() / "metapoison_poisons";
  std::filesystem::remove_all(dir);
  save_poison_set(set, dir, {{"config_hash", "abc"}});
  nlohmann::json manifest;
  const auto back = load_poison_set(dir, &manifest);
  CHECK(manifest.at("config_hash") == "abc");
  CHECK(poison_digest(back) == poison_digest(set));
  CHECK(back.base_indices == set.base_indices);
  back.check_feasible();

  const auto all = subsample_poisons(set, 4, 1);
  CHECK(poison_digest(all) == poison_digest(set));
  CHECK(subsample_poisons(set, 0, 1).size() == 0);
  const auto half = subsample_poisons(set, 2, 1);
  CHECK(half.size() == 2);
  CHECK(half.parent == poison_digest(set));
  CHECK_THROWS_AS(subsample_poisons(set, 5, 1), ConfigError);
  std::filesystem::remove_all(dir);
}
