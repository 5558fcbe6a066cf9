#include <doctest.h>

#include <cmath>
#include <fstream>

#include "metapoison/data.hpp"
#include "metapoison/featviz.hpp"

using namespace metapoison;

TEST_CASE("centroids land at plus/minus half the gap") {
  const std::vector<double> mt{3, 1, 0}, mp{1, 1, 2}, w{0, 1, 0};
  const auto ax = ProjectionAxes::build(mt, mp, w);
  const double gap = std::sqrt(8.0);
  CHECK(ax.centroid_gap == doctest::Approx(gap));
  CHECK(ax.project(mt).first == doctest::Approx(gap / 2));
  CHECK(ax.project(mp).first == doctest::Approx(-gap / 2));
  CHECK(ax.project(mt).second == doctest::Approx(1.0));
  CHECK_FALSE(ax.degenerate_y);
}

TEST_CASE("w parallel to u gives flat y") {
  const auto ax = ProjectionAxes::build({2, 0}, {0, 0}, {-3, 0});
  CHECK(ax.degenerate_y);
  CHECK(ax.project(std::vector<double>{5, 7}).second == 0.0);
}

TEST_CASE("coincident centroids rejected") {
  CHECK_THROWS_AS(ProjectionAxes::build({1, 1}, {1, 1}, {0, 1}), InvariantError);
  CHECK_THROWS_AS(ProjectionAxes::build({1, 1}, {1}, {0, 1}), ShapeError);
}

TEST_CASE("x is invariant to a common shift") {
  const std::vector<double> mt{3, 1, 0}, mp{1, 1, 2}, w{0.3, 1, 0}, phi{0.5, -2, 4};
  const auto a = ProjectionAxes::build(mt, mp, w);
  std::vector<double> mt2 = mt, mp2 = mp, phi2 = phi;
  for (std::size_t i = 0; i < 3; ++i) {
    mt2[i] += 10.0 * (i + 1);
    mp2[i] += 10.0 * (i + 1);
    phi2[i] += 10.0 * (i + 1);
  }
  const auto b = ProjectionAxes::build(mt2, mp2, w);
  CHECK(a.project(phi).first == doctest::Approx(b.project(phi2).first));
}

TEST_CASE("project model features") {
  SynthOptions so;
  so.n_per_class = 10;
  so.height = 4;
  so.width = 4;
  const auto d = synth_dataset(so);
  ArchSpec arch;
  arch.height = 4;
  arch.width = 4;
  arch.hidden = {8, 6};
  const auto model = init_model<float>(arch, 3);
  const auto zeros = d.indices_of(0), ones = d.indices_of(1);
  std::vector<FeatureGroup> groups{{"target_class", gather_images<float>(d, zeros)},
                                   {"poison_class", gather_images<float>(d, ones)},
                                   {"target", gather_images<float>(d, std::vector<std::size_t>{zeros[0]})}};
  const auto pts = project_features(model, groups, 1);
  CHECK(pts.size() == 21);
  double mx_t = 0, mx_p = 0;
  for (const auto& p : pts) {
    CHECK(p.layer == "penultimate");
    if (p.group == "target_class") mx_t += p.x / 10.0;
    if (p.group == "poison_class") mx_p += p.x / 10.0;
  }
  CHECK(mx_t == doctest::Approx(-mx_p).epsilon(1e-6));
  CHECK(mx_t > 0);

  const auto first = project_features(model, groups, 1, 0);
  CHECK(first.front().layer == "layer0");
  CHECK_THROWS_AS(project_features(model, groups, 1, 2), ConfigError);
  CHECK_THROWS_AS(project_features(model, groups, 5), ConfigError);
  CHECK_THROWS_AS(project_features(model, {groups[0]}, 1), ConfigError);

  const auto path = std::filesystem::temp_directory_path() / "mp_featviz.csv";
  write_feature_csv(pts, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  CHECK(header == "group,epoch,layer,x,y");
  std::filesystem::remove(path);
}
