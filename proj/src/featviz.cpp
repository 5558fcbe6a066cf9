#include "metapoison/featviz.hpp"

#include <cmath>
#include <fstream>

namespace metapoison {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

const FeatureGroup& find_group(const std::vector<FeatureGroup>& groups, const std::string& name) {
  for (const auto& g : groups) {
    if (g.name == name) return g;
  }
  throw ConfigError("featviz: missing feature group '" + name + "'");
}

std::size_t hidden_layer_count(const ModelState<float>& model) {
  Graph<float> g;
  const auto& a = model.arch;
  const auto out = forward(model, g.constant(Tensor<float>(Shape{1, a.height, a.width, a.channels})), g);
  return out.layers.size();
}

}  // namespace

std::vector<double> centroid(const std::vector<std::vector<double>>& rows) {
  if (rows.empty()) throw ConfigError("featviz: centroid of an empty group");
  std::vector<double> mu(rows[0].size(), 0.0);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < mu.size(); ++i) mu[i] += r[i];
  }
  for (auto& v : mu) v /= static_cast<double>(rows.size());
  return mu;
}

ProjectionAxes ProjectionAxes::build(const std::vector<double>& mu_target, const std::vector<double>& mu_poison,
                                     const std::vector<double>& w) {
  const std::size_t d = mu_target.size();
  if (mu_poison.size() != d || w.size() != d) throw ShapeError("featviz: axis vectors differ in length");
  ProjectionAxes a;
  a.midpoint.resize(d);
  a.u.resize(d);
  for (std::size_t i = 0; i < d; ++i) {
    a.midpoint[i] = 0.5 * (mu_target[i] + mu_poison[i]);
    a.u[i] = mu_target[i] - mu_poison[i];
  }
  a.centroid_gap = std::sqrt(dot(a.u, a.u));
  if (a.centroid_gap == 0.0) throw InvariantError("featviz: class centroids coincide, x axis is degenerate");
  for (auto& v : a.u) v /= a.centroid_gap;
  a.w_perp = w;
  const double along = dot(w, a.u);
  for (std::size_t i = 0; i < d; ++i) a.w_perp[i] -= along * a.u[i];
  const double n = std::sqrt(dot(a.w_perp, a.w_perp));
  const double wn = std::sqrt(dot(w, w));
  if (n <= 1e-12 * std::max(wn, 1.0)) {
    a.degenerate_y = true;
    std::fill(a.w_perp.begin(), a.w_perp.end(), 0.0);
  } else {
    for (auto& v : a.w_perp) v /= n;
  }
  return a;
}

std::pair<double, double> ProjectionAxes::project(std::span<const double> phi) const {
  if (phi.size() != u.size()) throw ShapeError("featviz: feature length differs from axes");
  double x = 0;
  for (std::size_t i = 0; i < phi.size(); ++i) x += (phi[i] - midpoint[i]) * u[i];
  return {x, dot(phi, w_perp)};
}

std::vector<std::vector<double>> layer_features(const ModelState<float>& model, const Tensor<float>& images,
                                                std::optional<std::size_t> layer) {
  Graph<float> g;
  const auto out = forward(model, g.constant(images), g);
  Var v = out.penultimate;
  if (layer) {
    if (*layer >= out.layers.size()) {
      throw ConfigError("featviz: layer " + std::to_string(*layer) + " out of range (model has " +
                        std::to_string(out.layers.size()) + " hidden layers)");
    }
    v = out.layers[*layer];
  }
  const auto& t = g.value(v);
  const std::size_t n = t.dim(0), d = t.size() / std::max<std::size_t>(n, 1);
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) rows[i][j] = t[i * d + j];
  }
  return rows;
}

std::vector<FeaturePoint> project_features(const ModelState<float>& model, const std::vector<FeatureGroup>& groups,
                                           int y_adv, std::optional<std::size_t> layer) {
  const auto mu_t = centroid(layer_features(model, find_group(groups, "target_class").images, layer));
  const auto mu_p = centroid(layer_features(model, find_group(groups, "poison_class").images, layer));
  const bool penultimate = !layer || *layer + 1 == hidden_layer_count(model);
  std::vector<double> w(mu_t.size());
  if (penultimate) {
    const auto& head = model.params.back();  // (feature_dim, num_classes)
    if (y_adv < 0 || static_cast<std::size_t>(y_adv) >= head.dim(1)) throw ConfigError("featviz: y_adv out of range");
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = head[i * head.dim(1) + static_cast<std::size_t>(y_adv)];
  } else {
    const auto mu = centroid(layer_features(model, find_group(groups, "target").images, layer));
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = mu[i] - 0.5 * (mu_t[i] + mu_p[i]);
  }
  const auto axes = ProjectionAxes::build(mu_t, mu_p, w);
  const std::string layer_name = layer ? "layer" + std::to_string(*layer) : "penultimate";
  std::vector<FeaturePoint> out;
  for (const auto& g : groups) {
    for (const auto& phi : layer_features(model, g.images, layer)) {
      const auto [x, y] = axes.project(phi);
      out.push_back({g.name, model.epoch, layer_name, x, y});
    }
  }
  return out;
}

void write_feature_csv(const std::vector<FeaturePoint>& points, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.precision(9);
  out << "group,epoch,layer,x,y\n";
  for (const auto& p : points) out << p.group << "," << p.epoch << "," << p.layer << "," << p.x << "," << p.y << "\n";
}

}  // namespace metapoison
