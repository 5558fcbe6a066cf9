#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "metapoison/models.hpp"

namespace metapoison {

/// 2-D frame for feature clouds: x runs along the unit vector u from the
/// poison-class centroid to the target-class centroid, centered on their
/// midpoint; y runs along `w` with its u component removed, normalized.
struct ProjectionAxes {
  std::vector<double> midpoint;
  std::vector<double> u;
  std::vector<double> w_perp;  // all zero when degenerate_y
  bool degenerate_y = false;
  double centroid_gap = 0;     // |mu_t - mu_p|

  static ProjectionAxes build(const std::vector<double>& mu_target, const std::vector<double>& mu_poison,
                              const std::vector<double>& w);
  std::pair<double, double> project(std::span<const double> phi) const;
};

std::vector<double> centroid(const std::vector<std::vector<double>>& rows);

struct FeatureGroup {
  std::string name;  // e.g. target_class, poison_class, poisons, target
  Tensor<float> images;  // (B, H, W, C)
};

struct FeaturePoint {
  std::string group;
  std::size_t epoch = 0;
  std::string layer;
  double x = 0;
  double y = 0;
};

/// Feature rows of `images` at hidden layer `layer` (index into the model's
/// hidden layers, flattened) or at the penultimate layer when absent.
std::vector<std::vector<double>> layer_features(const ModelState<float>& model, const Tensor<float>& images,
                                                std::optional<std::size_t> layer);

/// Projects every group. Centroids come from the groups named
/// `target_class` and `poison_class`. At the penultimate layer the y axis is
/// the y_adv column of the classification layer; at other layers, which the
/// classifier weights do not address, it is the target group's centroid
/// offset from the midpoint.
std::vector<FeaturePoint> project_features(const ModelState<float>& model, const std::vector<FeatureGroup>& groups,
                                           int y_adv, std::optional<std::size_t> layer = std::nullopt);

void write_feature_csv(const std::vector<FeaturePoint>& points, const std::filesystem::path& path);

}  // namespace metapoison
