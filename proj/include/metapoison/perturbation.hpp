#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapoison/data.hpp"
#include "metapoison/graph.hpp"

namespace metapoison {

/// Largest T not above `bound`, so clipped values never exceed the real bound.
template <typename T>
T representable_bound(double bound);

/// x_p = clamp(f_g(x) + delta, 0, 1) where f_g(x) = x + trilinear(g)(x) is a
/// color remap over a (G, G, G, 3) displacement grid in normalized RGB.
template <typename T>
struct PerturbationParams {
  Tensor<T> grid;   // (G, G, G, 3)
  Tensor<T> delta;  // (H, W, C)
  double eps = 8.0;    // additive bound, 0-255 pixel units
  double eps_c = 0.04; // color bound, normalized units

  static PerturbationParams zeros(const Shape& image_shape, std::size_t grid_size, double eps, double eps_c);
  std::size_t grid_size() const { return grid.dim(0); }

  template <typename U>
  PerturbationParams<U> cast() const {
    return {grid.template cast<U>(), delta.template cast<U>(), eps, eps_c};
  }
};

template <typename T>
std::shared_ptr<const GridStencil<T>> color_stencil(const Tensor<T>& base, std::size_t grid_size);

/// Differentiable render on `g` with grid and delta given as graph nodes.
template <typename T>
Var render(Graph<T>& g, const Tensor<T>& base, Var grid, Var delta,
           std::shared_ptr<const GridStencil<T>> stencil);

template <typename T>
Tensor<T> apply(const Tensor<T>& base, const PerturbationParams<T>& p);

/// Per-pixel color displacement f_g(x) - x of every pixel of `base`.
template <typename T>
Tensor<T> color_displacement(const Tensor<T>& base, const Tensor<T>& grid);

/// Clips delta to eps/255 and grid nodes to eps_c.
template <typename T>
PerturbationParams<T> project(PerturbationParams<T> p);

template <typename T>
Tensor<T> watermark(const Tensor<T>& base, const Tensor<T>& target, double opacity);

/// Empty when `rendered` is a feasible render of (base, p); otherwise a
/// description of the first violated constraint.
std::string feasibility_violation(const Tensor<float>& base, const PerturbationParams<float>& p,
                                  const Tensor<float>& rendered);

struct PoisonSet {
  std::vector<std::size_t> base_indices;  // positions in the training set
  std::vector<int> labels;
  std::vector<Tensor<float>> bases;       // base images (watermarked if requested)
  std::vector<PerturbationParams<float>> params;
  std::vector<Tensor<float>> rendered;
  std::optional<std::string> parent;      // manifest hash of the set this was subsampled from
  std::vector<std::size_t> parent_positions;

  std::size_t size() const { return base_indices.size(); }
  /// Recomputes the rendered cache from bases and params.
  void render_all();
  /// Throws InvariantError on any constraint violation or stale cache.
  void check_feasible() const;
};

struct PoisonInit {
  std::size_t grid_size = 8;
  double eps = 8.0;
  double eps_c = 0.04;
  std::optional<Tensor<float>> watermark_target;
  double watermark_opacity = 0.0;
};

/// Zero perturbations on the given base images.
PoisonSet make_poison_set(const LabeledSet& data, std::vector<std::size_t> base_indices, const PoisonInit& init);

/// Seeded uniform subset of m poisons, keeping their original order.
PoisonSet subsample_poisons(const PoisonSet& poisons, std::size_t m, std::uint64_t seed,
                            std::optional<std::string> parent_hash = std::nullopt);

/// Training set with every poison substituted at its base index.
LabeledSet substitute_poisons(const LabeledSet& data, const PoisonSet& poisons);

/// manifest.json plus grid.f32, delta.f32, bases.f32 and rendered.f32 (raw
/// little-endian floats, poisons concatenated in order). `extra` is merged
/// into the manifest.
void save_poison_set(const PoisonSet& poisons, const std::filesystem::path& dir,
                     const nlohmann::json& extra = nlohmann::json::object());
PoisonSet load_poison_set(const std::filesystem::path& dir, nlohmann::json* manifest = nullptr);

/// SHA-256 hex digest of the poison tensors (grid, delta, rendered).
std::string poison_digest(const PoisonSet& poisons);

}  // namespace metapoison
