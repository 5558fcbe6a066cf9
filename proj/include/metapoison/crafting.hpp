#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "metapoison/losses.hpp"
#include "metapoison/models.hpp"
#include "metapoison/perturbation.hpp"

namespace metapoison {

struct CraftConfig {
  std::size_t craft_steps = 60;  // C
  std::size_t ensemble = 24;     // M
  std::size_t epoch_range = 24;  // T
  std::size_t unroll = 2;        // K
  double alpha = 0.1;            // inner SGD lr
  double beta = 200.0;           // initial outer lr, 0-255 pixel units
  double beta_decay = 10.0;
  std::size_t beta_period = 20;
  std::size_t batch_size = 125;
  double eps = 8.0;
  double eps_c = 0.04;
  std::size_t grid_size = 8;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t init_seed = 0;
  std::uint64_t shuffle_seed = 1;
  std::uint64_t craft_seed = 2;
  bool reinit = true;
  std::optional<double> watermark_opacity;
  bool fine_tune = false;  // single fixed pretrained surrogate
  std::size_t jobs = 1;

  void validate() const;
  double outer_lr(std::size_t step) const;
};

struct TraceRow {
  std::size_t step = 0;
  double lr = 0;
  double mean_adv_loss = 0;
  double seconds = 0;
  std::vector<std::size_t> member_epochs;
};

struct CraftTrace {
  std::vector<TraceRow> rows;
  void write_csv(const std::filesystem::path& path) const;
};

/// Pretraining epochs floor(m T / M) of each ensemble member.
std::vector<std::size_t> stagger_epochs(std::size_t members, std::size_t epoch_range);

/// Fresh members, each trained on clean data to its staggered epoch.
template <typename T>
std::vector<ModelState<T>> stagger_ensemble(const CraftConfig& cfg, const ArchSpec& arch, const LabeledSet& clean);

/// Shuffle seed of member `m`'s epoch `epoch` in reinit generation `gen`.
std::uint64_t member_shuffle_seed(const CraftConfig& cfg, std::size_t m, std::size_t gen, std::size_t epoch);
std::uint64_t member_init_seed(const CraftConfig& cfg, std::size_t m, std::size_t gen);

/// Same permutation train_epoch draws for `shuffle_seed`.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed);

template <typename T>
struct PoisonTensors {
  std::vector<Tensor<T>> bases;
  std::vector<Tensor<T>> grids;
  std::vector<Tensor<T>> deltas;
  std::vector<std::shared_ptr<const GridStencil<T>>> stencils;
};

template <typename T>
PoisonTensors<T> poison_tensors(const PoisonSet& poisons);

template <typename T>
struct MetaGradient {
  double adv_loss = 0;        // mean over the unrolled minibatches
  std::size_t batches = 0;    // minibatches that contained poisons
  std::vector<Tensor<T>> grid_grads;   // one per poison, zero if untouched
  std::vector<Tensor<T>> delta_grads;
};

/// Unrolls K SGD steps from `model` on one minibatch (rows of `data`, with
/// row r replaced by rendered poison slot[r] when slot[r] >= 0) and returns
/// the adversarial loss at the unrolled weights with its gradient w.r.t. the
/// grid and delta of every poison in the batch.
template <typename T>
MetaGradient<T> batch_meta_gradient(const ModelState<T>& model, const LabeledSet& data, const PoisonTensors<T>& poisons,
                                    std::span<const std::size_t> rows, std::span<const std::ptrdiff_t> slot,
                                    std::size_t unroll, double alpha, const AttackSpec& spec, const AdvBatch& adv);

/// Partial meta-gradients of every poison-carrying minibatch of one shuffled
/// epoch, concatenated per poison.
template <typename T>
MetaGradient<T> epoch_meta_gradient(const ModelState<T>& model, const LabeledSet& data, const PoisonSet& poisons,
                                    const PoisonTensors<T>& tensors, std::uint64_t shuffle_seed,
                                    const CraftConfig& cfg, const AttackSpec& spec, const AdvBatch& adv);

struct CraftResult {
  PoisonSet poisons;
  CraftTrace trace;
};

using CraftCallback = std::function<void(std::size_t step, const PoisonSet& poisons)>;

/// The outer loop: per step, every ensemble member contributes an epoch of
/// partial meta-gradients; the member average drives an Adam step on every
/// poison's (grid, delta), followed by projection. Members then advance one
/// clean epoch and are reinitialized after epoch T. `callback` runs after
/// each step.
CraftResult craft(const CraftConfig& cfg, const ArchSpec& arch, const AttackSpec& spec, const LabeledSet& data,
                  PoisonSet poisons, const ModelState<float>* pretrained = nullptr,
                  const CraftCallback& callback = {});

struct FeatureCollisionConfig {
  std::size_t iters = 200;
  double step = 0.05;
  double beta_fc = 0.1;
  double eps = 8.0;
};

/// Minimizes |phi(x) - phi(target)|^2 + beta_fc |x - base|^2 over x in the
/// eps box around base, by projected gradient descent with step halving.
/// Returns the additive perturbation.
Tensor<float> feature_collision_delta(const ModelState<float>& model, const Tensor<float>& base,
                                      const Tensor<float>& target, const FeatureCollisionConfig& cfg);

double feature_distance(const ModelState<float>& model, const Tensor<float>& a, const Tensor<float>& b);

/// Feature-collision poisons for every base of `poisons` (grids stay zero).
PoisonSet craft_feature_collision(const ModelState<float>& model, PoisonSet poisons, const Tensor<float>& target,
                                  const FeatureCollisionConfig& cfg);

}  // namespace metapoison
