#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "metapoison/data.hpp"
#include "metapoison/graph.hpp"

namespace metapoison {

enum class ArchKind { kMlp, kConvNet };

/// Classifier layout. MLP: flatten -> hidden relu layers -> linear head (no
/// hidden layers gives a linear model whose features are the raw pixels).
/// ConvNet: per block 3x3 conv (pad 1) + relu + 2x2 max pool, then global
/// average pooling, a dense relu layer (the penultimate features) and a
/// linear head.
struct ArchSpec {
  ArchKind kind = ArchKind::kMlp;
  std::vector<std::size_t> hidden{64, 64};
  std::vector<std::size_t> conv_channels{16, 32, 32};
  std::size_t dense_width = 64;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 3;
  std::size_t num_classes = 2;

  void validate() const;
  std::size_t input_size() const { return height * width * channels; }
  std::size_t feature_dim() const;
  /// Analytic parameter count implied by the layout.
  std::size_t parameter_count() const;
  bool operator==(const ArchSpec&) const = default;
};

const char* arch_kind_name(ArchKind kind);
ArchKind parse_arch_kind(const std::string& name);

/// Parameter names and shapes in canonical (lexicographic) order.
std::vector<std::pair<std::string, Shape>> parameter_layout(const ArchSpec& arch);

template <typename T>
struct ModelState {
  ArchSpec arch;
  std::vector<std::string> names;
  std::vector<Tensor<T>> params;
  std::vector<Tensor<T>> velocity;  // momentum buffers; empty until used
  std::size_t epoch = 0;
  std::uint64_t init_seed = 0;

  std::size_t parameter_count() const;

  template <typename U>
  ModelState<U> cast() const {
    ModelState<U> out;
    out.arch = arch;
    out.names = names;
    out.epoch = epoch;
    out.init_seed = init_seed;
    for (const auto& p : params) out.params.push_back(p.template cast<U>());
    for (const auto& v : velocity) out.velocity.push_back(v.template cast<U>());
    return out;
  }
};

/// He-uniform weights, zero biases; bitwise reproducible per (arch, seed).
template <typename T>
ModelState<T> init_model(const ArchSpec& arch, std::uint64_t seed);

template <typename T>
struct ForwardResult {
  Var logits;                // (B, num_classes)
  Var penultimate;           // (B, feature_dim)
  std::vector<Var> layers;   // post-activation output of every hidden layer
};

/// Records the classifier on `graph` using parameter nodes `params`
/// (canonical order), so the parameters may themselves be graph outputs,
/// e.g. unrolled SGD iterates.
template <typename T>
ForwardResult<T> forward(Graph<T>& graph, const ArchSpec& arch, std::span<const Var> params, Var batch);

/// Registers the state's parameters on `graph` (as trainable leaves or
/// constants) and runs forward.
template <typename T>
std::vector<Var> bind_parameters(Graph<T>& graph, const ModelState<T>& state, bool trainable);

template <typename T>
ForwardResult<T> forward(const ModelState<T>& state, Var batch, Graph<T>& graph);

/// Logits of a plain batch without keeping a graph.
template <typename T>
Tensor<T> predict_logits(const ModelState<T>& state, const Tensor<T>& batch);

struct TrainOptions {
  double lr = 0.1;
  std::size_t batch_size = 125;
  std::uint64_t shuffle_seed = 0;
  bool augment = false;
  double momentum = 0.0;      // 0 disables momentum
  double weight_decay = 0.0;  // L2 coefficient added to gradients
};

/// Random crop from a 4-pixel zero padding plus horizontal flip with
/// probability 1/2; modifies `images` (B, H, W, C) in place.
template <typename T>
void augment_batch(Tensor<T>& images, std::mt19937_64& rng);

/// One shuffled pass of minibatch SGD over `data`; the final partial batch is
/// kept. Returns the new state with epoch + 1.
template <typename T>
ModelState<T> train_epoch(ModelState<T> state, const LabeledSet& data, const TrainOptions& options,
                          double* mean_loss = nullptr);

/// Same, but over an explicit image tensor (N, H, W, C) and labels, used when
/// some training images are replaced by poisons.
template <typename T>
ModelState<T> train_epoch(ModelState<T> state, const Tensor<T>& images, std::span<const int> labels,
                          const TrainOptions& options, double* mean_loss = nullptr);

/// Fraction of `data` classified correctly.
template <typename T>
double accuracy(const ModelState<T>& state, const LabeledSet& data);

/// Flat checkpoint: u32 little-endian length, UTF-8 JSON descriptor (arch,
/// epoch, seed, tensor names/shapes), then each tensor as little-endian f32
/// in canonical name order.
void save_checkpoint(const ModelState<float>& state, const std::filesystem::path& path);
ModelState<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace metapoison
