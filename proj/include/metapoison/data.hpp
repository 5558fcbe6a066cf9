#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metapoison/tensor.hpp"

namespace metapoison {

enum class Split { kTrain, kValidation, kTest };

const char* split_name(Split split);

/// Images (N, H, W, C) with pixels in [0, 1] and integer labels.
struct LabeledSet {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 0;
  std::size_t num_classes = 0;
  std::vector<float> images;
  std::vector<int> labels;
  Split split = Split::kTrain;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return height * width * channels; }
  Shape image_shape() const { return {height, width, channels}; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * image_size(), image_size());
  }
  std::span<float> image(std::size_t i) {
    return std::span<float>(images).subspan(i * image_size(), image_size());
  }
  /// Indices of all examples of class `label`, in dataset order.
  std::vector<std::size_t> indices_of(int label) const;
  /// Throws ConfigError if shapes or labels are inconsistent.
  void validate() const;
  LabeledSet subset(std::span<const std::size_t> indices) const;
};

/// Stacks the selected images into a (B, H, W, C) tensor.
template <typename T>
Tensor<T> gather_images(const LabeledSet& data, std::span<const std::size_t> indices);

template <typename T>
Tensor<T> image_tensor(const LabeledSet& data, std::size_t index) {
  const std::size_t idx[1] = {index};
  return gather_images<T>(data, idx).reshaped(data.image_shape());
}

inline constexpr std::size_t kCifarImageBytes = 3 * 32 * 32;
inline constexpr std::size_t kCifarRecordBytes = 1 + kCifarImageBytes;

/// Parses CIFAR-10 binary batches: records of one label byte followed by
/// 3 x 1024 channel-planar pixels (R plane, G plane, B plane). Pixels are
/// scaled by 1/255 and stored HWC.
LabeledSet load_cifar_binary(std::span<const std::filesystem::path> paths, Split split = Split::kTrain);

/// Writes any 32x32x3 set (labels < 256) in the same record format.
void write_cifar_binary(const LabeledSet& data, const std::filesystem::path& path);

/// Mean pixel value; CIFAR training data should land in [0.4, 0.55].
double mean_pixel(const LabeledSet& data);

struct SynthOptions {
  std::uint64_t seed = 0;
  std::size_t n_per_class = 250;
  std::size_t classes = 2;
  std::size_t height = 8;
  std::size_t width = 8;
  std::size_t channels = 3;
  double noise = 0.1;
  // Per-example contrast a ~ U[contrast_min, contrast_max]: x = 0.5 + a (mean - 0.5) + noise.
  double contrast_min = 1.0;
  double contrast_max = 1.0;
  Split split = Split::kTrain;
};

/// Class-conditional Gaussian-blob images: each class has a mean pattern made
/// of a few colored Gaussian blobs on mid gray; each example scales the
/// pattern's contrast against gray by a random factor, adds i.i.d. pixel
/// noise and is clamped to [0, 1]. Class patterns depend only on `seed`, so sets drawn
/// with the same seed and a different `sample_seed` share classes.
LabeledSet synth_dataset(const SynthOptions& options, std::optional<std::uint64_t> sample_seed = std::nullopt);

/// Per-class mean patterns used by synth_dataset (classes x H*W*C).
std::vector<std::vector<float>> synth_class_means(const SynthOptions& options);

/// Number of poisons for a budget fraction of N, rounding half up.
std::size_t poison_count(std::size_t n_total, double budget);

/// First round(budget * N) examples of `poison_class` in dataset order.
std::vector<std::size_t> select_poison_bases(const LabeledSet& data, int poison_class, double budget);

/// Multiclass plan: round(budget * N) poisons spread evenly over every class
/// except `exclude` (if given), first members of each class; leftover slots
/// go to the lowest class ids.
std::vector<std::size_t> select_poison_bases_multiclass(const LabeledSet& data, double budget,
                                                        std::optional<int> exclude = std::nullopt);

/// Deterministic uniform subset of m positions out of n (sorted ascending).
std::vector<std::size_t> sample_positions(std::size_t n, std::size_t m, std::uint64_t seed);

}  // namespace metapoison
