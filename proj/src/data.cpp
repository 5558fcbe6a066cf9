#include "metapoison/data.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>

namespace metapoison {

const char* split_name(Split split) {
  switch (split) {
    case Split::kTrain: return "train";
    case Split::kValidation: return "validation";
    case Split::kTest: return "test";
  }
  return "unknown";
}

std::vector<std::size_t> LabeledSet::indices_of(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] == label) out.push_back(i);
  }
  return out;
}

void LabeledSet::validate() const {
  if (labels.empty()) throw ConfigError("labeled set is empty");
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("labeled set has a zero image dimension");
  if (num_classes < 2) throw ConfigError("labeled set needs at least 2 classes");
  if (images.size() != labels.size() * image_size()) {
    throw ConfigError("labeled set holds " + std::to_string(images.size()) + " pixels for " +
                      std::to_string(labels.size()) + " images of " + shape_str(image_shape()));
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= num_classes) {
      throw ConfigError("label " + std::to_string(l) + " out of range for " + std::to_string(num_classes) + " classes");
    }
  }
}

LabeledSet LabeledSet::subset(std::span<const std::size_t> indices) const {
  LabeledSet out = *this;
  out.images.clear();
  out.labels.clear();
  out.images.reserve(indices.size() * image_size());
  for (std::size_t i : indices) {
    if (i >= size()) throw ConfigError("subset index " + std::to_string(i) + " out of range");
    auto img = image(i);
    out.images.insert(out.images.end(), img.begin(), img.end());
    out.labels.push_back(labels[i]);
  }
  return out;
}

template <typename T>
Tensor<T> gather_images(const LabeledSet& data, std::span<const std::size_t> indices) {
  Tensor<T> out(Shape{indices.size(), data.height, data.width, data.channels});
  const std::size_t sz = data.image_size();
  for (std::size_t b = 0; b < indices.size(); ++b) {
    auto img = data.image(indices[b]);
    std::copy(img.begin(), img.end(), out.data() + b * sz);
  }
  return out;
}

template Tensor<float> gather_images<float>(const LabeledSet&, std::span<const std::size_t>);
template Tensor<double> gather_images<double>(const LabeledSet&, std::span<const std::size_t>);

LabeledSet load_cifar_binary(std::span<const std::filesystem::path> paths, Split split) {
  LabeledSet out;
  out.height = 32;
  out.width = 32;
  out.channels = 3;
  out.num_classes = 10;
  out.split = split;
  for (const auto& path : paths) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open CIFAR batch " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (bytes.size() % kCifarRecordBytes != 0) {
      throw ConfigError("truncated CIFAR record in " + path.string() + ": " + std::to_string(bytes.size()) +
                        " bytes is not a multiple of " + std::to_string(kCifarRecordBytes));
    }
    const std::size_t records = bytes.size() / kCifarRecordBytes;
    for (std::size_t r = 0; r < records; ++r) {
      const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
      if (rec[0] > 9) {
        throw ConfigError("CIFAR label " + std::to_string(rec[0]) + " > 9 in record " + std::to_string(r) + " of " +
                          path.string());
      }
      out.labels.push_back(rec[0]);
      const unsigned char* planes = rec + 1;
      for (std::size_t p = 0; p < 1024; ++p) {
        for (std::size_t c = 0; c < 3; ++c) {
          out.images.push_back(static_cast<float>(planes[c * 1024 + p]) / 255.0f);
        }
      }
    }
  }
  return out;
}

void write_cifar_binary(const LabeledSet& data, const std::filesystem::path& path) {
  if (data.height != 32 || data.width != 32 || data.channels != 3) {
    throw ConfigError("CIFAR record format needs 32x32x3 images, got " + shape_str(data.image_shape()));
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  std::vector<unsigned char> rec(kCifarRecordBytes);
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data.labels[i] < 0 || data.labels[i] > 255) throw ConfigError("label does not fit in a byte");
    rec[0] = static_cast<unsigned char>(data.labels[i]);
    auto img = data.image(i);
    for (std::size_t p = 0; p < 1024; ++p) {
      for (std::size_t c = 0; c < 3; ++c) {
        const float v = std::clamp(img[p * 3 + c], 0.0f, 1.0f);
        rec[1 + c * 1024 + p] = static_cast<unsigned char>(std::lround(v * 255.0f));
      }
    }
    out.write(reinterpret_cast<const char*>(rec.data()), static_cast<std::streamsize>(rec.size()));
  }
}

double mean_pixel(const LabeledSet& data) {
  if (data.images.empty()) return 0.0;
  double total = 0.0;
  for (float v : data.images) total += v;
  return total / static_cast<double>(data.images.size());
}

namespace {

constexpr std::size_t kBlobsPerClass = 3;

bool means_separated(const std::vector<std::vector<float>>& means) {
  for (std::size_t a = 0; a < means.size(); ++a) {
    for (std::size_t b = a + 1; b < means.size(); ++b) {
      std::size_t far = 0;
      for (std::size_t i = 0; i < means[a].size(); ++i) {
        if (std::abs(means[a][i] - means[b][i]) >= 0.3f) ++far;
      }
      if (4 * far < means[a].size()) return false;
    }
  }
  return true;
}

}  // namespace

std::vector<std::vector<float>> synth_class_means(const SynthOptions& o) {
  if (o.classes < 2 || o.height == 0 || o.width == 0 || o.channels == 0) {
    throw ConfigError("synthetic dataset needs >= 2 classes and nonzero image dims");
  }
  std::mt19937_64 rng(o.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const std::size_t sz = o.height * o.width * o.channels;
  // Redraw until every pair of class means differs by >= 0.3 in >= 25% of entries.
  for (int attempt = 0; attempt < 1000; ++attempt) {
    std::vector<std::vector<float>> means(o.classes, std::vector<float>(sz));
    for (auto& mean : means) {
      std::vector<double> acc(sz, 0.5);
      for (std::size_t k = 0; k < kBlobsPerClass; ++k) {
        const double cy = u01(rng) * static_cast<double>(o.height);
        const double cx = u01(rng) * static_cast<double>(o.width);
        const double sigma = (0.15 + 0.2 * u01(rng)) * static_cast<double>(std::max(o.height, o.width));
        std::vector<double> color(o.channels);
        for (auto& c : color) c = (u01(rng) - 0.5) * 1.2;
        for (std::size_t y = 0; y < o.height; ++y) {
          for (std::size_t x = 0; x < o.width; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
            const double w = std::exp(-(dy * dy + dx * dx) / (2 * sigma * sigma));
            for (std::size_t c = 0; c < o.channels; ++c) acc[(y * o.width + x) * o.channels + c] += w * color[c];
          }
        }
      }
      for (std::size_t i = 0; i < sz; ++i) mean[i] = static_cast<float>(std::clamp(acc[i], 0.05, 0.95));
    }
    if (means_separated(means)) return means;
  }
  throw InvariantError("could not draw separated class means");
}

LabeledSet synth_dataset(const SynthOptions& o, std::optional<std::uint64_t> sample_seed) {
  const auto means = synth_class_means(o);
  LabeledSet out;
  out.height = o.height;
  out.width = o.width;
  out.channels = o.channels;
  out.num_classes = o.classes;
  out.split = o.split;
  const std::uint64_t seed = sample_seed.value_or(o.seed * 1000003ULL + 17 + static_cast<std::uint64_t>(o.split));
  std::mt19937_64 rng(seed);
  if (o.contrast_min < 0 || o.contrast_max < o.contrast_min) throw ConfigError("synthetic contrast range is invalid");
  std::normal_distribution<double> noise(0.0, o.noise);
  std::uniform_real_distribution<double> contrast(o.contrast_min, o.contrast_max);
  const std::size_t sz = out.image_size();
  out.images.reserve(o.n_per_class * o.classes * sz);
  for (std::size_t i = 0; i < o.n_per_class; ++i) {
    for (std::size_t c = 0; c < o.classes; ++c) {
      out.labels.push_back(static_cast<int>(c));
      const double a = o.contrast_min == o.contrast_max ? o.contrast_min : contrast(rng);
      for (std::size_t p = 0; p < sz; ++p) {
        const double v = 0.5 + a * (means[c][p] - 0.5) + noise(rng);
        out.images.push_back(static_cast<float>(std::clamp(v, 0.0, 1.0)));
      }
    }
  }
  return out;
}

std::size_t poison_count(std::size_t n_total, double budget) {
  if (budget < 0.0 || budget > 1.0) throw ConfigError("poison budget must be in [0, 1]");
  return static_cast<std::size_t>(std::floor(budget * static_cast<double>(n_total) + 0.5));
}

std::vector<std::size_t> select_poison_bases(const LabeledSet& data, int poison_class, double budget) {
  const std::size_t n = poison_count(data.size(), budget);
  std::vector<std::size_t> members = data.indices_of(poison_class);
  if (n > members.size()) {
    throw InfeasibleError("budget needs " + std::to_string(n) + " poisons but class " + std::to_string(poison_class) +
                          " has " + std::to_string(members.size()) + " members");
  }
  members.resize(n);
  return members;
}

std::vector<std::size_t> select_poison_bases_multiclass(const LabeledSet& data, double budget,
                                                        std::optional<int> exclude) {
  const std::size_t n = poison_count(data.size(), budget);
  std::vector<int> classes;
  for (std::size_t c = 0; c < data.num_classes; ++c) {
    if (!exclude || static_cast<int>(c) != *exclude) classes.push_back(static_cast<int>(c));
  }
  std::vector<std::size_t> out;
  for (std::size_t k = 0; k < classes.size(); ++k) {
    const std::size_t share = n / classes.size() + (k < n % classes.size() ? 1 : 0);
    auto members = data.indices_of(classes[k]);
    if (share > members.size()) {
      throw InfeasibleError("multiclass budget needs " + std::to_string(share) + " poisons from class " +
                            std::to_string(classes[k]));
    }
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(share));
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<std::size_t> sample_positions(std::size_t n, std::size_t m, std::uint64_t seed) {
  if (m > n) throw ConfigError("cannot sample " + std::to_string(m) + " of " + std::to_string(n));
  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(all.begin(), all.end(), rng);
  all.resize(m);
  std::sort(all.begin(), all.end());
  return all;
}

}  // namespace metapoison
