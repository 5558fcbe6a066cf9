#include "metapoison/models.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "metapoison/json_io.hpp"

namespace metapoison {

namespace {

std::string layer_name(std::size_t i, const char* what) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "layer%02zu.%s", i, what);
  return buf;
}

// Dense layer: x (B, in) * W (in, out) + b.
template <typename T>
Var dense(Graph<T>& g, Var x, Var weight, Var bias) {
  const Var y = g.matmul(x, weight);
  return g.add(y, g.broadcast_axis(bias, 0, g.shape(y)[0]));
}

}  // namespace

const char* arch_kind_name(ArchKind kind) { return kind == ArchKind::kMlp ? "mlp" : "convnet"; }

ArchKind parse_arch_kind(const std::string& name) {
  if (name == "mlp") return ArchKind::kMlp;
  if (name == "convnet") return ArchKind::kConvNet;
  throw ConfigError("unknown architecture kind '" + name + "'");
}

void ArchSpec::validate() const {
  if (num_classes < 2) throw ConfigError("arch: num_classes must be >= 2");
  if (height == 0 || width == 0 || channels == 0) throw ConfigError("arch: input dims must be >= 1");
  if (kind == ArchKind::kMlp) {
    for (auto w : hidden) {
      if (w == 0) throw ConfigError("arch: zero-width hidden layer");
    }
  } else {
    if (conv_channels.empty()) throw ConfigError("arch: convnet needs at least one conv block");
    if (dense_width == 0) throw ConfigError("arch: zero-width dense layer");
    std::size_t h = height, w = width;
    for (auto c : conv_channels) {
      if (c == 0) throw ConfigError("arch: zero-channel conv block");
      if (h < 2 || w < 2) throw ConfigError("arch: input too small for the number of pooling blocks");
      h /= 2;
      w /= 2;
    }
  }
}

std::size_t ArchSpec::feature_dim() const {
  if (kind == ArchKind::kConvNet) return dense_width;
  return hidden.empty() ? input_size() : hidden.back();
}

std::vector<std::pair<std::string, Shape>> parameter_layout(const ArchSpec& arch) {
  arch.validate();
  std::vector<std::pair<std::string, Shape>> out;
  std::size_t layer = 0;
  auto add_dense = [&](std::size_t in, std::size_t width) {
    out.push_back({layer_name(layer, "bias"), {width}});
    out.push_back({layer_name(layer, "weight"), {in, width}});
    ++layer;
  };
  if (arch.kind == ArchKind::kMlp) {
    std::size_t in = arch.input_size();
    for (auto w : arch.hidden) {
      add_dense(in, w);
      in = w;
    }
    add_dense(in, arch.num_classes);
  } else {
    std::size_t in = arch.channels;
    for (auto c : arch.conv_channels) {
      out.push_back({layer_name(layer, "bias"), {c}});
      out.push_back({layer_name(layer, "weight"), {3, 3, in, c}});
      ++layer;
      in = c;
    }
    add_dense(in, arch.dense_width);
    add_dense(arch.dense_width, arch.num_classes);
  }
  return out;
}

std::size_t ArchSpec::parameter_count() const {
  std::size_t total = 0;
  if (kind == ArchKind::kMlp) {
    std::size_t in = input_size();
    for (auto w : hidden) {
      total += in * w + w;
      in = w;
    }
    total += in * num_classes + num_classes;
  } else {
    std::size_t in = channels;
    for (auto c : conv_channels) {
      total += 9 * in * c + c;
      in = c;
    }
    total += in * dense_width + dense_width;
    total += dense_width * num_classes + num_classes;
  }
  return total;
}

template <typename T>
std::size_t ModelState<T>::parameter_count() const {
  std::size_t total = 0;
  for (const auto& p : params) total += p.size();
  return total;
}

template <typename T>
ModelState<T> init_model(const ArchSpec& arch, std::uint64_t seed) {
  ModelState<T> state;
  state.arch = arch;
  state.init_seed = seed;
  std::mt19937_64 rng(seed);
  for (auto& [name, shape] : parameter_layout(arch)) {
    Tensor<T> t(shape);
    if (name.ends_with(".weight")) {
      const std::size_t fan_out = shape.back();
      const std::size_t fan_in = t.size() / fan_out;
      const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> u(-limit, limit);
      for (auto& v : t.storage()) v = static_cast<T>(u(rng));
    }
    state.names.push_back(name);
    state.params.push_back(std::move(t));
  }
  return state;
}

template <typename T>
ForwardResult<T> forward(Graph<T>& g, const ArchSpec& arch, std::span<const Var> params, Var batch) {
  const auto layout = parameter_layout(arch);
  if (params.size() != layout.size()) {
    throw ShapeError("forward: expected " + std::to_string(layout.size()) + " parameter tensors, got " +
                     std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (g.shape(params[i]) != layout[i].second) {
      throw ShapeError("forward: parameter " + layout[i].first + " has shape " + shape_str(g.shape(params[i])) +
                       ", expected " + shape_str(layout[i].second));
    }
  }
  const Shape& xs = g.shape(batch);
  if (xs.size() != 4 || xs[1] != arch.height || xs[2] != arch.width || xs[3] != arch.channels) {
    throw ShapeError("forward: batch shape " + shape_str(xs) + " does not match input (B, " +
                     std::to_string(arch.height) + ", " + std::to_string(arch.width) + ", " +
                     std::to_string(arch.channels) + ")");
  }
  const std::size_t batch_n = xs[0];
  auto bias = [&](std::size_t layer) { return params[2 * layer]; };
  auto weight = [&](std::size_t layer) { return params[2 * layer + 1]; };

  ForwardResult<T> out;
  std::size_t layer = 0;
  Var h;
  if (arch.kind == ArchKind::kMlp) {
    h = g.reshape(batch, {batch_n, arch.input_size()});
    for (std::size_t i = 0; i < arch.hidden.size(); ++i, ++layer) {
      h = g.relu(dense(g, h, weight(layer), bias(layer)));
      out.layers.push_back(h);
    }
  } else {
    h = batch;
    for (std::size_t i = 0; i < arch.conv_channels.size(); ++i, ++layer) {
      const Var c = g.conv2d(h, weight(layer), Conv2dParams{1, 1});
      const Shape cs = g.shape(c);
      const std::size_t rows = cs[0] * cs[1] * cs[2];
      Var flat = g.reshape(c, {rows, cs[3]});
      flat = g.add(flat, g.broadcast_axis(bias(layer), 0, rows));
      h = g.max_pool2x2(g.relu(g.reshape(flat, cs)));
      out.layers.push_back(h);
    }
    const Shape hs = g.shape(h);
    const Var spatial = g.reshape(h, {hs[0], hs[1] * hs[2], hs[3]});
    h = g.scale(g.sum_axis(spatial, 1), T{1} / static_cast<T>(hs[1] * hs[2]));
    h = g.relu(dense(g, h, weight(layer), bias(layer)));
    out.layers.push_back(h);
    ++layer;
  }
  out.penultimate = h;
  out.logits = dense(g, h, weight(layer), bias(layer));
  return out;
}

template <typename T>
std::vector<Var> bind_parameters(Graph<T>& g, const ModelState<T>& state, bool trainable) {
  std::vector<Var> vars;
  vars.reserve(state.params.size());
  for (const auto& p : state.params) vars.push_back(trainable ? g.parameter(p) : g.constant(p));
  return vars;
}

template <typename T>
ForwardResult<T> forward(const ModelState<T>& state, Var batch, Graph<T>& g) {
  const auto vars = bind_parameters(g, state, false);
  return forward(g, state.arch, vars, batch);
}

template <typename T>
Tensor<T> predict_logits(const ModelState<T>& state, const Tensor<T>& batch) {
  Graph<T> g;
  const Var x = g.constant(batch);
  return g.value(forward(state, x, g).logits);
}

template <typename T>
void augment_batch(Tensor<T>& images, std::mt19937_64& rng) {
  constexpr std::ptrdiff_t kPad = 4;
  const std::size_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
  std::uniform_int_distribution<std::ptrdiff_t> shift(-kPad, kPad);
  std::bernoulli_distribution flip(0.5);
  std::vector<T> src(h * w * c);
  for (std::size_t b = 0; b < n; ++b) {
    T* img = images.data() + b * h * w * c;
    std::copy(img, img + src.size(), src.begin());
    const std::ptrdiff_t dy = shift(rng), dx = shift(rng);
    const bool mirror = flip(rng);
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t xm = mirror ? w - 1 - x : x;
        const std::ptrdiff_t sy = static_cast<std::ptrdiff_t>(y) + dy;
        const std::ptrdiff_t sx = static_cast<std::ptrdiff_t>(xm) + dx;
        const bool inside = sy >= 0 && sx >= 0 && sy < static_cast<std::ptrdiff_t>(h) &&
                            sx < static_cast<std::ptrdiff_t>(w);
        for (std::size_t ch = 0; ch < c; ++ch) {
          img[(y * w + x) * c + ch] =
              inside ? src[(static_cast<std::size_t>(sy) * w + static_cast<std::size_t>(sx)) * c + ch] : T{0};
        }
      }
    }
  }
}

template <typename T>
ModelState<T> train_epoch(ModelState<T> state, const Tensor<T>& images, std::span<const int> labels,
                          const TrainOptions& options, double* mean_loss) {
  const std::size_t n = labels.size();
  if (n == 0) throw ConfigError("train_epoch: empty training set");
  if (images.rank() != 4 || images.dim(0) != n) throw ShapeError("train_epoch: images do not match labels");
  if (options.batch_size == 0 || options.batch_size > n) {
    throw ConfigError("train_epoch: batch size " + std::to_string(options.batch_size) + " exceeds data size " +
                      std::to_string(n));
  }
  if (options.lr < 0) throw ConfigError("train_epoch: learning rate must be >= 0");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(options.shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);

  const bool use_momentum = options.momentum != 0.0;
  if (use_momentum && state.velocity.empty()) {
    for (const auto& p : state.params) state.velocity.emplace_back(p.shape());
  }
  const T lr = static_cast<T>(options.lr);
  const T mu = static_cast<T>(options.momentum);
  const T wd = static_cast<T>(options.weight_decay);
  const std::size_t row = images.size() / n;

  double loss_total = 0.0;
  for (std::size_t start = 0; start < n; start += options.batch_size) {
    const std::size_t end = std::min(n, start + options.batch_size);
    Tensor<T> batch(Shape{end - start, images.dim(1), images.dim(2), images.dim(3)});
    std::vector<int> batch_labels;
    for (std::size_t i = start; i < end; ++i) {
      std::copy_n(images.data() + order[i] * row, row, batch.data() + (i - start) * row);
      batch_labels.push_back(labels[order[i]]);
    }
    if (options.augment) augment_batch(batch, rng);

    Graph<T> g;
    const auto vars = bind_parameters(g, state, true);
    const Var x = g.constant(std::move(batch));
    const Var loss = g.mean(g.softmax_xent(forward(g, state.arch, vars, x).logits, batch_labels));
    loss_total += static_cast<double>(g.value(loss).item()) * static_cast<double>(end - start);
    const auto grads = g.gradients(loss, vars);
    for (std::size_t k = 0; k < state.params.size(); ++k) {
      auto& p = state.params[k];
      const auto& gr = grads[k];
      if (use_momentum) {
        auto& v = state.velocity[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
          v[i] = mu * v[i] + gr[i] + wd * p[i];
          p[i] -= lr * v[i];
        }
      } else {
        for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (gr[i] + wd * p[i]);
      }
    }
  }
  if (mean_loss) *mean_loss = loss_total / static_cast<double>(n);
  ++state.epoch;
  return state;
}

template <typename T>
ModelState<T> train_epoch(ModelState<T> state, const LabeledSet& data, const TrainOptions& options,
                          double* mean_loss) {
  if (data.size() == 0) throw ConfigError("train_epoch: empty training set");
  Tensor<T> images(Shape{data.size(), data.height, data.width, data.channels},
                   std::vector<T>(data.images.begin(), data.images.end()));
  return train_epoch(std::move(state), images, data.labels, options, mean_loss);
}

template <typename T>
double accuracy(const ModelState<T>& state, const LabeledSet& data) {
  constexpr std::size_t kChunk = 500;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.size(); start += kChunk) {
    const std::size_t end = std::min(data.size(), start + kChunk);
    std::vector<std::size_t> idx(end - start);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor<T> logits = predict_logits(state, gather_images<T>(data, idx));
    const std::size_t classes = logits.dim(1);
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const T* row = logits.data() + r * classes;
      const auto pred = static_cast<int>(std::max_element(row, row + classes) - row);
      if (pred == data.labels[start + r]) ++correct;
    }
  }
  return data.size() ? static_cast<double>(correct) / static_cast<double>(data.size()) : 0.0;
}

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                     static_cast<char>((v >> 16) & 0xff), static_cast<char>((v >> 24) & 0xff)};
  out.write(b, 4);
}

std::uint32_t get_u32(std::istream& in) {
  unsigned char b[4];
  if (!in.read(reinterpret_cast<char*>(b), 4)) throw ConfigError("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace

void save_checkpoint(const ModelState<float>& state, const std::filesystem::path& path) {
  nlohmann::json header;
  header["arch"] = state.arch;
  header["epoch"] = state.epoch;
  header["init_seed"] = state.init_seed;
  header["tensors"] = nlohmann::json::array();
  for (std::size_t i = 0; i < state.params.size(); ++i) {
    header["tensors"].push_back({{"name", state.names[i]}, {"shape", state.params[i].shape()}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : state.params) {
    for (float v : p.values()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
}

ModelState<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open checkpoint " + path.string());
  const std::uint32_t len = get_u32(in);
  std::string text(len, '\0');
  if (!in.read(text.data(), len)) throw ConfigError("checkpoint header truncated");
  const auto header = nlohmann::json::parse(text);
  ModelState<float> state;
  state.arch = header.at("arch").get<ArchSpec>();
  state.epoch = header.at("epoch").get<std::size_t>();
  state.init_seed = header.at("init_seed").get<std::uint64_t>();
  const auto layout = parameter_layout(state.arch);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != layout.size()) throw ConfigError("checkpoint tensor list does not match arch");
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto name = tensors[i].at("name").get<std::string>();
    const auto shape = tensors[i].at("shape").get<Shape>();
    if (name != layout[i].first || shape != layout[i].second) {
      throw ConfigError("checkpoint tensor " + name + " does not match arch layout");
    }
    Tensor<float> t(shape);
    for (auto& v : t.storage()) v = std::bit_cast<float>(get_u32(in));
    state.names.push_back(name);
    state.params.push_back(std::move(t));
  }
  return state;
}

#define METAPOISON_INSTANTIATE(T)                                                                              \
  template struct ModelState<T>;                                                                               \
  template ModelState<T> init_model<T>(const ArchSpec&, std::uint64_t);                                        \
  template ForwardResult<T> forward<T>(Graph<T>&, const ArchSpec&, std::span<const Var>, Var);                 \
  template std::vector<Var> bind_parameters<T>(Graph<T>&, const ModelState<T>&, bool);                         \
  template ForwardResult<T> forward<T>(const ModelState<T>&, Var, Graph<T>&);                                  \
  template Tensor<T> predict_logits<T>(const ModelState<T>&, const Tensor<T>&);                                \
  template void augment_batch<T>(Tensor<T>&, std::mt19937_64&);                                                \
  template ModelState<T> train_epoch<T>(ModelState<T>, const Tensor<T>&, std::span<const int>,                 \
                                        const TrainOptions&, double*);                                         \
  template ModelState<T> train_epoch<T>(ModelState<T>, const LabeledSet&, const TrainOptions&, double*);       \
  template double accuracy<T>(const ModelState<T>&, const LabeledSet&);

METAPOISON_INSTANTIATE(float)
METAPOISON_INSTANTIATE(double)
#undef METAPOISON_INSTANTIATE

}  // namespace metapoison
