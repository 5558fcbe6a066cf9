#include "metapoison/perturbation.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>

#include "metapoison/hashing.hpp"

namespace metapoison {

template <typename T>
T representable_bound(double bound) {
  T b = static_cast<T>(bound);
  if (static_cast<double>(b) > bound) b = std::nextafter(b, T{0});
  return b;
}

template <typename T>
PerturbationParams<T> PerturbationParams<T>::zeros(const Shape& image_shape, std::size_t grid_size, double eps,
                                                   double eps_c) {
  if (grid_size < 2) throw ConfigError("color grid needs at least 2 cells per axis");
  if (eps < 0 || eps_c < 0) throw ConfigError("perturbation bounds must be >= 0");
  return {Tensor<T>(Shape{grid_size, grid_size, grid_size, 3}), Tensor<T>(image_shape), eps, eps_c};
}

template <typename T>
std::shared_ptr<const GridStencil<T>> color_stencil(const Tensor<T>& base, std::size_t grid_size) {
  if (base.rank() < 1 || base.shape().back() != 3) {
    throw ShapeError("color grid needs 3-channel images, got " + shape_str(base.shape()));
  }
  return std::make_shared<const GridStencil<T>>(GridStencil<T>::build(base.values(), grid_size, base.shape()));
}

template <typename T>
Var render(Graph<T>& g, const Tensor<T>& base, Var grid, Var delta, std::shared_ptr<const GridStencil<T>> stencil) {
  const Var shifted = g.add(g.constant(base), g.grid_sample(grid, std::move(stencil)));
  return g.clamp(g.add(shifted, delta), T{0}, T{1});
}

template <typename T>
Tensor<T> apply(const Tensor<T>& base, const PerturbationParams<T>& p) {
  Graph<T> g;
  return g.value(render(g, base, g.constant(p.grid), g.constant(p.delta), color_stencil(base, p.grid_size())));
}

template <typename T>
Tensor<T> color_displacement(const Tensor<T>& base, const Tensor<T>& grid) {
  Graph<T> g;
  return g.value(g.grid_sample(g.constant(grid), color_stencil(base, grid.dim(0))));
}

template <typename T>
PerturbationParams<T> project(PerturbationParams<T> p) {
  const T d = representable_bound<T>(p.eps / 255.0);
  const T c = representable_bound<T>(p.eps_c);
  for (auto& v : p.delta.storage()) v = std::clamp(v, -d, d);
  for (auto& v : p.grid.storage()) v = std::clamp(v, -c, c);
  return p;
}

template <typename T>
Tensor<T> watermark(const Tensor<T>& base, const Tensor<T>& target, double opacity) {
  if (base.shape() != target.shape()) {
    throw ShapeError("watermark: base " + shape_str(base.shape()) + " vs target " + shape_str(target.shape()));
  }
  if (opacity < 0 || opacity > 1) throw ConfigError("watermark opacity must be in [0, 1]");
  Tensor<T> out(base.shape());
  const T a = static_cast<T>(opacity), b = static_cast<T>(1.0 - opacity);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * target[i] + b * base[i];
  return out;
}

std::string feasibility_violation(const Tensor<float>& base, const PerturbationParams<float>& p,
                                  const Tensor<float>& rendered) {
  const double d = p.eps / 255.0;
  for (float v : p.delta.values()) {
    if (!(std::abs(static_cast<double>(v)) <= d)) return "delta entry " + std::to_string(v) + " exceeds eps/255";
  }
  for (float v : p.grid.values()) {
    if (!(std::abs(static_cast<double>(v)) <= p.eps_c)) return "grid entry " + std::to_string(v) + " exceeds eps_c";
  }
  // Color displacement evaluated in double so rounding cannot hide a violation.
  const auto disp = color_displacement(base.cast<double>(), p.grid.cast<double>());
  for (double v : disp.values()) {
    if (!(std::abs(v) <= p.eps_c)) return "pixel color displacement " + std::to_string(v) + " exceeds eps_c";
  }
  for (float v : rendered.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) return "rendered pixel " + std::to_string(v) + " outside [0, 1]";
  }
  return {};
}

void PoisonSet::render_all() {
  rendered.clear();
  for (std::size_t i = 0; i < size(); ++i) rendered.push_back(apply(bases[i], params[i]));
}

void PoisonSet::check_feasible() const {
  if (bases.size() != size() || params.size() != size() || rendered.size() != size() || labels.size() != size()) {
    throw InvariantError("poison set fields have inconsistent lengths");
  }
  for (std::size_t i = 0; i < size(); ++i) {
    const auto why = feasibility_violation(bases[i], params[i], rendered[i]);
    if (!why.empty()) throw InvariantError("poison " + std::to_string(i) + ": " + why);
    if (!(apply(bases[i], params[i]) == rendered[i])) {
      throw InvariantError("poison " + std::to_string(i) + ": rendered cache is stale");
    }
  }
}

PoisonSet make_poison_set(const LabeledSet& data, std::vector<std::size_t> base_indices, const PoisonInit& init) {
  PoisonSet set;
  for (std::size_t idx : base_indices) {
    if (idx >= data.size()) throw ConfigError("poison base index " + std::to_string(idx) + " out of range");
    Tensor<float> base = image_tensor<float>(data, idx);
    if (init.watermark_target && init.watermark_opacity > 0) {
      base = watermark(base, *init.watermark_target, init.watermark_opacity);
    }
    set.params.push_back(PerturbationParams<float>::zeros(data.image_shape(), init.grid_size, init.eps, init.eps_c));
    set.bases.push_back(std::move(base));
    set.labels.push_back(data.labels[idx]);
  }
  set.base_indices = std::move(base_indices);
  set.render_all();
  return set;
}

PoisonSet subsample_poisons(const PoisonSet& poisons, std::size_t m, std::uint64_t seed,
                            std::optional<std::string> parent_hash) {
  if (m > poisons.size()) {
    throw ConfigError("cannot subsample " + std::to_string(m) + " of " + std::to_string(poisons.size()) + " poisons");
  }
  PoisonSet out;
  out.parent = parent_hash ? parent_hash : std::optional<std::string>(poison_digest(poisons));
  out.parent_positions = sample_positions(poisons.size(), m, seed);
  for (std::size_t i : out.parent_positions) {
    out.base_indices.push_back(poisons.base_indices[i]);
    out.labels.push_back(poisons.labels[i]);
    out.bases.push_back(poisons.bases[i]);
    out.params.push_back(poisons.params[i]);
    out.rendered.push_back(poisons.rendered[i]);
  }
  return out;
}

LabeledSet substitute_poisons(const LabeledSet& data, const PoisonSet& poisons) {
  LabeledSet out = data;
  for (std::size_t i = 0; i < poisons.size(); ++i) {
    const std::size_t idx = poisons.base_indices[i];
    if (idx >= data.size()) throw ConfigError("poison index " + std::to_string(idx) + " out of range");
    if (poisons.rendered[i].shape() != data.image_shape()) throw ShapeError("poison image shape mismatch");
    if (poisons.labels[i] != data.labels[idx]) throw InvariantError("poison label differs from its base label");
    std::copy(poisons.rendered[i].values().begin(), poisons.rendered[i].values().end(), out.image(idx).begin());
  }
  return out;
}

namespace {

void write_floats(const std::filesystem::path& path, const std::vector<const Tensor<float>*>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path.string());
  for (const auto* t : tensors) {
    for (float v : t->values()) {
      const auto u = std::bit_cast<std::uint32_t>(v);
      const char b[4] = {static_cast<char>(u & 0xff), static_cast<char>((u >> 8) & 0xff),
                         static_cast<char>((u >> 16) & 0xff), static_cast<char>((u >> 24) & 0xff)};
      out.write(b, 4);
    }
  }
}

std::vector<Tensor<float>> read_floats(const std::filesystem::path& path, std::size_t count, const Shape& shape) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("missing poison artifact " + path.string());
  std::vector<Tensor<float>> out;
  for (std::size_t i = 0; i < count; ++i) {
    Tensor<float> t(shape);
    for (auto& v : t.storage()) {
      unsigned char b[4];
      if (!in.read(reinterpret_cast<char*>(b), 4)) throw ConfigError("truncated poison artifact " + path.string());
      v = std::bit_cast<float>(static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
                               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24));
    }
    out.push_back(std::move(t));
  }
  return out;
}

template <typename F>
std::vector<const Tensor<float>*> pick(const PoisonSet& p, F f) {
  std::vector<const Tensor<float>*> out;
  for (std::size_t i = 0; i < p.size(); ++i) out.push_back(&f(i));
  return out;
}

}  // namespace

std::string poison_digest(const PoisonSet& poisons) {
  Sha256 h;
  for (std::size_t i = 0; i < poisons.size(); ++i) {
    const std::uint64_t idx = poisons.base_indices[i];
    h.update(&idx, sizeof idx);
    for (const auto* t : {&poisons.params[i].grid, &poisons.params[i].delta, &poisons.rendered[i]}) {
      h.update(t->data(), t->size() * sizeof(float));
    }
  }
  return h.hex();
}

void save_poison_set(const PoisonSet& poisons, const std::filesystem::path& dir, const nlohmann::json& extra) {
  std::filesystem::create_directories(dir);
  nlohmann::json m = extra;
  m["count"] = poisons.size();
  m["base_indices"] = poisons.base_indices;
  m["labels"] = poisons.labels;
  m["image_shape"] = poisons.size() ? poisons.bases[0].shape() : Shape{};
  m["grid_size"] = poisons.size() ? poisons.params[0].grid_size() : 0;
  m["eps"] = poisons.size() ? poisons.params[0].eps : 0.0;
  m["eps_c"] = poisons.size() ? poisons.params[0].eps_c : 0.0;
  m["poison_digest"] = poison_digest(poisons);
  if (poisons.parent) {
    m["parent"] = *poisons.parent;
    m["parent_positions"] = poisons.parent_positions;
  }
  write_floats(dir / "grid.f32", pick(poisons, [&](std::size_t i) -> const Tensor<float>& { return poisons.params[i].grid; }));
  write_floats(dir / "delta.f32", pick(poisons, [&](std::size_t i) -> const Tensor<float>& { return poisons.params[i].delta; }));
  write_floats(dir / "bases.f32", pick(poisons, [&](std::size_t i) -> const Tensor<float>& { return poisons.bases[i]; }));
  write_floats(dir / "rendered.f32", pick(poisons, [&](std::size_t i) -> const Tensor<float>& { return poisons.rendered[i]; }));
  std::ofstream out(dir / "manifest.json");
  if (!out) throw ConfigError("cannot write manifest in " + dir.string());
  out << m.dump(2) << "\n";
}

PoisonSet load_poison_set(const std::filesystem::path& dir, nlohmann::json* manifest) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ConfigError("missing poison manifest in " + dir.string());
  const auto m = nlohmann::json::parse(in);
  PoisonSet p;
  const auto count = m.at("count").get<std::size_t>();
  p.base_indices = m.at("base_indices").get<std::vector<std::size_t>>();
  p.labels = m.at("labels").get<std::vector<int>>();
  if (p.base_indices.size() != count || p.labels.size() != count) throw ConfigError("poison manifest is inconsistent");
  if (count) {
    const auto shape = m.at("image_shape").get<Shape>();
    const auto gs = m.at("grid_size").get<std::size_t>();
    const double eps = m.at("eps").get<double>(), eps_c = m.at("eps_c").get<double>();
    const auto grids = read_floats(dir / "grid.f32", count, {gs, gs, gs, 3});
    const auto deltas = read_floats(dir / "delta.f32", count, shape);
    p.bases = read_floats(dir / "bases.f32", count, shape);
    p.rendered = read_floats(dir / "rendered.f32", count, shape);
    for (std::size_t i = 0; i < count; ++i) p.params.push_back({grids[i], deltas[i], eps, eps_c});
  }
  if (m.contains("parent")) {
    p.parent = m.at("parent").get<std::string>();
    p.parent_positions = m.at("parent_positions").get<std::vector<std::size_t>>();
  }
  if (m.contains("poison_digest") && m.at("poison_digest").get<std::string>() != poison_digest(p)) {
    throw ConfigError("poison artifacts in " + dir.string() + " do not match their manifest digest");
  }
  if (manifest) *manifest = m;
  return p;
}

#define METAPOISON_INSTANTIATE(T)                                                                           \
  template T representable_bound<T>(double);                                                               \
  template struct PerturbationParams<T>;                                                                    \
  template std::shared_ptr<const GridStencil<T>> color_stencil<T>(const Tensor<T>&, std::size_t);           \
  template Var render<T>(Graph<T>&, const Tensor<T>&, Var, Var, std::shared_ptr<const GridStencil<T>>);     \
  template Tensor<T> apply<T>(const Tensor<T>&, const PerturbationParams<T>&);                              \
  template Tensor<T> color_displacement<T>(const Tensor<T>&, const Tensor<T>&);                             \
  template PerturbationParams<T> project<T>(PerturbationParams<T>);                                         \
  template Tensor<T> watermark<T>(const Tensor<T>&, const Tensor<T>&, double);

METAPOISON_INSTANTIATE(float)
METAPOISON_INSTANTIATE(double)
#undef METAPOISON_INSTANTIATE

}  // namespace metapoison
