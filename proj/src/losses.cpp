#include "metapoison/losses.hpp"

#include <limits>

namespace metapoison {

const char* scheme_name(Scheme scheme) {
  switch (scheme) {
    case Scheme::kCollision: return "collision";
    case Scheme::kSelfConceal: return "self_conceal";
    case Scheme::kMulticlass: return "multiclass";
    case Scheme::kMultiTarget: return "multi_target";
    case Scheme::kIndiscriminateClass: return "indiscriminate_class";
    case Scheme::kIndiscriminateAll: return "indiscriminate_all";
  }
  return "unknown";
}

Scheme parse_scheme(const std::string& name) {
  for (Scheme s : {Scheme::kCollision, Scheme::kSelfConceal, Scheme::kMulticlass, Scheme::kMultiTarget,
                   Scheme::kIndiscriminateClass, Scheme::kIndiscriminateAll}) {
    if (name == scheme_name(s)) return s;
  }
  throw ConfigError("unknown attack scheme '" + name + "'");
}

bool is_indiscriminate(Scheme scheme) {
  return scheme == Scheme::kIndiscriminateClass || scheme == Scheme::kIndiscriminateAll;
}

void AttackSpec::validate(std::size_t num_classes) const {
  auto in_range = [&](int c) { return c >= 0 && static_cast<std::size_t>(c) < num_classes; };
  if (poison_class && !in_range(*poison_class)) throw ConfigError("attack: poison_class out of range");
  if (is_indiscriminate(scheme)) {
    if (!holdout || holdout->size() == 0) throw ConfigError("attack: indiscriminate schemes need a holdout set");
    if (holdout_batch == 0) throw ConfigError("attack: holdout_batch must be >= 1");
    holdout->validate();
    if (scheme == Scheme::kIndiscriminateClass && !in_range(y_adv)) throw ConfigError("attack: y_adv out of range");
    return;
  }
  if (targets.size() == 0) throw ConfigError("attack: at least one target image is required");
  targets.validate();
  if (targets.num_classes != num_classes) throw ConfigError("attack: target class count differs from training data");
  if (scheme != Scheme::kMultiTarget && targets.size() != 1) {
    throw ConfigError(std::string("attack: scheme ") + scheme_name(scheme) + " takes exactly one target");
  }
  if (scheme == Scheme::kSelfConceal) {
    if (!poison_class || *poison_class != y_true()) {
      throw ConfigError("attack: self_conceal needs poison_class == y_true");
    }
    return;
  }
  if (!in_range(y_adv)) throw ConfigError("attack: y_adv out of range");
  for (int y : targets.labels) {
    if (y == y_adv) throw ConfigError("attack: target already has the adversarial label");
  }
  if (scheme == Scheme::kCollision && (!poison_class || *poison_class != y_adv)) {
    throw ConfigError("attack: collision needs poison_class == y_adv");
  }
  if (scheme == Scheme::kMulticlass && poison_class) {
    throw ConfigError("attack: multiclass poisons are not drawn from a single class");
  }
}

AdvBatch adv_batch(const AttackSpec& spec, std::uint64_t step_seed) {
  if (!is_indiscriminate(spec.scheme)) return AdvBatch{spec.targets};
  const std::size_t n = spec.holdout->size();
  const auto rows = sample_positions(n, std::min(n, spec.holdout_batch), step_seed);
  return AdvBatch{spec.holdout->subset(rows)};
}

template <typename T>
Var train_loss(Graph<T>& g, Var logits, std::span<const int> labels) {
  return g.mean(g.softmax_xent(logits, labels));
}

template <typename T>
Var cw_margins(Graph<T>& g, Var logits, std::span<const int> y_adv, std::optional<double> kappa) {
  const auto& z = g.value(logits);
  if (z.rank() != 2 || z.dim(0) != y_adv.size()) {
    throw ShapeError("cw_loss: logits " + shape_str(z.shape()) + " vs " + std::to_string(y_adv.size()) + " labels");
  }
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  auto top = std::make_shared<std::vector<std::uint32_t>>(rows);
  auto adv = std::make_shared<std::vector<std::uint32_t>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const int y = y_adv[r];
    if (y < 0 || static_cast<std::size_t>(y) >= cols) throw ShapeError("cw_loss: y_adv out of range");
    std::size_t best = y == 0 ? 1 : 0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (static_cast<int>(j) != y && z[r * cols + j] > z[r * cols + best]) best = j;
    }
    (*top)[r] = static_cast<std::uint32_t>(r * cols + best);
    (*adv)[r] = static_cast<std::uint32_t>(r * cols + static_cast<std::size_t>(y));
  }
  Var m = g.sub(g.gather(logits, top, {rows}), g.gather(logits, adv, {rows}));
  if (kappa) m = g.clamp(m, static_cast<T>(-*kappa), std::numeric_limits<T>::max());
  return m;
}

template <typename T>
Var cw_loss(Graph<T>& g, Var logits, int y_adv, std::optional<double> kappa) {
  const std::vector<int> labels(g.shape(logits).at(0), y_adv);
  return g.mean(cw_margins(g, logits, labels, kappa));
}

double cw_value(std::span<const float> logits, int y_adv, std::optional<double> kappa) {
  if (y_adv < 0 || static_cast<std::size_t>(y_adv) >= logits.size() || logits.size() < 2) {
    throw ShapeError("cw_value: y_adv out of range");
  }
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < logits.size(); ++j) {
    if (static_cast<int>(j) != y_adv) best = std::max(best, static_cast<double>(logits[j]));
  }
  const double m = best - logits[static_cast<std::size_t>(y_adv)];
  return kappa ? std::max(m, -*kappa) : m;
}

template <typename T>
Var adv_loss(Graph<T>& g, const AttackSpec& spec, Var logits, const AdvBatch& batch) {
  const auto& labels = batch.images.labels;
  switch (spec.scheme) {
    case Scheme::kCollision:
    case Scheme::kMulticlass:
    case Scheme::kMultiTarget:
    case Scheme::kIndiscriminateClass:
      return cw_loss(g, logits, spec.y_adv, spec.kappa);
    case Scheme::kSelfConceal: {
      const std::size_t rows = labels.size(), cols = g.shape(logits).at(1);
      auto idx = std::make_shared<std::vector<std::uint32_t>>(rows);
      for (std::size_t r = 0; r < rows; ++r) (*idx)[r] = static_cast<std::uint32_t>(r * cols + labels[r]);
      const Var p = g.clamp(g.gather(g.softmax(logits), idx, {rows}), T{0}, T{1} - static_cast<T>(1e-6));
      const Var one_minus = g.sub(g.constant(Tensor<T>({rows}, T{1})), p);
      return g.neg(g.mean(g.log(one_minus)));
    }
    case Scheme::kIndiscriminateAll:
      return g.neg(train_loss(g, logits, labels));
  }
  throw ConfigError("adv_loss: unknown scheme");
}

#define METAPOISON_INSTANTIATE(T)                                                                    \
  template Var train_loss<T>(Graph<T>&, Var, std::span<const int>);                                 \
  template Var cw_margins<T>(Graph<T>&, Var, std::span<const int>, std::optional<double>);          \
  template Var cw_loss<T>(Graph<T>&, Var, int, std::optional<double>);                              \
  template Var adv_loss<T>(Graph<T>&, const AttackSpec&, Var, const AdvBatch&);

METAPOISON_INSTANTIATE(float)
METAPOISON_INSTANTIATE(double)
#undef METAPOISON_INSTANTIATE

}  // namespace metapoison
