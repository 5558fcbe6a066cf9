#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "metapoison/data.hpp"
#include "metapoison/graph.hpp"

namespace metapoison {

enum class Scheme {
  kCollision,            // poisons from y_adv, one target pushed into y_adv
  kSelfConceal,          // poisons from the target's own class push it out
  kMulticlass,           // poisons spread over classes, one target into y_adv
  kMultiTarget,          // several targets, all into y_adv
  kIndiscriminateClass,  // holdout examples into y_adv
  kIndiscriminateAll,    // error-generic: raise holdout cross-entropy
};

const char* scheme_name(Scheme scheme);
Scheme parse_scheme(const std::string& name);
bool is_indiscriminate(Scheme scheme);

struct AttackSpec {
  Scheme scheme = Scheme::kCollision;
  LabeledSet targets;  // target images; labels hold y_true per target
  int y_adv = 0;
  std::optional<int> poison_class;
  std::optional<LabeledSet> holdout;
  std::size_t holdout_batch = 32;
  std::optional<double> kappa;

  /// Checks scheme invariants against a training set with `num_classes`.
  void validate(std::size_t num_classes) const;
  int y_true() const { return targets.labels.at(0); }
};

/// Images and labels on which the adversarial loss is evaluated at one outer
/// step: the targets, or a seeded holdout minibatch.
struct AdvBatch {
  LabeledSet images;
};

AdvBatch adv_batch(const AttackSpec& spec, std::uint64_t step_seed);

/// Mean softmax cross-entropy.
template <typename T>
Var train_loss(Graph<T>& g, Var logits, std::span<const int> labels);

/// Per-row CW margin max_{j != y} z_j - z_y, clamped below at -kappa when
/// given. The max takes the lowest index on ties. Returns (B).
template <typename T>
Var cw_margins(Graph<T>& g, Var logits, std::span<const int> y_adv, std::optional<double> kappa = std::nullopt);

/// Mean CW margin with a single adversarial label for every row.
template <typename T>
Var cw_loss(Graph<T>& g, Var logits, int y_adv, std::optional<double> kappa = std::nullopt);

/// Plain CW margin of one logit row.
double cw_value(std::span<const float> logits, int y_adv, std::optional<double> kappa = std::nullopt);

/// Scheme-dependent outer loss of the logits of `batch` (from adv_batch).
template <typename T>
Var adv_loss(Graph<T>& g, const AttackSpec& spec, Var logits, const AdvBatch& batch);

}  // namespace metapoison
