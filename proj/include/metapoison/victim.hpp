#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include <json.hpp>

#include "metapoison/losses.hpp"
#include "metapoison/models.hpp"
#include "metapoison/perturbation.hpp"

namespace metapoison {

struct VictimConfig {
  ArchSpec arch;
  std::size_t epochs = 20;
  double lr = 0.1;
  bool lr_schedule = false;  // divide by 10 at 50% and again at 75% of epochs
  std::size_t batch_size = 125;
  double momentum = 0.0;
  double weight_decay = 0.0;
  bool augment = false;
  std::vector<std::uint64_t> seeds{0};
  std::optional<ModelState<float>> fine_tune_from;  // empty: train from scratch
  std::size_t jobs = 1;

  void validate() const;
  double lr_at(std::size_t epoch) const;
};

struct VictimRow {
  std::uint64_t seed = 0;
  std::size_t target = 0;
  int y_true = 0;
  int y_adv = 0;
  int prediction = 0;
  std::vector<double> cw_trace;  // per epoch; positive while the attack has not taken hold
  double val_accuracy = 0;
};

struct VictimReport {
  Scheme scheme = Scheme::kCollision;
  std::size_t num_classes = 0;
  std::vector<VictimRow> rows;  // seed-major, then target

  std::vector<std::size_t> tally() const;
  /// Accuracy of each victim (one per seed, in seed order).
  std::vector<double> seed_accuracies() const;
  double mean_val_accuracy() const;
  double std_val_accuracy() const;
  nlohmann::json to_json() const;
  void write_csv(const std::filesystem::path& path) const;
};

/// Trains one victim per seed on `data` with the poisons substituted at their
/// base indices and records, per target, the final prediction and the
/// per-epoch CW margin, plus validation accuracy.
VictimReport evaluate(const PoisonSet& poisons, const AttackSpec& spec, const VictimConfig& cfg,
                      const LabeledSet& data, const LabeledSet& validation);

/// Rows appended in argument order; schemes and class counts must agree.
VictimReport merge_reports(const std::vector<VictimReport>& reports);

/// Fraction of rows where the target is classified exactly as y_adv.
double success_rate(const VictimReport& report);
/// Fraction of rows where the target is no longer classified as y_true.
double self_conceal_success(const VictimReport& report);

struct Interval {
  double lo = 0;
  double hi = 0;
};

/// Wilson score interval for k successes in n trials.
Interval wilson_interval(std::size_t k, std::size_t n, double z = 1.959963984540054);

/// One-sided p-value of a pooled two-proportion z-test for H1: p_b > p_a.
double two_proportion_p_value(std::size_t k_a, std::size_t n_a, std::size_t k_b, std::size_t n_b);

}  // namespace metapoison
