#pragma once

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "metapoison/crafting.hpp"
#include "metapoison/data.hpp"
#include "metapoison/victim.hpp"

namespace metapoison {

enum class DataSource { kSynth, kCifar10 };

struct DatasetConfig {
  DataSource source = DataSource::kSynth;
  SynthOptions synth;                       // synth: training split options
  std::size_t validation_per_class = 100;   // synth only
  std::size_t test_per_class = 100;         // synth only
  std::string cifar_subdir = "cifar-10-batches-bin";
  std::size_t train_limit = 0;              // cifar: first n training records, 0 = all
  std::size_t validation_size = 1000;       // cifar: held out from the end of the training batches
};

enum class TargetRule {
  kIndex,     // explicit test-split indices
  kBoundary,  // test images of target_class with the smallest positive margin under a clean reference model
};

struct TargetConfig {
  TargetRule rule = TargetRule::kBoundary;
  std::vector<std::size_t> indices;
  std::size_t count = 1;
  std::uint64_t reference_seed = 999;
  std::size_t reference_epochs = 20;
};

struct AttackConfig {
  Scheme scheme = Scheme::kCollision;
  int target_class = 0;
  int y_adv = 1;  // ignored by self_conceal and the indiscriminate schemes
  std::optional<int> poison_class = 1;  // empty: spread across classes
  double budget = 0.1;
  TargetConfig targets;
  std::size_t holdout_batch = 32;
  std::optional<double> kappa;
};

struct ExperimentConfig {
  DatasetConfig dataset;
  ArchSpec arch;
  CraftConfig craft;
  AttackConfig attack;
  VictimConfig victim;  // arch is always overwritten with `arch`
  FeatureCollisionConfig fc;
};

/// Parses a config object; every field is optional. Unknown keys and type
/// errors raise ConfigError naming the field path (e.g. "craft.beta").
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
/// Canonical form with every field present.
nlohmann::json config_to_json(const ExperimentConfig& cfg);

/// SHA-256 of the canonical dataset, arch, craft and attack sections, i.e.
/// everything that determines the poisons; craft.jobs is excluded.
std::string config_hash(const ExperimentConfig& cfg);

struct Experiment {
  LabeledSet train;
  LabeledSet validation;
  LabeledSet test;
  std::vector<std::size_t> target_indices;  // into test
  std::vector<AttackSpec> specs;            // one crafting problem per entry
  std::vector<std::size_t> poison_bases;
};

LabeledSet load_dataset_split(const ExperimentConfig& cfg, Split split, const std::filesystem::path& data_dir);
/// SHA-256 over shapes, labels and pixels of train, validation and test.
std::string dataset_hash(const Experiment& ex);

/// Clean model trained `reference_epochs` on train (shuffle seeds 0, 1, ...).
ModelState<float> reference_model(const ExperimentConfig& cfg, const LabeledSet& train);

/// Loads data, picks targets and poison bases and assembles AttackSpecs:
/// one per target, except multi_target (one spec holding every target) and
/// the indiscriminate schemes (one spec without targets, validation holdout).
/// Throws InfeasibleError when the budget cannot be met.
Experiment build_experiment(const ExperimentConfig& cfg, const std::filesystem::path& data_dir);

PoisonInit poison_init(const ExperimentConfig& cfg, const AttackSpec& spec);

struct CraftedRun {
  std::vector<PoisonSet> poisons;  // one per spec
  std::vector<CraftTrace> traces;
};

/// Crafts every spec from fresh poisons on the experiment's bases. In
/// fine-tune mode the surrogate is the reference model.
CraftedRun craft_experiment(const ExperimentConfig& cfg, const Experiment& ex, const CraftCallback& per_step = {},
                            const std::function<void(std::size_t spec)>& on_spec = {});

/// Feature-collision poisons on the same bases against the reference model.
std::vector<PoisonSet> feature_collision_experiment(const ExperimentConfig& cfg, const Experiment& ex);

/// cfg.victim with the experiment's arch, fine-tuning from the reference
/// model when crafting did.
VictimConfig victim_config(const ExperimentConfig& cfg, const Experiment& ex);

/// Evaluates sets[k] against specs[k] and merges the reports; rows of
/// single-target specs carry the target's test index.
VictimReport evaluate_experiment(const ExperimentConfig& cfg, const Experiment& ex, const std::vector<PoisonSet>& sets);

}  // namespace metapoison
