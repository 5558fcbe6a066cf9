#include "metapoison/experiment.hpp"

#include <algorithm>
#include <fstream>
#include <set>

#include "metapoison/hashing.hpp"
#include "metapoison/json_io.hpp"

namespace metapoison {

using nlohmann::json;

namespace {

// Reads optional fields of one JSON object, tracking the dotted path for
// error messages and rejecting keys nobody asked for.
class Fields {
 public:
  Fields(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <typename T>
  void read(const char* key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const json::exception& e) {
      throw ConfigError(at(key) + ": " + type_hint<T>() + " expected");
    }
  }

  template <typename T>
  void read(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    if (j_.at(key).is_null()) {
      out.reset();
      return;
    }
    T v{};
    read(key, v);
    out = v;
  }

  template <typename E>
  void read_enum(const char* key, E& out, E (*parse)(const std::string&)) {
    std::optional<std::string> s;
    read(key, s);
    if (!s) return;
    try {
      out = parse(*s);
    } catch (const ConfigError& e) {
      throw ConfigError(at(key) + ": " + e.what());
    }
  }

  std::optional<Fields> sub(const char* key) {
    seen_.insert(key);
    if (!j_.contains(key)) return std::nullopt;
    return Fields(j_.at(key), at(key));
  }

  const json& raw() const { return j_; }
  std::string at(const char* key) const { return path_.empty() ? key : path_ + "." + key; }
  std::string where() const { return path_.empty() ? "config" : path_; }

  void finish() const {
    for (const auto& [k, v] : j_.items()) {
      if (!seen_.count(k)) throw ConfigError(at(k.c_str()) + ": unknown field");
    }
  }

 private:
  template <typename T>
  static std::string type_hint() {
    if constexpr (std::is_same_v<T, bool>) return "boolean";
    else if constexpr (std::is_same_v<T, std::string>) return "string";
    else if constexpr (std::is_floating_point_v<T>) return "number";
    else if constexpr (std::is_unsigned_v<T>) return "non-negative integer";
    else if constexpr (std::is_integral_v<T>) return "integer";
    else return "array";
  }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

// Validation errors from the library name the section already; keep the
// field path form for those that do not.
template <typename F>
void checked(const std::string& section, F&& f) {
  try {
    f();
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    if (msg.rfind(section, 0) == 0) throw;
    throw ConfigError(section + ": " + msg);
  }
}

DataSource parse_source(const std::string& s) {
  if (s == "synth") return DataSource::kSynth;
  if (s == "cifar10") return DataSource::kCifar10;
  throw ConfigError("unknown dataset source '" + s + "' (synth, cifar10)");
}

const char* source_name(DataSource s) { return s == DataSource::kSynth ? "synth" : "cifar10"; }

TargetRule parse_rule(const std::string& s) {
  if (s == "index") return TargetRule::kIndex;
  if (s == "boundary") return TargetRule::kBoundary;
  throw ConfigError("unknown target rule '" + s + "' (index, boundary)");
}

const char* rule_name(TargetRule r) { return r == TargetRule::kIndex ? "index" : "boundary"; }

ArchKind parse_kind(const std::string& s) { return parse_arch_kind(s); }

void hash_set(Sha256& h, const LabeledSet& d) {
  const std::uint64_t dims[] = {d.size(), d.height, d.width, d.channels, d.num_classes};
  h.update(dims, sizeof dims);
  for (int y : d.labels) {
    const std::int32_t v = y;
    h.update(&v, sizeof v);
  }
  h.update(d.images.data(), d.images.size() * sizeof(float));
}

}  // namespace

ExperimentConfig parse_config(const json& j) {
  ExperimentConfig cfg;
  Fields root(j, "");

  if (auto f = root.sub("dataset")) {
    auto& d = cfg.dataset;
    f->read_enum("source", d.source, parse_source);
    f->read("seed", d.synth.seed);
    f->read("n_per_class", d.synth.n_per_class);
    f->read("classes", d.synth.classes);
    f->read("height", d.synth.height);
    f->read("width", d.synth.width);
    f->read("channels", d.synth.channels);
    f->read("noise", d.synth.noise);
    f->read("contrast_min", d.synth.contrast_min);
    f->read("contrast_max", d.synth.contrast_max);
    f->read("validation_per_class", d.validation_per_class);
    f->read("test_per_class", d.test_per_class);
    f->read("cifar_subdir", d.cifar_subdir);
    f->read("train_limit", d.train_limit);
    f->read("validation_size", d.validation_size);
    f->finish();
  }
  // Synthetic data sets the default architecture input shape.
  if (cfg.dataset.source == DataSource::kSynth) {
    cfg.arch.height = cfg.dataset.synth.height;
    cfg.arch.width = cfg.dataset.synth.width;
    cfg.arch.channels = cfg.dataset.synth.channels;
    cfg.arch.num_classes = cfg.dataset.synth.classes;
  } else {
    cfg.arch.height = cfg.arch.width = 32;
    cfg.arch.channels = 3;
    cfg.arch.num_classes = 10;
  }

  if (auto f = root.sub("arch")) {
    auto& a = cfg.arch;
    f->read_enum("kind", a.kind, parse_kind);
    f->read("hidden", a.hidden);
    f->read("conv_channels", a.conv_channels);
    f->read("dense_width", a.dense_width);
    f->read("height", a.height);
    f->read("width", a.width);
    f->read("channels", a.channels);
    f->read("num_classes", a.num_classes);
    f->finish();
  }
  checked("arch", [&] { cfg.arch.validate(); });

  if (auto f = root.sub("craft")) {
    auto& c = cfg.craft;
    f->read("steps", c.craft_steps);
    f->read("ensemble", c.ensemble);
    f->read("epoch_range", c.epoch_range);
    f->read("unroll", c.unroll);
    f->read("alpha", c.alpha);
    f->read("beta", c.beta);
    f->read("beta_decay", c.beta_decay);
    f->read("beta_period", c.beta_period);
    f->read("batch_size", c.batch_size);
    f->read("eps", c.eps);
    f->read("eps_c", c.eps_c);
    f->read("grid_size", c.grid_size);
    f->read("adam_beta1", c.adam_beta1);
    f->read("adam_beta2", c.adam_beta2);
    f->read("adam_eps", c.adam_eps);
    f->read("init_seed", c.init_seed);
    f->read("shuffle_seed", c.shuffle_seed);
    f->read("craft_seed", c.craft_seed);
    f->read("reinit", c.reinit);
    f->read("watermark_opacity", c.watermark_opacity);
    f->read("fine_tune", c.fine_tune);
    f->read("jobs", c.jobs);
    f->finish();
  }
  checked("craft", [&] { cfg.craft.validate(); });

  if (auto f = root.sub("attack")) {
    auto& a = cfg.attack;
    f->read_enum("scheme", a.scheme, parse_scheme);
    f->read("target_class", a.target_class);
    f->read("y_adv", a.y_adv);
    f->read("poison_class", a.poison_class);
    f->read("budget", a.budget);
    f->read("holdout_batch", a.holdout_batch);
    f->read("kappa", a.kappa);
    if (auto t = f->sub("targets")) {
      t->read_enum("rule", a.targets.rule, parse_rule);
      t->read("indices", a.targets.indices);
      t->read("count", a.targets.count);
      t->read("reference_seed", a.targets.reference_seed);
      t->read("reference_epochs", a.targets.reference_epochs);
      t->finish();
    }
    f->finish();
  }
  {
    auto& a = cfg.attack;
    const auto classes = static_cast<int>(cfg.arch.num_classes);
    if (a.budget < 0 || a.budget > 1) throw ConfigError("attack.budget: must be in [0, 1]");
    if (a.target_class < 0 || a.target_class >= classes) throw ConfigError("attack.target_class: out of range");
    if (a.scheme == Scheme::kSelfConceal) {
      a.y_adv = a.target_class;
      a.poison_class = a.target_class;
    }
    if (a.scheme == Scheme::kMulticlass) a.poison_class.reset();
    if (a.y_adv < 0 || a.y_adv >= classes) throw ConfigError("attack.y_adv: out of range");
    if (a.poison_class && (*a.poison_class < 0 || *a.poison_class >= classes)) {
      throw ConfigError("attack.poison_class: out of range");
    }
    if (a.targets.rule == TargetRule::kIndex && !is_indiscriminate(a.scheme) && a.targets.indices.empty()) {
      throw ConfigError("attack.targets.indices: required by rule 'index'");
    }
    if (a.targets.rule == TargetRule::kBoundary && a.targets.count == 0 && !is_indiscriminate(a.scheme)) {
      throw ConfigError("attack.targets.count: must be >= 1");
    }
  }

  if (auto f = root.sub("victim")) {
    auto& v = cfg.victim;
    f->read("epochs", v.epochs);
    f->read("lr", v.lr);
    f->read("lr_schedule", v.lr_schedule);
    f->read("batch_size", v.batch_size);
    f->read("momentum", v.momentum);
    f->read("weight_decay", v.weight_decay);
    f->read("augment", v.augment);
    f->read("seeds", v.seeds);
    f->read("jobs", v.jobs);
    f->finish();
  }
  cfg.victim.arch = cfg.arch;
  checked("victim", [&] { cfg.victim.validate(); });

  if (auto f = root.sub("fc")) {
    f->read("iters", cfg.fc.iters);
    f->read("step", cfg.fc.step);
    f->read("beta_fc", cfg.fc.beta_fc);
    f->finish();
  }
  cfg.fc.eps = cfg.craft.eps;
  if (cfg.fc.step <= 0) throw ConfigError("fc.step: must be > 0");
  if (cfg.fc.beta_fc < 0) throw ConfigError("fc.beta_fc: must be >= 0");

  root.finish();
  return cfg;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return parse_config(j);
}

json config_to_json(const ExperimentConfig& cfg) {
  const auto& d = cfg.dataset;
  const auto& c = cfg.craft;
  const auto& a = cfg.attack;
  const auto& v = cfg.victim;
  auto opt = [](const auto& o) { return o ? json(*o) : json(nullptr); };
  json arch;
  to_json(arch, cfg.arch);
  return {
      {"dataset",
       {{"source", source_name(d.source)},
        {"seed", d.synth.seed},
        {"n_per_class", d.synth.n_per_class},
        {"classes", d.synth.classes},
        {"height", d.synth.height},
        {"width", d.synth.width},
        {"channels", d.synth.channels},
        {"noise", d.synth.noise},
        {"contrast_min", d.synth.contrast_min},
        {"contrast_max", d.synth.contrast_max},
        {"validation_per_class", d.validation_per_class},
        {"test_per_class", d.test_per_class},
        {"cifar_subdir", d.cifar_subdir},
        {"train_limit", d.train_limit},
        {"validation_size", d.validation_size}}},
      {"arch", arch},
      {"craft",
       {{"steps", c.craft_steps},
        {"ensemble", c.ensemble},
        {"epoch_range", c.epoch_range},
        {"unroll", c.unroll},
        {"alpha", c.alpha},
        {"beta", c.beta},
        {"beta_decay", c.beta_decay},
        {"beta_period", c.beta_period},
        {"batch_size", c.batch_size},
        {"eps", c.eps},
        {"eps_c", c.eps_c},
        {"grid_size", c.grid_size},
        {"adam_beta1", c.adam_beta1},
        {"adam_beta2", c.adam_beta2},
        {"adam_eps", c.adam_eps},
        {"init_seed", c.init_seed},
        {"shuffle_seed", c.shuffle_seed},
        {"craft_seed", c.craft_seed},
        {"reinit", c.reinit},
        {"watermark_opacity", opt(c.watermark_opacity)},
        {"fine_tune", c.fine_tune},
        {"jobs", c.jobs}}},
      {"attack",
       {{"scheme", scheme_name(a.scheme)},
        {"target_class", a.target_class},
        {"y_adv", a.y_adv},
        {"poison_class", opt(a.poison_class)},
        {"budget", a.budget},
        {"holdout_batch", a.holdout_batch},
        {"kappa", opt(a.kappa)},
        {"targets",
         {{"rule", rule_name(a.targets.rule)},
          {"indices", a.targets.indices},
          {"count", a.targets.count},
          {"reference_seed", a.targets.reference_seed},
          {"reference_epochs", a.targets.reference_epochs}}}}},
      {"victim",
       {{"epochs", v.epochs},
        {"lr", v.lr},
        {"lr_schedule", v.lr_schedule},
        {"batch_size", v.batch_size},
        {"momentum", v.momentum},
        {"weight_decay", v.weight_decay},
        {"augment", v.augment},
        {"seeds", v.seeds},
        {"jobs", v.jobs}}},
      {"fc", {{"iters", cfg.fc.iters}, {"step", cfg.fc.step}, {"beta_fc", cfg.fc.beta_fc}}},
  };
}

std::string config_hash(const ExperimentConfig& cfg) {
  auto j = config_to_json(cfg);
  j.erase("victim");
  j.erase("fc");
  j["craft"].erase("jobs");
  return sha256_hex(j.dump());
}

LabeledSet load_dataset_split(const ExperimentConfig& cfg, Split split, const std::filesystem::path& data_dir) {
  const auto& d = cfg.dataset;
  if (d.source == DataSource::kSynth) {
    SynthOptions so = d.synth;
    so.split = split;
    if (split == Split::kValidation) so.n_per_class = d.validation_per_class;
    if (split == Split::kTest) so.n_per_class = d.test_per_class;
    return synth_dataset(so);
  }
  const auto dir = data_dir / d.cifar_subdir;
  if (split == Split::kTest) {
    const std::vector<std::filesystem::path> paths{dir / "test_batch.bin"};
    return load_cifar_binary(paths, Split::kTest);
  }
  std::vector<std::filesystem::path> paths;
  for (int i = 1; i <= 5; ++i) paths.push_back(dir / ("data_batch_" + std::to_string(i) + ".bin"));
  const auto all = load_cifar_binary(paths, Split::kTrain);
  if (d.validation_size >= all.size()) throw ConfigError("dataset.validation_size: exceeds the training records");
  const std::size_t train_end = all.size() - d.validation_size;
  std::vector<std::size_t> rows;
  if (split == Split::kValidation) {
    for (std::size_t i = train_end; i < all.size(); ++i) rows.push_back(i);
  } else {
    const std::size_t n = d.train_limit ? std::min(d.train_limit, train_end) : train_end;
    for (std::size_t i = 0; i < n; ++i) rows.push_back(i);
  }
  auto out = all.subset(rows);
  out.split = split;
  return out;
}

std::string dataset_hash(const Experiment& ex) {
  Sha256 h;
  hash_set(h, ex.train);
  hash_set(h, ex.validation);
  hash_set(h, ex.test);
  return h.hex();
}

ModelState<float> reference_model(const ExperimentConfig& cfg, const LabeledSet& train) {
  auto model = init_model<float>(cfg.arch, cfg.attack.targets.reference_seed);
  TrainOptions o;
  o.lr = cfg.victim.lr;
  o.batch_size = std::min(cfg.victim.batch_size, train.size());
  for (std::size_t e = 0; e < cfg.attack.targets.reference_epochs; ++e) {
    o.shuffle_seed = e;
    model = train_epoch(std::move(model), train, o);
  }
  return model;
}

Experiment build_experiment(const ExperimentConfig& cfg, const std::filesystem::path& data_dir) {
  Experiment ex;
  ex.train = load_dataset_split(cfg, Split::kTrain, data_dir);
  ex.validation = load_dataset_split(cfg, Split::kValidation, data_dir);
  ex.test = load_dataset_split(cfg, Split::kTest, data_dir);
  const auto& a = cfg.attack;
  if (ex.train.image_shape() != Shape{cfg.arch.height, cfg.arch.width, cfg.arch.channels} ||
      ex.train.num_classes != cfg.arch.num_classes) {
    throw ConfigError("arch: input shape or class count differs from the dataset");
  }

  if (!is_indiscriminate(a.scheme)) {
    if (a.targets.rule == TargetRule::kIndex) {
      for (auto i : a.targets.indices) {
        if (i >= ex.test.size()) throw ConfigError("attack.targets.indices: " + std::to_string(i) + " out of range");
        if (ex.test.labels[i] != a.target_class) {
          throw ConfigError("attack.targets.indices: test image " + std::to_string(i) + " is not of target_class");
        }
      }
      ex.target_indices = a.targets.indices;
    } else {
      const auto ref = reference_model(cfg, ex.train);
      const auto candidates = ex.test.indices_of(a.target_class);
      const auto logits = predict_logits(ref, gather_images<float>(ex.test, candidates));
      const std::size_t c = cfg.arch.num_classes;
      std::vector<std::pair<double, std::size_t>> margins;
      for (std::size_t r = 0; r < candidates.size(); ++r) {
        double best_other = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < c; ++k) {
          if (static_cast<int>(k) != a.target_class) best_other = std::max<double>(best_other, logits[r * c + k]);
        }
        const double m = logits[r * c + static_cast<std::size_t>(a.target_class)] - best_other;
        if (m > 0) margins.emplace_back(m, candidates[r]);
      }
      std::sort(margins.begin(), margins.end());
      if (margins.size() < a.targets.count) {
        throw InfeasibleError("attack.targets: only " + std::to_string(margins.size()) +
                              " correctly classified candidates of target_class");
      }
      for (std::size_t i = 0; i < a.targets.count; ++i) ex.target_indices.push_back(margins[i].second);
    }
  }

  ex.poison_bases = a.poison_class ? select_poison_bases(ex.train, *a.poison_class, a.budget)
                                   : select_poison_bases_multiclass(ex.train, a.budget);

  auto base_spec = [&] {
    AttackSpec s;
    s.scheme = a.scheme;
    s.y_adv = a.y_adv;
    s.poison_class = a.poison_class;
    s.holdout_batch = a.holdout_batch;
    s.kappa = a.kappa;
    return s;
  };
  if (is_indiscriminate(a.scheme)) {
    auto s = base_spec();
    s.holdout = ex.validation;
    ex.specs.push_back(std::move(s));
  } else if (a.scheme == Scheme::kMultiTarget) {
    auto s = base_spec();
    s.targets = ex.test.subset(ex.target_indices);
    ex.specs.push_back(std::move(s));
  } else {
    for (auto i : ex.target_indices) {
      auto s = base_spec();
      s.targets = ex.test.subset(std::vector<std::size_t>{i});
      ex.specs.push_back(std::move(s));
    }
  }
  for (const auto& s : ex.specs) checked("attack", [&] { s.validate(cfg.arch.num_classes); });
  return ex;
}

PoisonInit poison_init(const ExperimentConfig& cfg, const AttackSpec& spec) {
  PoisonInit init;
  init.grid_size = cfg.craft.grid_size;
  init.eps = cfg.craft.eps;
  init.eps_c = cfg.craft.eps_c;
  if (cfg.craft.watermark_opacity && spec.targets.size() > 0) {
    init.watermark_target = image_tensor<float>(spec.targets, 0);
    init.watermark_opacity = *cfg.craft.watermark_opacity;
  }
  return init;
}

CraftedRun craft_experiment(const ExperimentConfig& cfg, const Experiment& ex, const CraftCallback& per_step,
                            const std::function<void(std::size_t)>& on_spec) {
  CraftedRun out;
  std::optional<ModelState<float>> pretrained;
  if (cfg.craft.fine_tune) pretrained = reference_model(cfg, ex.train);
  for (std::size_t k = 0; k < ex.specs.size(); ++k) {
    if (on_spec) on_spec(k);
    const auto& spec = ex.specs[k];
    auto start = make_poison_set(ex.train, ex.poison_bases, poison_init(cfg, spec));
    auto res = craft(cfg.craft, cfg.arch, spec, ex.train, std::move(start), pretrained ? &*pretrained : nullptr,
                     per_step);
    out.poisons.push_back(std::move(res.poisons));
    out.traces.push_back(std::move(res.trace));
  }
  return out;
}

std::vector<PoisonSet> feature_collision_experiment(const ExperimentConfig& cfg, const Experiment& ex) {
  const auto ref = reference_model(cfg, ex.train);
  std::vector<PoisonSet> out;
  for (const auto& spec : ex.specs) {
    if (spec.targets.size() == 0) throw ConfigError("feature collision needs a targeted scheme");
    auto start = make_poison_set(ex.train, ex.poison_bases, poison_init(cfg, spec));
    out.push_back(craft_feature_collision(ref, std::move(start), image_tensor<float>(spec.targets, 0), cfg.fc));
  }
  return out;
}

VictimConfig victim_config(const ExperimentConfig& cfg, const Experiment& ex) {
  VictimConfig v = cfg.victim;
  v.arch = cfg.arch;
  if (cfg.craft.fine_tune) v.fine_tune_from = reference_model(cfg, ex.train);
  return v;
}

VictimReport evaluate_experiment(const ExperimentConfig& cfg, const Experiment& ex, const std::vector<PoisonSet>& sets) {
  if (sets.size() != ex.specs.size()) throw ConfigError("evaluate: one poison set per attack spec is required");
  const auto vc = victim_config(cfg, ex);
  std::vector<VictimReport> reports;
  for (std::size_t k = 0; k < sets.size(); ++k) {
    auto r = evaluate(sets[k], ex.specs[k], vc, ex.train, ex.validation);
    if (ex.specs[k].scheme != Scheme::kMultiTarget && k < ex.target_indices.size()) {
      for (auto& row : r.rows) row.target = ex.target_indices[k];
    }
    reports.push_back(std::move(r));
  }
  return merge_reports(reports);
}

}  // namespace metapoison
