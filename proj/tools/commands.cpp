#include "commands.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "metapoison/experiment.hpp"
#include "metapoison/featviz.hpp"
#include "metapoison/seeds.hpp"

namespace metapoison::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path data_dir() {
  const char* env = std::getenv("METAPOISON_DATA_DIR");
  return env && *env ? fs::path(env) : fs::path(".");
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("missing artifact " + path.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

void write_json(const json& j, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out << j.dump(2) << "\n";
}

// "craft.beta=100" -> j["craft"]["beta"] = 100; values that are not JSON are strings.
void apply_set(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("--set expects path=value, got '" + assignment + "'");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &j;
  std::stringstream ss(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(ss, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    if (!node->contains(keys[i])) (*node)[keys[i]] = json::object();
    node = &(*node)[keys[i]];
    if (!node->is_object()) throw ConfigError("--set " + path + ": " + keys[i] + " is not a section");
  }
  (*node)[keys.back()] = value;
}

std::vector<std::uint64_t> seed_range(std::size_t n) {
  std::vector<std::uint64_t> s(n);
  for (std::size_t i = 0; i < n; ++i) s[i] = i;
  return s;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw ConfigError("empty list '" + s + "'");
  return out;
}

double to_number(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::logic_error&) {
    throw ConfigError(what + ": '" + s + "' is not a number");
  }
}

std::size_t to_count(const std::string& s, const std::string& what) {
  const double v = to_number(s, what);
  if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
    throw ConfigError(what + ": '" + s + "' is not a non-negative integer");
  }
  return static_cast<std::size_t>(v);
}

struct ConfigFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::size_t> steps, seeds, targets, jobs;
  std::optional<double> budget;
};

void add_config_flags(CLI::App* cmd, ConfigFlags& f, bool required) {
  auto* opt = cmd->add_option("--config", f.config, "experiment config (JSON)");
  if (required) opt->required();
  cmd->add_option("--set", f.sets, "override a config field, e.g. craft.beta=100");
  cmd->add_option("--steps", f.steps, "craft steps");
  cmd->add_option("--seeds", f.seeds, "victim seeds 0..n-1");
  cmd->add_option("--targets", f.targets, "number of targets");
  cmd->add_option("--budget", f.budget, "poison budget as a fraction of the training set");
  cmd->add_option("--jobs", f.jobs, "worker threads");
}

// Config file plus --set assignments, then flags on top.
ExperimentConfig build_config(json j, const ConfigFlags& f, bool craft_side) {
  for (const auto& s : f.sets) apply_set(j, s);
  if (craft_side) {
    if (f.steps) j["craft"]["steps"] = *f.steps;
    if (f.targets) j["attack"]["targets"]["count"] = *f.targets;
    if (f.budget) j["attack"]["budget"] = *f.budget;
  }
  if (f.seeds) j["victim"]["seeds"] = seed_range(*f.seeds);
  if (f.jobs) {
    j["craft"]["jobs"] = *f.jobs;
    j["victim"]["jobs"] = *f.jobs;
  }
  return parse_config(j);
}

json load_config_json(const std::string& path) {
  if (path.empty()) return json::object();
  return read_json(path);
}

double headline(const VictimReport& r) {
  return r.scheme == Scheme::kSelfConceal ? self_conceal_success(r) : success_rate(r);
}

std::size_t headline_count(const VictimReport& r) {
  return static_cast<std::size_t>(std::lround(headline(r) * static_cast<double>(r.rows.size())));
}

std::string target_dir(std::size_t k) { return "target_" + std::to_string(k); }

int cmd_craft(const ConfigFlags& f, const std::string& out_root) {
  const auto cfg = build_config(load_config_json(f.config), f, true);
  const auto hash = config_hash(cfg);
  const auto ex = build_experiment(cfg, data_dir());
  const auto dhash = dataset_hash(ex);
  const fs::path run = fs::path(out_root) / hash;
  fs::create_directories(run);
  write_json(config_to_json(cfg), run / "config.json");

  const auto crafted = craft_experiment(cfg, ex, {}, [&](std::size_t k) {
    std::cerr << "crafting " << k + 1 << "/" << ex.specs.size() << "\n";
  });
  json manifest{{"config_hash", hash}, {"dataset_hash", dhash}, {"config", config_to_json(cfg)},
                {"scheme", scheme_name(cfg.attack.scheme)}, {"targets", json::array()}};
  for (std::size_t k = 0; k < crafted.poisons.size(); ++k) {
    const auto dir = run / target_dir(k);
    json extra{{"config_hash", hash}, {"dataset_hash", dhash}};
    if (k < ex.target_indices.size() && cfg.attack.scheme != Scheme::kMultiTarget) {
      extra["target_index"] = ex.target_indices[k];
    }
    save_poison_set(crafted.poisons[k], dir, extra);
    crafted.traces[k].write_csv(dir / "trace.csv");
    const auto& rows = crafted.traces[k].rows;
    json t{{"dir", target_dir(k)}, {"poison_digest", poison_digest(crafted.poisons[k])}};
    if (extra.contains("target_index")) t["test_index"] = extra["target_index"];
    if (!rows.empty()) {
      t["adv_loss_first"] = rows.front().mean_adv_loss;
      t["adv_loss_last"] = rows.back().mean_adv_loss;
    }
    manifest["targets"].push_back(t);
  }
  if (cfg.attack.scheme == Scheme::kMultiTarget) manifest["target_indices"] = ex.target_indices;
  write_json(manifest, run / "manifest.json");
  std::cout << run.string() << "\n";
  return kOk;
}

struct LoadedRun {
  ExperimentConfig cfg;
  Experiment ex;
  json manifest;
  std::vector<PoisonSet> poisons;
};

// Reloads a run directory and enforces that config, dataset and poison
// artifacts all carry the run's hashes.
LoadedRun load_run(const fs::path& run, const ConfigFlags& f) {
  LoadedRun r;
  r.manifest = read_json(run / "manifest.json");
  const std::string hash = r.manifest.at("config_hash");
  const json base = f.config.empty() ? r.manifest.at("config") : load_config_json(f.config);
  r.cfg = build_config(base, f, false);
  if (config_hash(r.cfg) != hash) {
    throw ConfigError("config hash " + config_hash(r.cfg) + " does not match run " + hash);
  }
  r.ex = build_experiment(r.cfg, data_dir());
  if (dataset_hash(r.ex) != r.manifest.at("dataset_hash").get<std::string>()) {
    throw ConfigError("dataset hash does not match run " + run.string() + " (check METAPOISON_DATA_DIR)");
  }
  const auto& targets = r.manifest.at("targets");
  std::size_t n = targets.size();
  if (f.targets) {
    if (*f.targets > n || *f.targets == 0) {
      throw ConfigError("--targets " + std::to_string(*f.targets) + ": run has " + std::to_string(n));
    }
    n = *f.targets;
  }
  for (std::size_t k = 0; k < n; ++k) {
    json m;
    const auto dir = run / targets[k].at("dir").get<std::string>();
    if (!fs::exists(dir / "manifest.json")) throw ConfigError("missing artifact " + dir.string());
    auto p = load_poison_set(dir, &m);
    if (m.value("config_hash", "") != hash || m.value("dataset_hash", "") != r.manifest["dataset_hash"]) {
      throw ConfigError("poison artifact " + dir.string() + " belongs to a different run");
    }
    r.poisons.push_back(std::move(p));
  }
  if (r.cfg.attack.scheme != Scheme::kMultiTarget && !is_indiscriminate(r.cfg.attack.scheme)) {
    r.ex.specs.resize(n);
    r.ex.target_indices.resize(n);
  }
  return r;
}

json summary(const VictimReport& rep) {
  const auto k = headline_count(rep);
  const auto ci = wilson_interval(k, rep.rows.size());
  return {{"success", k},
          {"trials", rep.rows.size()},
          {"rate", headline(rep)},
          {"ci_lo", ci.lo},
          {"ci_hi", ci.hi},
          {"val_accuracy_mean", rep.mean_val_accuracy()},
          {"val_accuracy_std", rep.std_val_accuracy()}};
}

int cmd_victim(const std::string& run_path, const ConfigFlags& f, bool fc) {
  const fs::path run(run_path);
  auto r = load_run(run, f);
  std::string tag = "poisoned";
  auto sets = r.poisons;
  if (fc) {
    tag = "fc";
    sets = feature_collision_experiment(r.cfg, r.ex);
  }
  if (f.budget) {
    const std::size_t m = poison_count(r.ex.train.size(), *f.budget);
    tag = m == 0 ? "control" : tag + "_budget" + std::to_string(m);
    for (auto& s : sets) {
      if (m > s.size()) {
        throw InfeasibleError("--budget needs " + std::to_string(m) + " poisons, run has " + std::to_string(s.size()));
      }
      s = m == 0 ? PoisonSet{} : subsample_poisons(s, m, derive_seed(r.cfg.craft.craft_seed, {m}), poison_digest(s));
    }
  }
  const auto rep = evaluate_experiment(r.cfg, r.ex, sets);
  const auto dir = run / ("victim_" + tag);
  fs::create_directories(dir);
  auto j = rep.to_json();
  j["config_hash"] = r.manifest["config_hash"];
  j["dataset_hash"] = r.manifest["dataset_hash"];
  j["summary"] = summary(rep);
  write_json(j, dir / "report.json");
  rep.write_csv(dir / "report.csv");
  const auto s = j["summary"];
  std::printf("%s: %zu/%zu success (%.3f, 95%% CI %.3f-%.3f), val accuracy %.4f +- %.4f\n", tag.c_str(),
              s["success"].get<std::size_t>(), s["trials"].get<std::size_t>(), s["rate"].get<double>(),
              s["ci_lo"].get<double>(), s["ci_hi"].get<double>(), s["val_accuracy_mean"].get<double>(),
              s["val_accuracy_std"].get<double>());
  return kOk;
}

int cmd_ablate(const ConfigFlags& f, const std::string& axis, const std::string& grid_text,
               const std::string& out_root) {
  static const std::vector<std::string> axes{"K", "ensemble", "reinit", "eps", "steps", "subsample"};
  if (std::find(axes.begin(), axes.end(), axis) == axes.end()) {
    throw ConfigError("--axis: unknown axis '" + axis + "' (K, ensemble, reinit, eps, steps, subsample)");
  }
  const auto grid = split_list(grid_text);
  const json base_json = load_config_json(f.config);
  const auto base = build_config(base_json, f, true);
  const fs::path run = fs::path(out_root) / config_hash(base);
  fs::create_directories(run);
  const auto csv_path = run / ("ablate_" + axis + ".csv");
  std::ofstream csv(csv_path);
  if (!csv) throw ConfigError("cannot write " + csv_path.string());
  csv.precision(9);
  csv << "axis,value,config_hash,success,trials,rate,ci_lo,ci_hi,val_accuracy_mean\n";
  auto emit = [&](const std::string& value, const std::string& hash, const VictimReport& rep) {
    const auto s = summary(rep);
    csv << axis << "," << value << "," << hash << "," << s["success"].get<std::size_t>() << ","
        << s["trials"].get<std::size_t>() << "," << s["rate"].get<double>() << "," << s["ci_lo"].get<double>() << ","
        << s["ci_hi"].get<double>() << "," << s["val_accuracy_mean"].get<double>() << "\n";
    csv.flush();
    std::cerr << axis << "=" << value << ": " << s["rate"].get<double>() << "\n";
  };

  if (axis == "steps" || axis == "subsample") {
    // One crafting run, evaluated at several checkpoints or subset sizes.
    std::vector<std::size_t> values;
    for (const auto& g : grid) values.push_back(to_count(g, "--grid"));
    auto cfg = base;
    if (axis == "steps") cfg.craft.craft_steps = *std::max_element(values.begin(), values.end());
    const auto ex = build_experiment(cfg, data_dir());
    std::map<std::size_t, std::vector<PoisonSet>> snapshots;
    if (axis == "steps" && std::count(values.begin(), values.end(), 0)) {
      for (const auto& spec : ex.specs) {
        snapshots[0].push_back(make_poison_set(ex.train, ex.poison_bases, poison_init(cfg, spec)));
      }
    }
    const auto crafted = craft_experiment(cfg, ex, [&](std::size_t step, const PoisonSet& p) {
      if (axis == "steps" && std::count(values.begin(), values.end(), step + 1)) snapshots[step + 1].push_back(p);
    });
    const auto hash = config_hash(cfg);
    for (std::size_t i = 0; i < values.size(); ++i) {
      std::vector<PoisonSet> sets;
      if (axis == "steps") {
        sets = snapshots.at(values[i]);
      } else {
        for (const auto& p : crafted.poisons) {
          if (values[i] > p.size()) throw InfeasibleError("subsample " + grid[i] + " exceeds the poison count");
          sets.push_back(subsample_poisons(p, values[i], derive_seed(cfg.craft.craft_seed, {values[i]}),
                                           poison_digest(p)));
        }
      }
      emit(grid[i], hash, evaluate_experiment(cfg, ex, sets));
    }
    return kOk;
  }

  for (const auto& g : grid) {
    json j = base_json;
    auto cfg_flags = f;
    if (axis == "K") {
      cfg_flags.sets.push_back("craft.unroll=" + std::to_string(to_count(g, "--grid")));
    } else if (axis == "ensemble") {
      cfg_flags.sets.push_back("craft.ensemble=" + std::to_string(to_count(g, "--grid")));
    } else if (axis == "reinit") {
      if (g != "0" && g != "1" && g != "true" && g != "false") throw ConfigError("--grid: reinit takes 0/1");
      cfg_flags.sets.push_back(std::string("craft.reinit=") + (g == "1" || g == "true" ? "true" : "false"));
    } else {
      // eps or eps:eps_c
      const auto colon = g.find(':');
      cfg_flags.sets.push_back("craft.eps=" + std::to_string(to_number(g.substr(0, colon), "--grid")));
      if (colon != std::string::npos) {
        cfg_flags.sets.push_back("craft.eps_c=" + std::to_string(to_number(g.substr(colon + 1), "--grid")));
      }
    }
    const auto cfg = build_config(j, cfg_flags, true);
    const auto ex = build_experiment(cfg, data_dir());
    emit(g, config_hash(cfg), evaluate_experiment(cfg, ex, craft_experiment(cfg, ex).poisons));
  }
  return kOk;
}

int cmd_featviz(const std::string& run_path, const ConfigFlags& f, const std::string& epochs_text,
                std::optional<std::size_t> layer, std::size_t target) {
  const fs::path run(run_path);
  auto r = load_run(run, f);
  if (target >= r.poisons.size()) throw ConfigError("--target: run has " + std::to_string(r.poisons.size()));
  const auto& spec = r.ex.specs.at(target);
  if (spec.targets.size() == 0) throw ConfigError("featviz needs a targeted scheme");
  const auto& poisons = r.poisons[target];
  const int y_true = spec.y_true();
  const int p_class = spec.poison_class.value_or(spec.y_adv);

  std::set<std::size_t> is_poison(poisons.base_indices.begin(), poisons.base_indices.end());
  auto clean_of = [&](int label) {
    std::vector<std::size_t> rows;
    for (auto i : r.ex.train.indices_of(label)) {
      if (!is_poison.count(i)) rows.push_back(i);
    }
    return gather_images<float>(r.ex.train, rows);
  };
  std::vector<FeatureGroup> groups{{"target_class", clean_of(y_true)}, {"poison_class", clean_of(p_class)}};
  if (poisons.size() > 0) {
    std::vector<float> flat;
    for (const auto& p : poisons.rendered) flat.insert(flat.end(), p.data(), p.data() + p.size());
    Shape shape{poisons.size()};
    for (auto d : poisons.rendered[0].shape()) shape.push_back(d);
    groups.push_back({"poisons", Tensor<float>(shape, std::move(flat))});
  }
  groups.push_back({"target", gather_images<float>(spec.targets, std::vector<std::size_t>{0})});

  const auto vc = victim_config(r.cfg, r.ex);
  std::set<std::size_t> wanted;
  if (epochs_text.empty()) {
    for (std::size_t e = 0; e <= vc.epochs; ++e) wanted.insert(e);
  } else {
    for (const auto& s : split_list(epochs_text)) {
      const auto e = to_count(s, "--epochs");
      if (e > vc.epochs) throw ConfigError("--epochs: " + s + " exceeds victim.epochs");
      wanted.insert(e);
    }
  }
  const auto seed = vc.seeds.at(0);
  const auto train = substitute_poisons(r.ex.train, poisons);
  auto model = vc.fine_tune_from ? *vc.fine_tune_from : init_model<float>(vc.arch, seed);
  model.epoch = 0;
  std::vector<FeaturePoint> points;
  const int y_axis = spec.scheme == Scheme::kSelfConceal ? p_class : spec.y_adv;
  for (std::size_t e = 0; e <= vc.epochs; ++e) {
    if (wanted.count(e)) {
      auto pts = project_features(model, groups, y_axis, layer);
      for (auto& p : pts) p.epoch = e;
      points.insert(points.end(), pts.begin(), pts.end());
    }
    if (e == vc.epochs) break;
    TrainOptions o;
    o.lr = vc.lr_at(e);
    o.batch_size = std::min(vc.batch_size, train.size());
    o.momentum = vc.momentum;
    o.weight_decay = vc.weight_decay;
    o.augment = vc.augment;
    o.shuffle_seed = derive_seed(seed, {0x76696374, e});
    model = train_epoch(std::move(model), train, o);
  }
  const auto path = run / (layer ? "featviz_layer" + std::to_string(*layer) + ".csv" : "featviz.csv");
  write_feature_csv(points, path);
  std::cout << path.string() << "\n";
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"clean-label data poisoning by unrolled meta-gradients"};
  app.require_subcommand(1);
  std::string out_root = "runs", run_dir, axis, grid, epochs;
  ConfigFlags f;
  bool fc = false;
  std::optional<std::size_t> layer;
  std::size_t target = 0;

  auto* craft_cmd = app.add_subcommand("craft", "craft poisons for every target of a config");
  add_config_flags(craft_cmd, f, false);
  craft_cmd->add_option("--out", out_root, "root of run directories");

  auto* victim_cmd = app.add_subcommand("victim", "train victims on a crafted run and report attack success");
  victim_cmd->add_option("--run", run_dir, "run directory")->required();
  add_config_flags(victim_cmd, f, false);
  victim_cmd->add_flag("--fc", fc, "replace the crafted poisons by feature-collision poisons on the same bases");

  auto* ablate_cmd = app.add_subcommand("ablate", "sweep one crafting setting");
  add_config_flags(ablate_cmd, f, false);
  ablate_cmd->add_option("--axis", axis, "K, ensemble, reinit, eps, steps or subsample")->required();
  ablate_cmd->add_option("--grid", grid, "comma-separated values; eps takes eps or eps:eps_c")->required();
  ablate_cmd->add_option("--out", out_root, "root of run directories");

  auto* featviz_cmd = app.add_subcommand("featviz", "project victim features across training");
  featviz_cmd->add_option("--run", run_dir, "run directory")->required();
  add_config_flags(featviz_cmd, f, false);
  featviz_cmd->add_option("--epochs", epochs, "comma-separated epochs (default: all)");
  featviz_cmd->add_option("--layer", layer, "hidden layer index (default: penultimate)");
  featviz_cmd->add_option("--target", target, "target index within the run");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*craft_cmd) return cmd_craft(f, out_root);
    if (*victim_cmd) return cmd_victim(run_dir, f, fc);
    if (*ablate_cmd) return cmd_ablate(f, axis, grid, out_root);
    return cmd_featviz(run_dir, f, epochs, layer, target);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const InfeasibleError& e) {
    std::cerr << "infeasible: " << e.what() << "\n";
    return kInfeasible;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << "\n";
    return kInternal;
  }
}

}  // namespace metapoison::cli
