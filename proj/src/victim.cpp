#include "metapoison/victim.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include "metapoison/json_io.hpp"
#include "metapoison/seeds.hpp"

namespace metapoison {

void VictimConfig::validate() const {
  arch.validate();
  if (epochs < 1) throw ConfigError("victim: epochs must be >= 1");
  if (seeds.empty()) throw ConfigError("victim: at least one seed is required");
  if (lr < 0) throw ConfigError("victim: lr must be >= 0");
  if (batch_size < 1) throw ConfigError("victim: batch_size must be >= 1");
  if (jobs < 1) throw ConfigError("victim: jobs must be >= 1");
  if (fine_tune_from && !(fine_tune_from->arch == arch)) {
    throw ConfigError("victim: fine-tune checkpoint architecture differs from arch");
  }
}

double VictimConfig::lr_at(std::size_t epoch) const {
  if (!lr_schedule) return lr;
  double out = lr;
  if (2 * epoch >= epochs) out /= 10;
  if (4 * epoch >= 3 * epochs) out /= 10;
  return out;
}

std::vector<std::size_t> VictimReport::tally() const {
  std::vector<std::size_t> out(num_classes, 0);
  for (const auto& r : rows) {
    if (r.prediction >= 0 && static_cast<std::size_t>(r.prediction) < num_classes) ++out[r.prediction];
  }
  return out;
}

std::vector<double> VictimReport::seed_accuracies() const {
  std::vector<double> out;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (i == 0 || rows[i].seed != rows[i - 1].seed) out.push_back(rows[i].val_accuracy);
  }
  return out;
}

double VictimReport::mean_val_accuracy() const {
  const auto acc = seed_accuracies();
  if (acc.empty()) return 0.0;
  return std::accumulate(acc.begin(), acc.end(), 0.0) / static_cast<double>(acc.size());
}

double VictimReport::std_val_accuracy() const {
  const auto acc = seed_accuracies();
  if (acc.size() < 2) return 0.0;
  const double mean = mean_val_accuracy();
  double ss = 0;
  for (double a : acc) ss += (a - mean) * (a - mean);
  return std::sqrt(ss / static_cast<double>(acc.size() - 1));
}

nlohmann::json VictimReport::to_json() const {
  nlohmann::json j;
  j["scheme"] = scheme_name(scheme);
  j["attempts"] = rows.size();
  j["success_rate"] = rows.empty() ? 0.0 : success_rate(*this);
  j["self_conceal_success"] = rows.empty() ? 0.0 : self_conceal_success(*this);
  j["tally"] = tally();
  j["val_accuracy_mean"] = mean_val_accuracy();
  j["val_accuracy_std"] = std_val_accuracy();
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"seed", r.seed},
                         {"target", r.target},
                         {"y_true", r.y_true},
                         {"y_adv", r.y_adv},
                         {"prediction", r.prediction},
                         {"val_accuracy", r.val_accuracy},
                         {"final_cw", r.cw_trace.empty() ? 0.0 : r.cw_trace.back()}});
  }
  return j;
}

void VictimReport::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.precision(9);
  out << "seed,target,epoch,cw_loss,prediction,val_accuracy\n";
  for (const auto& r : rows) {
    for (std::size_t e = 0; e < r.cw_trace.size(); ++e) {
      out << r.seed << "," << r.target << "," << e + 1 << "," << r.cw_trace[e] << ","
          << (e + 1 == r.cw_trace.size() ? std::to_string(r.prediction) : "") << ","
          << (e + 1 == r.cw_trace.size() ? std::to_string(r.val_accuracy) : "") << "\n";
    }
  }
}

namespace {

int argmax(std::span<const float> z) {
  return static_cast<int>(std::max_element(z.begin(), z.end()) - z.begin());
}

double trace_margin(const AttackSpec& spec, std::span<const float> z, int y_true) {
  if (spec.scheme == Scheme::kSelfConceal) return -cw_value(z, y_true);
  return cw_value(z, spec.y_adv);
}

}  // namespace

VictimReport evaluate(const PoisonSet& poisons, const AttackSpec& spec, const VictimConfig& cfg,
                      const LabeledSet& data, const LabeledSet& validation) {
  cfg.validate();
  data.validate();
  if (data.image_shape() != Shape{cfg.arch.height, cfg.arch.width, cfg.arch.channels} ||
      data.num_classes != cfg.arch.num_classes) {
    throw ConfigError("victim: data does not match the victim architecture");
  }
  for (auto idx : poisons.base_indices) {
    if (idx >= data.size()) throw ConfigError("victim: poison index " + std::to_string(idx) + " out of range");
  }
  const LabeledSet train = substitute_poisons(data, poisons);
  const std::size_t n_targets = spec.targets.size();
  std::vector<std::size_t> all(n_targets);
  std::iota(all.begin(), all.end(), 0);
  const Tensor<float> targets = n_targets ? gather_images<float>(spec.targets, all) : Tensor<float>();

  std::vector<std::vector<VictimRow>> per_seed(cfg.seeds.size());
  auto run = [&](std::size_t si) {
    const std::uint64_t seed = cfg.seeds[si];
    ModelState<float> s = cfg.fine_tune_from ? *cfg.fine_tune_from : init_model<float>(cfg.arch, seed);
    std::vector<VictimRow> rows(n_targets);
    for (std::size_t t = 0; t < n_targets; ++t) {
      rows[t].seed = seed;
      rows[t].target = t;
      rows[t].y_true = spec.targets.labels[t];
      rows[t].y_adv = spec.y_adv;
    }
    for (std::size_t e = 0; e < cfg.epochs; ++e) {
      TrainOptions o;
      o.lr = cfg.lr_at(e);
      o.batch_size = cfg.batch_size;
      o.shuffle_seed = derive_seed(seed, {0x76696374ULL, e});
      o.augment = cfg.augment;
      o.momentum = cfg.momentum;
      o.weight_decay = cfg.weight_decay;
      s = train_epoch(std::move(s), train, o);
      if (n_targets) {
        const auto logits = predict_logits(s, targets);
        const std::size_t c = logits.dim(1);
        for (std::size_t t = 0; t < n_targets; ++t) {
          const std::span<const float> z(logits.data() + t * c, c);
          rows[t].cw_trace.push_back(trace_margin(spec, z, rows[t].y_true));
          rows[t].prediction = argmax(z);
        }
      }
    }
    const double acc = accuracy(s, validation);
    if (rows.empty()) {
      VictimRow r;
      r.seed = seed;
      r.prediction = -1;
      rows.push_back(r);
    }
    for (auto& r : rows) r.val_accuracy = acc;
    per_seed[si] = std::move(rows);
  };

  const std::size_t jobs = std::min(cfg.jobs, cfg.seeds.size());
  if (jobs <= 1) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) run(i);
  } else {
    std::vector<std::thread> pool;
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex mu;
    for (std::size_t j = 0; j < jobs; ++j) {
      pool.emplace_back([&] {
        for (std::size_t i; (i = next.fetch_add(1)) < cfg.seeds.size();) {
          try {
            run(i);
          } catch (...) {
            std::lock_guard lock(mu);
            if (!error) error = std::current_exception();
          }
        }
      });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
  }

  VictimReport report;
  report.scheme = spec.scheme;
  report.num_classes = data.num_classes;
  for (auto& rows : per_seed) {
    for (auto& r : rows) report.rows.push_back(std::move(r));
  }
  return report;
}

VictimReport merge_reports(const std::vector<VictimReport>& reports) {
  VictimReport out;
  if (reports.empty()) return out;
  out.scheme = reports[0].scheme;
  out.num_classes = reports[0].num_classes;
  for (const auto& r : reports) {
    if (r.scheme != out.scheme || r.num_classes != out.num_classes) {
      throw ConfigError("merge_reports: reports disagree on scheme or class count");
    }
    out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
  }
  return out;
}

double success_rate(const VictimReport& report) {
  if (report.rows.empty()) throw ConfigError("success_rate: empty report");
  std::size_t k = 0;
  for (const auto& r : report.rows) k += r.prediction == r.y_adv;
  return static_cast<double>(k) / static_cast<double>(report.rows.size());
}

double self_conceal_success(const VictimReport& report) {
  if (report.rows.empty()) throw ConfigError("self_conceal_success: empty report");
  std::size_t k = 0;
  for (const auto& r : report.rows) k += r.prediction != r.y_true;
  return static_cast<double>(k) / static_cast<double>(report.rows.size());
}

Interval wilson_interval(std::size_t k, std::size_t n, double z) {
  if (n == 0) return {0.0, 1.0};
  const double nn = static_cast<double>(n), p = static_cast<double>(k) / nn, z2 = z * z;
  const double center = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double half = z * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn)) / (1 + z2 / nn);
  return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

double two_proportion_p_value(std::size_t k_a, std::size_t n_a, std::size_t k_b, std::size_t n_b) {
  if (n_a == 0 || n_b == 0) throw ConfigError("two_proportion_p_value: empty sample");
  const double pa = static_cast<double>(k_a) / static_cast<double>(n_a);
  const double pb = static_cast<double>(k_b) / static_cast<double>(n_b);
  const double pool = static_cast<double>(k_a + k_b) / static_cast<double>(n_a + n_b);
  const double se = std::sqrt(pool * (1 - pool) * (1.0 / static_cast<double>(n_a) + 1.0 / static_cast<double>(n_b)));
  if (se == 0) return pb > pa ? 0.0 : 1.0;
  const double z = (pb - pa) / se;
  return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace metapoison
