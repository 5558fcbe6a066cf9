#include "metapoison/crafting.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <random>
#include <thread>

#include "metapoison/seeds.hpp"

namespace metapoison {

void CraftConfig::validate() const {
  if (ensemble < 1) throw ConfigError("craft: ensemble size M must be >= 1");
  if (epoch_range < 1) throw ConfigError("craft: epoch range T must be >= 1");
  if (unroll < 1) throw ConfigError("craft: unroll steps K must be >= 1");
  if (alpha < 0) throw ConfigError("craft: inner lr alpha must be >= 0");
  if (beta < 0) throw ConfigError("craft: outer lr beta must be >= 0");
  if (beta_decay <= 0) throw ConfigError("craft: beta_decay must be > 0");
  if (beta_period < 1) throw ConfigError("craft: beta_period must be >= 1");
  if (batch_size < 1) throw ConfigError("craft: batch_size must be >= 1");
  if (eps < 0 || eps_c < 0) throw ConfigError("craft: eps and eps_c must be >= 0");
  if (grid_size < 2) throw ConfigError("craft: grid_size must be >= 2");
  if (adam_beta1 < 0 || adam_beta1 >= 1 || adam_beta2 < 0 || adam_beta2 >= 1 || adam_eps <= 0) {
    throw ConfigError("craft: invalid Adam constants");
  }
  if (watermark_opacity && (*watermark_opacity < 0 || *watermark_opacity > 1)) {
    throw ConfigError("craft: watermark_opacity must be in [0, 1]");
  }
  if (jobs < 1) throw ConfigError("craft: jobs must be >= 1");
}

double CraftConfig::outer_lr(std::size_t step) const {
  return beta / std::pow(beta_decay, static_cast<double>(step / beta_period));
}

void CraftTrace::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw ConfigError("cannot write trace " + path.string());
  out << "step,lr,mean_adv_loss,seconds";
  const std::size_t members = rows.empty() ? 0 : rows[0].member_epochs.size();
  for (std::size_t m = 0; m < members; ++m) out << ",epoch_m" << m;
  out << "\n";
  out.precision(9);
  for (const auto& r : rows) {
    out << r.step << "," << r.lr << "," << r.mean_adv_loss << "," << r.seconds;
    for (auto e : r.member_epochs) out << "," << e;
    out << "\n";
  }
}

std::vector<std::size_t> stagger_epochs(std::size_t members, std::size_t epoch_range) {
  std::vector<std::size_t> out(members);
  for (std::size_t m = 0; m < members; ++m) out[m] = m * epoch_range / members;
  return out;
}

std::uint64_t member_shuffle_seed(const CraftConfig& cfg, std::size_t m, std::size_t gen, std::size_t epoch) {
  return derive_seed(cfg.shuffle_seed, {m, gen, epoch});
}

std::uint64_t member_init_seed(const CraftConfig& cfg, std::size_t m, std::size_t gen) {
  return derive_seed(cfg.init_seed, {m, gen});
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t shuffle_seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(shuffle_seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

namespace {

template <typename F>
void parallel_for(std::size_t n, std::size_t jobs, F&& body) {
  jobs = std::min(jobs, n);
  if (jobs <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  for (std::size_t j = 0; j < jobs; ++j) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < n;) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (error) std::rethrow_exception(error);
}

TrainOptions surrogate_options(const CraftConfig& cfg, std::uint64_t seed) {
  TrainOptions o;
  o.lr = cfg.alpha;
  o.batch_size = cfg.batch_size;
  o.shuffle_seed = seed;
  return o;
}

}  // namespace

template <typename T>
std::vector<ModelState<T>> stagger_ensemble(const CraftConfig& cfg, const ArchSpec& arch, const LabeledSet& clean) {
  if (clean.size() == 0) throw ConfigError("stagger_ensemble: empty training set");
  const auto epochs = stagger_epochs(cfg.ensemble, cfg.epoch_range);
  std::vector<ModelState<T>> out(cfg.ensemble);
  parallel_for(cfg.ensemble, cfg.jobs, [&](std::size_t m) {
    auto s = init_model<T>(arch, member_init_seed(cfg, m, 0));
    for (std::size_t e = 0; e < epochs[m]; ++e) {
      s = train_epoch(std::move(s), clean, surrogate_options(cfg, member_shuffle_seed(cfg, m, 0, e)));
    }
    out[m] = std::move(s);
  });
  return out;
}

template <typename T>
PoisonTensors<T> poison_tensors(const PoisonSet& poisons) {
  PoisonTensors<T> out;
  for (std::size_t i = 0; i < poisons.size(); ++i) {
    out.bases.push_back(poisons.bases[i].cast<T>());
    out.grids.push_back(poisons.params[i].grid.cast<T>());
    out.deltas.push_back(poisons.params[i].delta.cast<T>());
    out.stencils.push_back(color_stencil(out.bases.back(), poisons.params[i].grid_size()));
  }
  return out;
}

template <typename T>
MetaGradient<T> batch_meta_gradient(const ModelState<T>& model, const LabeledSet& data, const PoisonTensors<T>& poisons,
                                    std::span<const std::size_t> rows, std::span<const std::ptrdiff_t> slot,
                                    std::size_t unroll, double alpha, const AttackSpec& spec, const AdvBatch& adv) {
  if (rows.size() != slot.size() || rows.empty()) throw ShapeError("batch_meta_gradient: rows and slots differ");
  Graph<T> g;
  std::vector<Var> theta = bind_parameters(g, model, true);

  // Batch = clean runs as constants, poisons rendered from their leaves.
  std::vector<Var> parts, leaves;
  std::vector<std::size_t> used;
  std::vector<std::size_t> clean_run;
  Shape one = data.image_shape();
  one.insert(one.begin(), 1);
  auto flush = [&] {
    if (clean_run.empty()) return;
    parts.push_back(g.constant(gather_images<T>(data, clean_run)));
    clean_run.clear();
  };
  std::vector<int> labels;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    labels.push_back(data.labels.at(rows[r]));
    if (slot[r] < 0) {
      clean_run.push_back(rows[r]);
      continue;
    }
    flush();
    const auto s = static_cast<std::size_t>(slot[r]);
    const Var grid = g.parameter(poisons.grids.at(s));
    const Var delta = g.parameter(poisons.deltas.at(s));
    leaves.push_back(grid);
    leaves.push_back(delta);
    used.push_back(s);
    parts.push_back(g.reshape(render(g, poisons.bases[s], grid, delta, poisons.stencils[s]), one));
  }
  flush();
  const Var x = parts.size() == 1 ? parts[0] : g.concat(parts);

  for (std::size_t k = 0; k < unroll; ++k) {
    const Var loss = train_loss(g, forward(g, model.arch, theta, x).logits, labels);
    const auto grads = g.gradient_nodes(loss, theta);
    for (std::size_t i = 0; i < theta.size(); ++i) {
      theta[i] = sgd_update_node(g, theta[i], grads[i], static_cast<T>(alpha));
    }
  }
  const auto& ai = adv.images;
  std::vector<std::size_t> all(ai.size());
  std::iota(all.begin(), all.end(), 0);
  const Var target = g.constant(gather_images<T>(ai, all));
  const Var loss = adv_loss(g, spec, forward(g, model.arch, theta, target).logits, adv);

  MetaGradient<T> out;
  out.adv_loss = static_cast<double>(g.value(loss).item());
  out.batches = 1;
  for (std::size_t i = 0; i < poisons.grids.size(); ++i) {
    out.grid_grads.emplace_back(poisons.grids[i].shape());
    out.delta_grads.emplace_back(poisons.deltas[i].shape());
  }
  if (!leaves.empty()) {
    auto grads = g.gradients(loss, leaves);
    for (std::size_t j = 0; j < used.size(); ++j) {
      out.grid_grads[used[j]] = std::move(grads[2 * j]);
      out.delta_grads[used[j]] = std::move(grads[2 * j + 1]);
    }
  }
  return out;
}

template <typename T>
MetaGradient<T> epoch_meta_gradient(const ModelState<T>& model, const LabeledSet& data, const PoisonSet& poisons,
                                    const PoisonTensors<T>& tensors, std::uint64_t shuffle_seed,
                                    const CraftConfig& cfg, const AttackSpec& spec, const AdvBatch& adv) {
  std::vector<std::ptrdiff_t> slot_of(data.size(), -1);
  for (std::size_t i = 0; i < poisons.size(); ++i) slot_of.at(poisons.base_indices[i]) = static_cast<std::ptrdiff_t>(i);
  const auto order = epoch_order(data.size(), shuffle_seed);

  MetaGradient<T> total;
  for (std::size_t i = 0; i < poisons.size(); ++i) {
    total.grid_grads.emplace_back(tensors.grids[i].shape());
    total.delta_grads.emplace_back(tensors.deltas[i].shape());
  }
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    const std::span<const std::size_t> rows(order.data() + start, end - start);
    std::vector<std::ptrdiff_t> slots;
    bool any = false;
    for (auto r : rows) {
      slots.push_back(slot_of[r]);
      any = any || slot_of[r] >= 0;
    }
    if (!any) continue;
    auto part = batch_meta_gradient(model, data, tensors, rows, slots, cfg.unroll, cfg.alpha, spec, adv);
    total.adv_loss += part.adv_loss;
    ++total.batches;
    for (auto s : slots) {
      if (s < 0) continue;
      total.grid_grads[static_cast<std::size_t>(s)] = std::move(part.grid_grads[static_cast<std::size_t>(s)]);
      total.delta_grads[static_cast<std::size_t>(s)] = std::move(part.delta_grads[static_cast<std::size_t>(s)]);
    }
  }
  if (total.batches) total.adv_loss /= static_cast<double>(total.batches);
  return total;
}

CraftResult craft(const CraftConfig& cfg, const ArchSpec& arch, const AttackSpec& spec, const LabeledSet& data,
                  PoisonSet poisons, const ModelState<float>* pretrained, const CraftCallback& callback) {
  cfg.validate();
  data.validate();
  spec.validate(data.num_classes);
  if (spec.poison_class) {
    if (data.indices_of(*spec.poison_class).empty()) {
      throw InfeasibleError("poison class " + std::to_string(*spec.poison_class) + " is absent from the data");
    }
    for (int l : poisons.labels) {
      if (l != *spec.poison_class) throw ConfigError("craft: poison base label differs from poison_class");
    }
  }
  for (auto idx : poisons.base_indices) {
    if (idx >= data.size()) throw ConfigError("craft: poison base index out of range");
  }
  poisons.check_feasible();

  std::vector<ModelState<float>> members;
  if (cfg.fine_tune) {
    if (!pretrained) throw ConfigError("craft: fine-tune mode needs a pretrained model");
    members.push_back(*pretrained);
  } else {
    members = stagger_ensemble<float>(cfg, arch, data);
  }
  const std::size_t M = members.size();
  std::vector<std::size_t> generation(M, 0);

  struct AdamState {
    std::vector<double> m, v;
  };
  std::vector<AdamState> adam_grid(poisons.size()), adam_delta(poisons.size());
  for (std::size_t i = 0; i < poisons.size(); ++i) {
    adam_grid[i] = {std::vector<double>(poisons.params[i].grid.size()), std::vector<double>(poisons.params[i].grid.size())};
    adam_delta[i] = {std::vector<double>(poisons.params[i].delta.size()),
                     std::vector<double>(poisons.params[i].delta.size())};
  }
  auto tensors = poison_tensors<float>(poisons);

  CraftResult result;
  for (std::size_t step = 0; step < cfg.craft_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    const AdvBatch adv = adv_batch(spec, derive_seed(cfg.craft_seed, {step}));
    for (std::size_t i = 0; i < poisons.size(); ++i) {
      tensors.grids[i] = poisons.params[i].grid;
      tensors.deltas[i] = poisons.params[i].delta;
    }

    TraceRow row;
    row.step = step;
    row.lr = cfg.outer_lr(step);
    for (const auto& s : members) row.member_epochs.push_back(s.epoch);

    std::vector<MetaGradient<float>> parts(M);
    parallel_for(M, cfg.jobs, [&](std::size_t m) {
      const std::uint64_t seed = cfg.fine_tune ? member_shuffle_seed(cfg, 0, 0, step)
                                               : member_shuffle_seed(cfg, m, generation[m], members[m].epoch);
      parts[m] = epoch_meta_gradient(members[m], data, poisons, tensors, seed, cfg, spec, adv);
    });

    // Member average in fixed order, then one Adam step in pixel units.
    double loss = 0;
    for (const auto& p : parts) loss += p.adv_loss;
    row.mean_adv_loss = loss / static_cast<double>(M);
    const double lr_norm = row.lr / 255.0;
    const double t = static_cast<double>(step + 1);
    const double c1 = 1.0 - std::pow(cfg.adam_beta1, t), c2 = 1.0 - std::pow(cfg.adam_beta2, t);
    auto adam = [&](Tensor<float>& param, AdamState& st, auto grad_of) {
      for (std::size_t j = 0; j < param.size(); ++j) {
        double gsum = 0;
        for (std::size_t m = 0; m < M; ++m) gsum += static_cast<double>(grad_of(parts[m])[j]);
        const double gp = gsum / static_cast<double>(M) / 255.0;
        st.m[j] = cfg.adam_beta1 * st.m[j] + (1 - cfg.adam_beta1) * gp;
        st.v[j] = cfg.adam_beta2 * st.v[j] + (1 - cfg.adam_beta2) * gp * gp;
        const double update = lr_norm * (st.m[j] / c1) / (std::sqrt(st.v[j] / c2) + cfg.adam_eps);
        param[j] = static_cast<float>(static_cast<double>(param[j]) - update);
      }
    };
    for (std::size_t i = 0; i < poisons.size(); ++i) {
      adam(poisons.params[i].grid, adam_grid[i], [&](const MetaGradient<float>& p) -> const Tensor<float>& {
        return p.grid_grads[i];
      });
      adam(poisons.params[i].delta, adam_delta[i], [&](const MetaGradient<float>& p) -> const Tensor<float>& {
        return p.delta_grads[i];
      });
      poisons.params[i] = project(std::move(poisons.params[i]));
    }
    poisons.render_all();
    poisons.check_feasible();

    if (!cfg.fine_tune) {
      parallel_for(M, cfg.jobs, [&](std::size_t m) {
        auto& s = members[m];
        s = train_epoch(std::move(s), data, surrogate_options(cfg, member_shuffle_seed(cfg, m, generation[m], s.epoch)));
        if (cfg.reinit && s.epoch > cfg.epoch_range) {
          ++generation[m];
          s = init_model<float>(arch, member_init_seed(cfg, m, generation[m]));
        }
      });
    }
    row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.trace.rows.push_back(std::move(row));
    if (callback) callback(step, poisons);
  }
  result.poisons = std::move(poisons);
  return result;
}

namespace {

Var collision_objective(Graph<float>& g, const ModelState<float>& model, const Tensor<float>& base, Var delta,
                        const Tensor<float>& target_features, double beta_fc) {
  Shape one = base.shape();
  one.insert(one.begin(), 1);
  const Var x = g.clamp(g.add(g.constant(base), delta), 0.0f, 1.0f);
  const Var phi = forward(model, g.reshape(x, one), g).penultimate;
  const Var diff = g.sub(phi, g.constant(target_features));
  const Var move = g.sub(x, g.constant(base));
  return g.add(g.sum(g.mul(diff, diff)), g.scale(g.sum(g.mul(move, move)), static_cast<float>(beta_fc)));
}

Tensor<float> features(const ModelState<float>& model, const Tensor<float>& image) {
  Shape one = image.shape();
  one.insert(one.begin(), 1);
  Graph<float> g;
  return g.value(forward(model, g.constant(image.reshaped(one)), g).penultimate);
}

}  // namespace

double feature_distance(const ModelState<float>& model, const Tensor<float>& a, const Tensor<float>& b) {
  const auto fa = features(model, a), fb = features(model, b);
  double d = 0;
  for (std::size_t i = 0; i < fa.size(); ++i) d += (static_cast<double>(fa[i]) - fb[i]) * (static_cast<double>(fa[i]) - fb[i]);
  return d;
}

Tensor<float> feature_collision_delta(const ModelState<float>& model, const Tensor<float>& base,
                                      const Tensor<float>& target, const FeatureCollisionConfig& cfg) {
  if (base.shape() != target.shape()) throw ShapeError("feature collision: base and target shapes differ");
  const auto tf = features(model, target);
  const float bound = representable_bound<float>(cfg.eps / 255.0);
  Tensor<float> delta(base.shape());
  auto evaluate = [&](const Tensor<float>& d, Tensor<float>* grad) {
    Graph<float> g;
    const Var dv = g.parameter(d);
    const Var obj = collision_objective(g, model, base, dv, tf, cfg.beta_fc);
    if (grad) {
      const Var wrt[] = {dv};
      *grad = g.gradients(obj, wrt)[0];
    }
    return static_cast<double>(g.value(obj).item());
  };
  Tensor<float> grad;
  double current = evaluate(delta, &grad);
  double step = cfg.step;
  for (std::size_t it = 0; it < cfg.iters && step > 1e-12; ++it) {
    Tensor<float> cand = delta;
    for (std::size_t j = 0; j < cand.size(); ++j) {
      cand[j] = std::clamp(static_cast<float>(cand[j] - step * grad[j]), -bound, bound);
    }
    const double value = evaluate(cand, nullptr);
    if (value < current) {
      delta = std::move(cand);
      current = evaluate(delta, &grad);
      step = std::min(step * 1.5, cfg.step);
    } else {
      step *= 0.5;
    }
  }
  return delta;
}

PoisonSet craft_feature_collision(const ModelState<float>& model, PoisonSet poisons, const Tensor<float>& target,
                                  const FeatureCollisionConfig& cfg) {
  for (std::size_t i = 0; i < poisons.size(); ++i) {
    auto& p = poisons.params[i];
    p.eps = cfg.eps;
    std::fill(p.grid.storage().begin(), p.grid.storage().end(), 0.0f);
    p.delta = feature_collision_delta(model, poisons.bases[i], target, cfg);
  }
  poisons.render_all();
  poisons.check_feasible();
  return poisons;
}

#define METAPOISON_INSTANTIATE(T)                                                                                  \
  template std::vector<ModelState<T>> stagger_ensemble<T>(const CraftConfig&, const ArchSpec&, const LabeledSet&); \
  template PoisonTensors<T> poison_tensors<T>(const PoisonSet&);                                                   \
  template MetaGradient<T> batch_meta_gradient<T>(const ModelState<T>&, const LabeledSet&, const PoisonTensors<T>&, \
                                                  std::span<const std::size_t>, std::span<const std::ptrdiff_t>,    \
                                                  std::size_t, double, const AttackSpec&, const AdvBatch&);         \
  template MetaGradient<T> epoch_meta_gradient<T>(const ModelState<T>&, const LabeledSet&, const PoisonSet&,        \
                                                  const PoisonTensors<T>&, std::uint64_t, const CraftConfig&,       \
                                                  const AttackSpec&, const AdvBatch&);

METAPOISON_INSTANTIATE(float)
METAPOISON_INSTANTIATE(double)
#undef METAPOISON_INSTANTIATE

}  // namespace metapoison
