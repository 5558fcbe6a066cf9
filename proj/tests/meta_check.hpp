#pragma once

// Meta-gradient of the CW loss w.r.t. one poison's delta: engine result vs
// central finite differences of the hand-written unrolled pipeline.

#include <cmath>
#include <random>

#include "metapoison/crafting.hpp"
#include "unroll_oracle.hpp"

namespace metapoison::testing {

struct MetaCheck {
  double rel_error = 0;
  std::size_t parameters = 0;
  double grad_norm = 0;
};

inline MetaCheck check_meta_gradient(std::uint64_t seed, std::size_t unroll = 2, double h = 1e-4) {
  ArchSpec arch;
  arch.hidden = {8, 8};
  arch.height = 2;
  arch.width = 2;
  arch.channels = 3;
  arch.num_classes = 2;
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> pix(0.2, 0.8), small(-0.02, 0.02);

  LabeledSet data;
  data.height = data.width = 2;
  data.channels = 3;
  data.num_classes = 2;
  for (std::size_t i = 0; i < 20; ++i) {
    data.labels.push_back(static_cast<int>(i % 2));
    for (std::size_t p = 0; p < 12; ++p) data.images.push_back(static_cast<float>(pix(rng)));
  }
  const std::size_t poison_row = 7;
  LabeledSet target_set = data.subset(std::vector<std::size_t>{0});
  for (auto& v : target_set.images) v = static_cast<float>(pix(rng));

  const auto model = init_model<double>(arch, seed + 1);
  PoisonTensors<double> poisons;
  poisons.bases.push_back(image_tensor<double>(data, poison_row));
  Tensor<double> grid(Shape{3, 3, 3, 3}), delta(Shape{2, 2, 3});
  for (auto& v : grid.storage()) v = small(rng);
  for (auto& v : delta.storage()) v = small(rng);
  poisons.grids.push_back(grid);
  poisons.deltas.push_back(delta);
  poisons.stencils.push_back(color_stencil(poisons.bases[0], 3));

  AttackSpec spec;
  spec.targets = target_set;
  spec.y_adv = 1;
  spec.poison_class = 1;
  const double alpha = 0.5;
  std::vector<std::size_t> rows(20);
  std::vector<std::ptrdiff_t> slot(20, -1);
  for (std::size_t i = 0; i < 20; ++i) rows[i] = (i * 7 + 3) % 20;
  for (std::size_t i = 0; i < 20; ++i) {
    if (rows[i] == poison_row) slot[i] = 0;
  }
  const auto engine = batch_meta_gradient(model, data, poisons, rows, slot, unroll, alpha, spec, adv_batch(spec, 0));

  const Mlp net = to_mlp(model);
  const auto base = poisons.bases[0].storage();
  const std::vector<double> tgt(target_set.images.begin(), target_set.images.end());
  std::vector<int> labels;
  for (auto r : rows) labels.push_back(data.labels[r]);
  auto loss_at = [&](const std::vector<double>& d) {
    std::vector<std::vector<double>> batch;
    for (auto r : rows) {
      if (r == poison_row) {
        batch.push_back(render_manual(base, grid.storage(), 3, d));
      } else {
        auto img = data.image(r);
        batch.emplace_back(img.begin(), img.end());
      }
    }
    return unrolled_cw(net, batch, labels, unroll, alpha, tgt, spec.y_adv);
  };
  MetaCheck out;
  out.parameters = arch.parameter_count();
  double diff = 0, na = 0, nn = 0;
  for (std::size_t j = 0; j < delta.size(); ++j) {
    auto plus = delta.storage(), minus = delta.storage();
    plus[j] += h;
    minus[j] -= h;
    const double fd = (loss_at(plus) - loss_at(minus)) / (2 * h);
    const double an = engine.delta_grads[0][j];
    diff += (an - fd) * (an - fd);
    na += an * an;
    nn += fd * fd;
  }
  out.grad_norm = std::sqrt(na);
  out.rel_error = std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-12});
  return out;
}

}  // namespace metapoison::testing
