#pragma once

// Plain double-precision reimplementation of render -> K SGD steps -> CW
// margin for MLPs, written without the graph engine so it can serve as a
// finite-difference oracle for meta-gradients.

#include <algorithm>
#include <cmath>
#include <vector>

#include "metapoison/models.hpp"

namespace metapoison::testing {

struct Dense {
  std::size_t in = 0, out = 0;
  std::vector<double> w;  // in x out, row-major
  std::vector<double> b;
};

using Mlp = std::vector<Dense>;

inline Mlp to_mlp(const ModelState<double>& s) {
  Mlp net;
  for (std::size_t l = 0; 2 * l + 1 < s.params.size(); ++l) {
    const auto& b = s.params[2 * l];
    const auto& w = s.params[2 * l + 1];
    net.push_back({w.dim(0), w.dim(1), w.storage(), b.storage()});
  }
  return net;
}

/// Activations per layer for one input row; acts[0] is the input.
inline std::vector<std::vector<double>> mlp_forward(const Mlp& net, const std::vector<double>& x) {
  std::vector<std::vector<double>> acts{x};
  for (std::size_t l = 0; l < net.size(); ++l) {
    const auto& d = net[l];
    std::vector<double> y(d.b);
    for (std::size_t i = 0; i < d.in; ++i) {
      for (std::size_t j = 0; j < d.out; ++j) y[j] += acts.back()[i] * d.w[i * d.out + j];
    }
    if (l + 1 < net.size()) {
      for (auto& v : y) v = std::max(v, 0.0);
    }
    acts.push_back(std::move(y));
  }
  return acts;
}

/// One SGD step on the mean cross-entropy of `rows`.
inline Mlp sgd_step(const Mlp& net, const std::vector<std::vector<double>>& rows, const std::vector<int>& labels,
                    double lr) {
  Mlp grad = net;
  for (auto& d : grad) {
    std::fill(d.w.begin(), d.w.end(), 0.0);
    std::fill(d.b.begin(), d.b.end(), 0.0);
  }
  const double scale = 1.0 / static_cast<double>(rows.size());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto acts = mlp_forward(net, rows[r]);
    const auto& z = acts.back();
    const double top = *std::max_element(z.begin(), z.end());
    double total = 0;
    for (double v : z) total += std::exp(v - top);
    std::vector<double> g(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
      g[j] = (std::exp(z[j] - top) / total - (static_cast<int>(j) == labels[r] ? 1.0 : 0.0)) * scale;
    }
    for (std::size_t l = net.size(); l-- > 0;) {
      const auto& d = net[l];
      const auto& in = acts[l];
      std::vector<double> gin(d.in, 0.0);
      for (std::size_t i = 0; i < d.in; ++i) {
        for (std::size_t j = 0; j < d.out; ++j) {
          grad[l].w[i * d.out + j] += in[i] * g[j];
          gin[i] += d.w[i * d.out + j] * g[j];
        }
      }
      for (std::size_t j = 0; j < d.out; ++j) grad[l].b[j] += g[j];
      if (l > 0) {
        for (std::size_t i = 0; i < d.in; ++i) gin[i] = in[i] > 0 ? gin[i] : 0.0;
      }
      g = std::move(gin);
    }
  }
  Mlp out = net;
  for (std::size_t l = 0; l < net.size(); ++l) {
    for (std::size_t i = 0; i < out[l].w.size(); ++i) out[l].w[i] -= lr * grad[l].w[i];
    for (std::size_t i = 0; i < out[l].b.size(); ++i) out[l].b[i] -= lr * grad[l].b[i];
  }
  return out;
}

inline double cw_margin(const std::vector<double>& z, int y_adv) {
  double best = -1e300;
  for (std::size_t j = 0; j < z.size(); ++j) {
    if (static_cast<int>(j) != y_adv) best = std::max(best, z[j]);
  }
  return best - z[static_cast<std::size_t>(y_adv)];
}

/// clamp(base + trilinear(grid)(base) + delta, 0, 1) for (..., 3) images.
inline std::vector<double> render_manual(const std::vector<double>& base, const std::vector<double>& grid,
                                         std::size_t grid_size, const std::vector<double>& delta) {
  std::vector<double> out(base.size());
  const double top = static_cast<double>(grid_size - 1);
  for (std::size_t p = 0; p < base.size() / 3; ++p) {
    std::size_t i0[3];
    double f[3];
    for (std::size_t c = 0; c < 3; ++c) {
      const double u = std::clamp(base[p * 3 + c], 0.0, 1.0) * top;
      i0[c] = std::min(static_cast<std::size_t>(std::floor(u)), grid_size - 2);
      f[c] = u - static_cast<double>(i0[c]);
    }
    double disp[3] = {0, 0, 0};
    for (int dr = 0; dr < 2; ++dr) {
      for (int dg = 0; dg < 2; ++dg) {
        for (int db = 0; db < 2; ++db) {
          const double w = (dr ? f[0] : 1 - f[0]) * (dg ? f[1] : 1 - f[1]) * (db ? f[2] : 1 - f[2]);
          const std::size_t cell = ((i0[0] + dr) * grid_size + (i0[1] + dg)) * grid_size + (i0[2] + db);
          for (std::size_t c = 0; c < 3; ++c) disp[c] += w * grid[cell * 3 + c];
        }
      }
    }
    for (std::size_t c = 0; c < 3; ++c) {
      out[p * 3 + c] = std::clamp(base[p * 3 + c] + disp[c] + delta[p * 3 + c], 0.0, 1.0);
    }
  }
  return out;
}

/// CW margin of `target` after K SGD steps on `rows` (same batch each step).
inline double unrolled_cw(const Mlp& net0, const std::vector<std::vector<double>>& rows, const std::vector<int>& labels,
                          std::size_t unroll, double lr, const std::vector<double>& target, int y_adv) {
  Mlp net = net0;
  for (std::size_t k = 0; k < unroll; ++k) net = sgd_step(net, rows, labels, lr);
  return cw_margin(mlp_forward(net, target).back(), y_adv);
}

}  // namespace metapoison::testing
