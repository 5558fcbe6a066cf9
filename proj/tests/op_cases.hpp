#pragma once

// Randomized instances of every recorded op, shared by the unit suite and the
// acceptance suite.

#include <algorithm>
#include <memory>
#include <numeric>
#include <string>

#include "gradcheck.hpp"

namespace metapoison::testing {

struct OpInstance {
  Builder op;  // returns the (possibly non-scalar) op output
  std::vector<Tensor<double>> inputs;
};

struct OpCase {
  std::string name;
  std::function<OpInstance(std::mt19937_64&)> make;
  bool second_order = true;  // also check double backward
};

inline std::size_t pick(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Distinct, well-separated values (no ties within a finite-difference step).
inline Tensor<double> distinct_values(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::vector<std::size_t> order(t.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  for (std::size_t i = 0; i < t.size(); ++i) {
    t[i] = -1.0 + 2.0 * (static_cast<double>(order[i]) + 0.5) / static_cast<double>(t.size());
  }
  return t;
}

/// Turns an op output into a scalar by contracting with fixed random weights.
inline Builder scalarize(const OpInstance& inst, std::mt19937_64& rng) {
  Graph<double> probe;
  std::vector<Var> vars;
  for (const auto& t : inst.inputs) vars.push_back(probe.parameter(t));
  const Shape out_shape = probe.shape(inst.op(probe, vars));
  auto weights = std::make_shared<Tensor<double>>(random_tensor(out_shape, rng));
  return [op = inst.op, weights](Graph<double>& g, std::span<const Var> in) {
    return g.sum(g.mul(op(g, in), g.constant(*weights)));
  };
}

inline std::vector<OpCase> op_cases() {
  std::vector<OpCase> cases;
  auto binary = [](const char* name, Var (Graph<double>::*fn)(Var, Var)) {
    return OpCase{name, [fn](std::mt19937_64& rng) {
                    const Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
                    return OpInstance{[fn](Graph<double>& g, std::span<const Var> in) { return (g.*fn)(in[0], in[1]); },
                                      {random_tensor(s, rng), random_tensor(s, rng)}};
                  }};
  };
  cases.push_back(binary("add", &Graph<double>::add));
  cases.push_back(binary("sub", &Graph<double>::sub));
  cases.push_back(binary("mul", &Graph<double>::mul));

  cases.push_back({"scale", [](std::mt19937_64& rng) {
                     const double c = std::uniform_real_distribution<double>(-3, 3)(rng);
                     return OpInstance{[c](Graph<double>& g, std::span<const Var> in) { return g.scale(in[0], c); },
                                       {random_tensor({pick(rng, 1, 6)}, rng)}};
                   }});
  cases.push_back({"matmul", [](std::mt19937_64& rng) {
                     const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 4), n = pick(rng, 1, 4);
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) { return g.matmul(in[0], in[1]); },
                                       {random_tensor({m, k}, rng), random_tensor({k, n}, rng)}};
                   }});
  cases.push_back({"transpose", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         return g.mul(g.transpose(in[0]), g.transpose(in[0]));
                                       },
                                       {random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}};
                   }});
  cases.push_back({"reshape", [](std::mt19937_64& rng) {
                     const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4);
                     return OpInstance{[a, b](Graph<double>& g, std::span<const Var> in) {
                                         Var r = g.reshape(in[0], {b, a});
                                         return g.mul(r, r);
                                       },
                                       {random_tensor({a, b}, rng)}};
                   }});
  cases.push_back({"sum_axis", [](std::mt19937_64& rng) {
                     const Shape s{pick(rng, 1, 3), pick(rng, 1, 3), pick(rng, 1, 3)};
                     const std::size_t axis = pick(rng, 0, 2);
                     return OpInstance{[axis](Graph<double>& g, std::span<const Var> in) {
                                         Var r = g.sum_axis(g.mul(in[0], in[0]), axis);
                                         return r;
                                       },
                                       {random_tensor(s, rng)}};
                   }});
  cases.push_back({"broadcast_axis", [](std::mt19937_64& rng) {
                     const Shape s{pick(rng, 1, 3), pick(rng, 1, 3)};
                     const std::size_t axis = pick(rng, 0, 2), count = pick(rng, 1, 3);
                     return OpInstance{[axis, count](Graph<double>& g, std::span<const Var> in) {
                                         Var b = g.broadcast_axis(in[0], axis, count);
                                         return g.mul(b, b);
                                       },
                                       {random_tensor(s, rng)}};
                   }});
  cases.push_back({"sum", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         return g.sum(g.mul(in[0], in[0]));
                                       },
                                       {random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}};
                   }});
  cases.push_back({"mean", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         return g.mean(g.mul(in[0], in[0]));
                                       },
                                       {random_tensor({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}};
                   }});
  cases.push_back({"broadcast_scalar", [](std::mt19937_64& rng) {
                     const Shape s{pick(rng, 1, 3), pick(rng, 1, 3)};
                     return OpInstance{[s](Graph<double>& g, std::span<const Var> in) {
                                         Var b = g.broadcast_scalar(in[0], s);
                                         return g.mul(b, b);
                                       },
                                       {random_tensor({1}, rng)}};
                   }});
  cases.push_back({"relu", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         Var r = g.relu(in[0]);
                                         return g.mul(r, r);
                                       },
                                       {away_from_zero({pick(rng, 1, 4), pick(rng, 1, 4)}, rng)}};
                   }});
  cases.push_back({"clamp", [](std::mt19937_64& rng) {
                     // Clamp bounds sit at +-0.5; keep inputs off the bounds.
                     Tensor<double> x = away_from_zero({pick(rng, 1, 4), pick(rng, 1, 4)}, rng);
                     for (auto& v : x.storage()) {
                       if (std::abs(std::abs(v) - 0.5) < 0.02) v *= 1.1;
                     }
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         Var c = g.clamp(in[0], -0.5, 0.5);
                                         return g.mul(c, in[0]);
                                       },
                                       {x}};
                   }});
  cases.push_back({"log", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) { return g.log(in[0]); },
                                       {random_tensor({pick(rng, 1, 6)}, rng, 0.2, 3.0)}};
                   }});
  cases.push_back({"reciprocal", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) { return g.reciprocal(in[0]); },
                                       {random_tensor({pick(rng, 1, 6)}, rng, 0.3, 3.0)}};
                   }});
  cases.push_back({"softmax", [](std::mt19937_64& rng) {
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) { return g.softmax(in[0]); },
                                       {random_tensor({pick(rng, 1, 4), pick(rng, 2, 5)}, rng, -2, 2)}};
                   }});
  cases.push_back({"softmax_xent", [](std::mt19937_64& rng) {
                     const std::size_t rows = pick(rng, 1, 4), cols = pick(rng, 2, 5);
                     std::vector<int> labels(rows);
                     for (auto& l : labels) l = static_cast<int>(pick(rng, 0, cols - 1));
                     return OpInstance{[labels](Graph<double>& g, std::span<const Var> in) {
                                         return g.softmax_xent(in[0], labels);
                                       },
                                       {random_tensor({rows, cols}, rng, -2, 2)}};
                   }});
  cases.push_back({"gather", [](std::mt19937_64& rng) {
                     const std::size_t n = pick(rng, 2, 8), m = pick(rng, 1, 8);
                     auto idx = std::make_shared<std::vector<std::uint32_t>>(m);
                     for (auto& i : *idx) i = static_cast<std::uint32_t>(pick(rng, 0, n - 1));
                     return OpInstance{[idx, m](Graph<double>& g, std::span<const Var> in) {
                                         Var r = g.gather(in[0], idx, {m});
                                         return g.mul(r, r);
                                       },
                                       {random_tensor({n}, rng)}};
                   }});
  cases.push_back({"scatter_add", [](std::mt19937_64& rng) {
                     const std::size_t n = pick(rng, 2, 8), m = pick(rng, 1, 8);
                     auto idx = std::make_shared<std::vector<std::uint32_t>>(m);
                     for (auto& i : *idx) i = static_cast<std::uint32_t>(pick(rng, 0, n - 1));
                     return OpInstance{[idx, n](Graph<double>& g, std::span<const Var> in) {
                                         Var r = g.scatter_add(in[0], idx, {n});
                                         return g.mul(r, r);
                                       },
                                       {random_tensor({m}, rng)}};
                   }});
  cases.push_back({"concat", [](std::mt19937_64& rng) {
                     const std::size_t cols = pick(rng, 1, 3);
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         const Var c = g.concat(in);
                                         return g.mul(c, c);
                                       },
                                       {random_tensor({pick(rng, 1, 3), cols}, rng),
                                        random_tensor({pick(rng, 1, 3), cols}, rng),
                                        random_tensor({pick(rng, 1, 3), cols}, rng)}};
                   }});
  cases.push_back({"slice", [](std::mt19937_64& rng) {
                     const std::size_t rows = pick(rng, 1, 5);
                     const std::size_t b = pick(rng, 0, rows - 1), e = pick(rng, b + 1, rows);
                     return OpInstance{[b, e](Graph<double>& g, std::span<const Var> in) {
                                         const Var s = g.slice(in[0], b, e);
                                         return g.mul(s, s);
                                       },
                                       {random_tensor({rows, pick(rng, 1, 3)}, rng)}};
                   }});
  cases.push_back({"pad", [](std::mt19937_64& rng) {
                     const std::size_t rows = pick(rng, 1, 3), b = pick(rng, 0, 2), extra = pick(rng, 0, 2);
                     return OpInstance{[b, total = b + rows + extra](Graph<double>& g, std::span<const Var> in) {
                                         const Var p = g.pad(in[0], b, total);
                                         return g.mul(p, p);
                                       },
                                       {random_tensor({rows, pick(rng, 1, 3)}, rng)}};
                   }});
  auto conv_params = [](std::mt19937_64& rng) {
    return Conv2dParams{pick(rng, 1, 2), pick(rng, 0, 1)};
  };
  cases.push_back({"conv2d", [conv_params](std::mt19937_64& rng) {
                     const Conv2dParams p = conv_params(rng);
                     const Shape xs{pick(rng, 1, 2), pick(rng, 3, 5), pick(rng, 3, 5), pick(rng, 1, 2)};
                     const Shape ws{pick(rng, 1, 3), pick(rng, 1, 3), xs[3], pick(rng, 1, 2)};
                     return OpInstance{[p](Graph<double>& g, std::span<const Var> in) {
                                         return g.conv2d(in[0], in[1], p);
                                       },
                                       {random_tensor(xs, rng), random_tensor(ws, rng)}};
                   }});
  cases.push_back({"conv2d_input_grad", [conv_params](std::mt19937_64& rng) {
                     const Conv2dParams p = conv_params(rng);
                     const Shape xs{pick(rng, 1, 2), pick(rng, 3, 5), pick(rng, 3, 5), pick(rng, 1, 2)};
                     const Shape ws{pick(rng, 1, 3), pick(rng, 1, 3), xs[3], pick(rng, 1, 2)};
                     const Shape ys{xs[0], (xs[1] + 2 * p.pad - ws[0]) / p.stride + 1,
                                    (xs[2] + 2 * p.pad - ws[1]) / p.stride + 1, ws[3]};
                     return OpInstance{[p, xs](Graph<double>& g, std::span<const Var> in) {
                                         return g.conv2d_input_grad(in[0], in[1], p, xs);
                                       },
                                       {random_tensor(ys, rng), random_tensor(ws, rng)}};
                   }});
  cases.push_back({"conv2d_filter_grad", [conv_params](std::mt19937_64& rng) {
                     const Conv2dParams p = conv_params(rng);
                     const Shape xs{pick(rng, 1, 2), pick(rng, 3, 5), pick(rng, 3, 5), pick(rng, 1, 2)};
                     const Shape ws{pick(rng, 1, 3), pick(rng, 1, 3), xs[3], pick(rng, 1, 2)};
                     const Shape ys{xs[0], (xs[1] + 2 * p.pad - ws[0]) / p.stride + 1,
                                    (xs[2] + 2 * p.pad - ws[1]) / p.stride + 1, ws[3]};
                     return OpInstance{[p, ws](Graph<double>& g, std::span<const Var> in) {
                                         return g.conv2d_filter_grad(in[0], in[1], p, ws);
                                       },
                                       {random_tensor(xs, rng), random_tensor(ys, rng)}};
                   }});
  cases.push_back({"max_pool2x2", [](std::mt19937_64& rng) {
                     const Shape xs{pick(rng, 1, 2), pick(rng, 2, 5), pick(rng, 2, 5), pick(rng, 1, 2)};
                     return OpInstance{[](Graph<double>& g, std::span<const Var> in) {
                                         const Var m = g.max_pool2x2(in[0]);
                                         return g.mul(m, m);
                                       },
                                       {distinct_values(xs, rng)}};
                   }});
  auto make_stencil = [](std::mt19937_64& rng, std::size_t& gsize, Shape& out) {
    gsize = pick(rng, 2, 4);
    out = Shape{pick(rng, 1, 3), pick(rng, 1, 3), 3};
    const Tensor<double> colors = random_tensor(out, rng, 0.0, 1.0);
    return std::make_shared<const GridStencil<double>>(GridStencil<double>::build(colors.values(), gsize, out));
  };
  cases.push_back({"grid_sample", [make_stencil](std::mt19937_64& rng) {
                     std::size_t gsize = 0;
                     Shape out;
                     auto st = make_stencil(rng, gsize, out);
                     return OpInstance{[st](Graph<double>& g, std::span<const Var> in) {
                                         const Var d = g.grid_sample(in[0], st);
                                         return g.mul(d, d);
                                       },
                                       {random_tensor({gsize, gsize, gsize, 3}, rng)}};
                   }});
  cases.push_back({"grid_sample_adjoint", [make_stencil](std::mt19937_64& rng) {
                     std::size_t gsize = 0;
                     Shape out;
                     auto st = make_stencil(rng, gsize, out);
                     return OpInstance{[st](Graph<double>& g, std::span<const Var> in) {
                                         const Var a = g.grid_sample_adjoint(in[0], st);
                                         return g.mul(a, a);
                                       },
                                       {random_tensor(out, rng)}};
                   }});
  cases.push_back({"sgd_update_node", [](std::mt19937_64& rng) {
                     // One unrolled step of least squares: theta1 = theta0 - lr * d/dtheta |x theta - y|^2.
                     const std::size_t m = pick(rng, 1, 4), k = pick(rng, 1, 3);
                     const double lr = std::uniform_real_distribution<double>(0.01, 0.3)(rng);
                     return OpInstance{[lr](Graph<double>& g, std::span<const Var> in) {
                                         const Var r = g.matmul(in[1], in[0]);
                                         const Var inner = g.sum(g.mul(r, r));
                                         const Var grad = g.gradient_nodes(inner, std::span<const Var>(&in[0], 1))[0];
                                         const Var next = sgd_update_node(g, in[0], grad, lr);
                                         return g.mul(next, next);
                                       },
                                       {random_tensor({k, 1}, rng), random_tensor({m, k}, rng)}};
                   }});
  return cases;
}

struct OpCheckSummary {
  std::string name;
  std::size_t instances = 0;
  double worst_first = 0.0;
  double worst_second = 0.0;
};

/// Runs `instances` random first- and second-order gradient checks of one op.
inline OpCheckSummary check_op(const OpCase& c, std::size_t instances, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  OpCheckSummary s{c.name, instances};
  for (std::size_t i = 0; i < instances; ++i) {
    const OpInstance inst = c.make(rng);
    const Builder scalar = scalarize(inst, rng);
    s.worst_first = std::max(s.worst_first, gradcheck(scalar, inst.inputs));
    if (c.second_order) {
      std::vector<Tensor<double>> dirs;
      for (const auto& t : inst.inputs) dirs.push_back(random_tensor(t.shape(), rng));
      s.worst_second = std::max(s.worst_second, gradcheck(directional_gradient(scalar, dirs), inst.inputs));
    }
  }
  return s;
}

}  // namespace metapoison::testing
