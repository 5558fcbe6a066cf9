#include "metapoison/graph.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace metapoison {

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kParameter: return "parameter";
    case OpKind::kConstant: return "constant";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kReshape: return "reshape";
    case OpKind::kSumAxis: return "sum_axis";
    case OpKind::kBroadcastAxis: return "broadcast_axis";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kBroadcastScalar: return "broadcast_scalar";
    case OpKind::kRelu: return "relu";
    case OpKind::kClamp: return "clamp";
    case OpKind::kLog: return "log";
    case OpKind::kReciprocal: return "reciprocal";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kSoftmaxXent: return "softmax_xent";
    case OpKind::kGather: return "gather";
    case OpKind::kScatterAdd: return "scatter_add";
    case OpKind::kConcat: return "concat";
    case OpKind::kSlice: return "slice";
    case OpKind::kPad: return "pad";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kConv2dInputGrad: return "conv2d_input_grad";
    case OpKind::kConv2dFilterGrad: return "conv2d_filter_grad";
    case OpKind::kMaxPool2x2: return "max_pool2x2";
    case OpKind::kGridSample: return "grid_sample";
    case OpKind::kGridSampleAdjoint: return "grid_sample_adjoint";
  }
  return "unknown";
}

namespace {

[[noreturn]] void shape_fail(const char* op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same(const char* op, const Shape& a, const Shape& b) {
  if (a != b) shape_fail(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

void require_rank(const char* op, const Shape& a, std::size_t rank) {
  if (a.size() != rank) {
    shape_fail(op, "expected rank " + std::to_string(rank) + ", got " + shape_str(a));
  }
}

// (outer, axis, inner) decomposition of a shape around `axis`.
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

std::size_t conv_out(std::size_t in, std::size_t k, Conv2dParams p) {
  return (in + 2 * p.pad - k) / p.stride + 1;
}

// Visits every (input, filter, output) spatial triple of a 2-D convolution.
// fn(x_off, w_off, y_off) receives offsets of the channel vectors.
template <typename Fn>
void for_each_tap(const Shape& xs, const Shape& ws, Conv2dParams p, Fn&& fn) {
  const std::size_t b_n = xs[0], h = xs[1], w = xs[2], ci = xs[3];
  const std::size_t kh = ws[0], kw = ws[1], co = ws[3];
  const std::size_t oh = conv_out(h, kh, p), ow = conv_out(w, kw, p);
  for (std::size_t b = 0; b < b_n; ++b) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const std::size_t y_off = ((b * oh + oy) * ow + ox) * co;
        for (std::size_t ky = 0; ky < kh; ++ky) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * p.stride + ky) -
                                    static_cast<std::ptrdiff_t>(p.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
          for (std::size_t kx = 0; kx < kw; ++kx) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * p.stride + kx) -
                                      static_cast<std::ptrdiff_t>(p.pad);
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
            const std::size_t x_off =
                ((b * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)) * ci;
            const std::size_t w_off = (ky * kw + kx) * ci * co;
            fn(x_off, w_off, y_off);
          }
        }
      }
    }
  }
}

Shape conv_out_shape(const char* op, const Shape& xs, const Shape& ws, Conv2dParams p) {
  require_rank(op, xs, 4);
  require_rank(op, ws, 4);
  if (xs[3] != ws[2]) {
    shape_fail(op, "input channels " + shape_str(xs) + " vs filter " + shape_str(ws));
  }
  if (p.stride == 0) shape_fail(op, "stride must be positive");
  if (xs[1] + 2 * p.pad < ws[0] || xs[2] + 2 * p.pad < ws[1]) {
    shape_fail(op, "filter " + shape_str(ws) + " larger than padded input " + shape_str(xs));
  }
  return {xs[0], conv_out(xs[1], ws[0], p), conv_out(xs[2], ws[1], p), ws[3]};
}

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& x, const Tensor<T>& w, Conv2dParams p, const Shape& ys) {
  Tensor<T> y(ys);
  const std::size_t ci = x.dim(3), co = w.dim(3);
  T* yd = y.data();
  const T* xd = x.data();
  const T* wd = w.data();
  for_each_tap(x.shape(), w.shape(), p, [&](std::size_t xo, std::size_t wo, std::size_t yo) {
    for (std::size_t c = 0; c < ci; ++c) {
      const T xv = xd[xo + c];
      const T* wrow = wd + wo + c * co;
      T* yrow = yd + yo;
      for (std::size_t o = 0; o < co; ++o) yrow[o] += xv * wrow[o];
    }
  });
  return y;
}

template <typename T>
Tensor<T> conv_input_grad(const Tensor<T>& gy, const Tensor<T>& w, Conv2dParams p, const Shape& xs) {
  Tensor<T> gx(xs);
  const std::size_t ci = xs[3], co = w.dim(3);
  T* gxd = gx.data();
  const T* gyd = gy.data();
  const T* wd = w.data();
  for_each_tap(xs, w.shape(), p, [&](std::size_t xo, std::size_t wo, std::size_t yo) {
    const T* grow = gyd + yo;
    for (std::size_t c = 0; c < ci; ++c) {
      const T* wrow = wd + wo + c * co;
      T acc{};
      for (std::size_t o = 0; o < co; ++o) acc += grow[o] * wrow[o];
      gxd[xo + c] += acc;
    }
  });
  return gx;
}

template <typename T>
Tensor<T> conv_filter_grad(const Tensor<T>& x, const Tensor<T>& gy, Conv2dParams p, const Shape& ws) {
  Tensor<T> gw(ws);
  const std::size_t ci = ws[2], co = ws[3];
  T* gwd = gw.data();
  const T* gyd = gy.data();
  const T* xd = x.data();
  for_each_tap(x.shape(), ws, p, [&](std::size_t xo, std::size_t wo, std::size_t yo) {
    const T* grow = gyd + yo;
    for (std::size_t c = 0; c < ci; ++c) {
      const T xv = xd[xo + c];
      T* wrow = gwd + wo + c * co;
      for (std::size_t o = 0; o < co; ++o) wrow[o] += xv * grow[o];
    }
  });
  return gw;
}

}  // namespace

template <typename T>
GridStencil<T> GridStencil<T>::build(std::span<const T> colors, std::size_t grid_size, Shape out_shape) {
  if (grid_size < 2) throw ConfigError("color grid needs at least 2 cells per axis");
  if (colors.size() % 3 != 0) throw ShapeError("grid_sample: colors must have 3 channels");
  if (numel(out_shape) != colors.size()) {
    throw ShapeError("grid_sample: output shape " + shape_str(out_shape) + " does not match colors");
  }
  GridStencil s;
  s.grid_size = grid_size;
  s.pixels = colors.size() / 3;
  s.out_shape = std::move(out_shape);
  s.cell.resize(s.pixels * 8);
  s.weight.resize(s.pixels * 8);
  const T top = static_cast<T>(grid_size - 1);
  for (std::size_t p = 0; p < s.pixels; ++p) {
    std::size_t base[3];
    T frac[3];
    for (std::size_t c = 0; c < 3; ++c) {
      const T u = std::clamp(colors[p * 3 + c], T{0}, T{1}) * top;
      const std::size_t i0 = std::min(static_cast<std::size_t>(std::floor(u)), grid_size - 2);
      base[c] = i0;
      frac[c] = u - static_cast<T>(i0);
    }
    for (std::size_t k = 0; k < 8; ++k) {
      const std::size_t dr = (k >> 2) & 1, dg = (k >> 1) & 1, db = k & 1;
      const std::size_t cell = ((base[0] + dr) * grid_size + (base[1] + dg)) * grid_size + (base[2] + db);
      const T w = (dr ? frac[0] : 1 - frac[0]) * (dg ? frac[1] : 1 - frac[1]) *
                  (db ? frac[2] : 1 - frac[2]);
      s.cell[p * 8 + k] = static_cast<std::uint32_t>(cell);
      s.weight[p * 8 + k] = w;
    }
  }
  return s;
}

template <typename T>
const Node<T>& Graph<T>::node(Var v) const {
  if (!v.valid() || v.id >= nodes_.size()) {
    throw ConfigError("Var does not belong to this graph");
  }
  return nodes_[v.id];
}

template <typename T>
Var Graph<T>::push(Node<T> n) {
  nodes_.push_back(std::move(n));
  return Var{static_cast<NodeId>(nodes_.size() - 1)};
}

template <typename T>
Node<T> Graph<T>::make(OpKind kind, std::initializer_list<Var> inputs) const {
  Node<T> n;
  n.kind = kind;
  for (Var v : inputs) {
    const auto& in = node(v);
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || in.requires_grad;
  }
  return n;
}

template <typename T>
Var Graph<T>::parameter(Tensor<T> value) {
  Node<T> n;
  n.kind = OpKind::kParameter;
  n.value = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::constant(Tensor<T> value) {
  Node<T> n;
  n.kind = OpKind::kConstant;
  n.value = std::move(value);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  require_same("add", x.shape(), y.shape());
  Node<T> n = make(OpKind::kAdd, {a, b});
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] + y[i];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sub(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  require_same("sub", x.shape(), y.shape());
  Node<T> n = make(OpKind::kSub, {a, b});
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] - y[i];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::mul(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  require_same("mul", x.shape(), y.shape());
  Node<T> n = make(OpKind::kMul, {a, b});
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * y[i];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::scale(Var a, T factor) {
  const auto& x = value(a);
  Node<T> n = make(OpKind::kScale, {a});
  n.scalar = factor;
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] * factor;
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::matmul(Var a, Var b) {
  const auto& x = value(a);
  const auto& y = value(b);
  require_rank("matmul", x.shape(), 2);
  require_rank("matmul", y.shape(), 2);
  if (x.dim(1) != y.dim(0)) {
    shape_fail("matmul", "inner dimension mismatch " + shape_str(x.shape()) + " x " + shape_str(y.shape()));
  }
  const std::size_t m = x.dim(0), k = x.dim(1), nn = y.dim(1);
  Node<T> n = make(OpKind::kMatMul, {a, b});
  n.value = Tensor<T>(Shape{m, nn});
  T* out = n.value.data();
  const T* xd = x.data();
  const T* yd = y.data();
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out + i * nn;
    for (std::size_t p = 0; p < k; ++p) {
      const T xv = xd[i * k + p];
      if (xv == T{0}) continue;
      const T* yrow = yd + p * nn;
      for (std::size_t j = 0; j < nn; ++j) row[j] += xv * yrow[j];
    }
  }
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::transpose(Var a) {
  const auto& x = value(a);
  require_rank("transpose", x.shape(), 2);
  const std::size_t r = x.dim(0), c = x.dim(1);
  Node<T> n = make(OpKind::kTranspose, {a});
  n.value = Tensor<T>(Shape{c, r});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) n.value[j * r + i] = x[i * c + j];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::reshape(Var a, Shape shape) {
  const auto& x = value(a);
  if (numel(shape) != x.size()) {
    shape_fail("reshape", "cannot reshape " + shape_str(x.shape()) + " to " + shape_str(shape));
  }
  Node<T> n = make(OpKind::kReshape, {a});
  n.value = x.reshaped(std::move(shape));
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sum_axis(Var a, std::size_t axis) {
  const auto& x = value(a);
  if (axis >= x.rank()) shape_fail("sum_axis", "axis out of range for " + shape_str(x.shape()));
  const AxisSplit s = split_axis(x.shape(), axis);
  Shape out = x.shape();
  out.erase(out.begin() + static_cast<std::ptrdiff_t>(axis));
  Node<T> n = make(OpKind::kSumAxis, {a});
  n.axis = axis;
  n.value = Tensor<T>(out);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        n.value[o * s.inner + i] += x[(o * s.len + l) * s.inner + i];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::broadcast_axis(Var a, std::size_t axis, std::size_t count) {
  const auto& x = value(a);
  if (axis > x.rank()) shape_fail("broadcast_axis", "axis out of range for " + shape_str(x.shape()));
  Shape out = x.shape();
  out.insert(out.begin() + static_cast<std::ptrdiff_t>(axis), count);
  const AxisSplit s = split_axis(out, axis);
  Node<T> n = make(OpKind::kBroadcastAxis, {a});
  n.axis = axis;
  n.extent = count;
  n.value = Tensor<T>(out);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l)
      for (std::size_t i = 0; i < s.inner; ++i)
        n.value[(o * s.len + l) * s.inner + i] = x[o * s.inner + i];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::sum(Var a) {
  const auto& x = value(a);
  Node<T> n = make(OpKind::kSum, {a});
  T acc{};
  for (T v : x.values()) acc += v;
  n.value = Tensor<T>::scalar(acc);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::mean(Var a) {
  const auto& x = value(a);
  if (x.empty()) shape_fail("mean", "empty tensor");
  Node<T> n = make(OpKind::kMean, {a});
  T acc{};
  for (T v : x.values()) acc += v;
  n.value = Tensor<T>::scalar(acc / static_cast<T>(x.size()));
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::broadcast_scalar(Var a, Shape shape) {
  const auto& x = value(a);
  if (x.size() != 1) shape_fail("broadcast_scalar", "input is not scalar: " + shape_str(x.shape()));
  Node<T> n = make(OpKind::kBroadcastScalar, {a});
  n.value = Tensor<T>(std::move(shape), x[0]);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::relu(Var a) {
  const auto& x = value(a);
  Node<T> n = make(OpKind::kRelu, {a});
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = x[i] > T{0} ? x[i] : T{0};
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::clamp(Var a, T lo, T hi) {
  const auto& x = value(a);
  Node<T> n = make(OpKind::kClamp, {a});
  n.lo = lo;
  n.hi = hi;
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::clamp(x[i], lo, hi);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::log(Var a) {
  const auto& x = value(a);
  Node<T> n = make(OpKind::kLog, {a});
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = std::log(x[i]);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::reciprocal(Var a) {
  const auto& x = value(a);
  Node<T> n = make(OpKind::kReciprocal, {a});
  n.value = Tensor<T>(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) n.value[i] = T{1} / x[i];
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::softmax(Var logits) {
  const auto& z = value(logits);
  require_rank("softmax", z.shape(), 2);
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  Node<T> n = make(OpKind::kSoftmax, {logits});
  n.value = Tensor<T>(z.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * cols;
    T* sr = n.value.data() + r * cols;
    const T top = *std::max_element(zr, zr + cols);
    T total{};
    for (std::size_t c = 0; c < cols; ++c) total += (sr[c] = std::exp(zr[c] - top));
    for (std::size_t c = 0; c < cols; ++c) sr[c] /= total;
  }
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::softmax_xent(Var logits, std::span<const int> labels) {
  const auto& z = value(logits);
  require_rank("softmax_xent", z.shape(), 2);
  const std::size_t rows = z.dim(0), cols = z.dim(1);
  if (labels.size() != rows) {
    shape_fail("softmax_xent", "labels length " + std::to_string(labels.size()) + " vs logits " + shape_str(z.shape()));
  }
  auto index = std::make_shared<std::vector<std::uint32_t>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= cols) {
      shape_fail("softmax_xent", "label " + std::to_string(labels[r]) + " out of range for " + std::to_string(cols) + " classes");
    }
    (*index)[r] = static_cast<std::uint32_t>(r * cols + static_cast<std::size_t>(labels[r]));
  }
  Node<T> n = make(OpKind::kSoftmaxXent, {logits});
  n.index = std::move(index);
  n.value = Tensor<T>(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    const T* zr = z.data() + r * cols;
    const T top = *std::max_element(zr, zr + cols);
    T total{};
    for (std::size_t c = 0; c < cols; ++c) total += std::exp(zr[c] - top);
    n.value[r] = std::log(total) + top - zr[labels[r]];
  }
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::gather(Var a, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
  const auto& x = value(a);
  if (numel(out_shape) != index->size()) shape_fail("gather", "output shape does not match index count");
  Node<T> n = make(OpKind::kGather, {a});
  n.value = Tensor<T>(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t src = (*index)[i];
    if (src >= x.size()) shape_fail("gather", "index " + std::to_string(src) + " out of range for " + shape_str(x.shape()));
    n.value[i] = x[src];
  }
  n.aux_shape = x.shape();
  n.index = std::move(index);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::scatter_add(Var a, std::shared_ptr<const std::vector<std::uint32_t>> index, Shape out_shape) {
  const auto& x = value(a);
  if (x.size() != index->size()) shape_fail("scatter_add", "input size does not match index count");
  Node<T> n = make(OpKind::kScatterAdd, {a});
  n.value = Tensor<T>(std::move(out_shape));
  for (std::size_t i = 0; i < index->size(); ++i) {
    const std::size_t dst = (*index)[i];
    if (dst >= n.value.size()) shape_fail("scatter_add", "index out of range");
    n.value[dst] += x[i];
  }
  n.aux_shape = x.shape();
  n.index = std::move(index);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::concat(std::span<const Var> parts) {
  if (parts.empty()) shape_fail("concat", "no inputs");
  Shape out = value(parts[0]).shape();
  if (out.empty()) shape_fail("concat", "scalar inputs");
  out[0] = 0;
  Node<T> n;
  n.kind = OpKind::kConcat;
  for (Var v : parts) {
    const auto& s = value(v).shape();
    if (s.size() != out.size() || !std::equal(s.begin() + 1, s.end(), out.begin() + 1)) {
      shape_fail("concat", "incompatible part " + shape_str(s) + " for " + shape_str(value(parts[0]).shape()));
    }
    out[0] += s[0];
    n.inputs.push_back(v.id);
    n.requires_grad = n.requires_grad || requires_grad(v);
  }
  std::vector<T> data;
  data.reserve(numel(out));
  for (Var v : parts) {
    const auto& vals = value(v).storage();
    data.insert(data.end(), vals.begin(), vals.end());
  }
  n.value = Tensor<T>(std::move(out), std::move(data));
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::slice(Var a, std::size_t begin, std::size_t end) {
  const auto& x = value(a);
  if (x.rank() == 0 || begin > end || end > x.dim(0)) {
    shape_fail("slice", "rows [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " + shape_str(x.shape()));
  }
  Shape out = x.shape();
  out[0] = end - begin;
  const std::size_t row = x.size() / x.dim(0);
  Node<T> n = make(OpKind::kSlice, {a});
  n.begin = begin;
  n.extent = x.dim(0);
  n.value = Tensor<T>(out, std::vector<T>(x.storage().begin() + static_cast<std::ptrdiff_t>(begin * row),
                                          x.storage().begin() + static_cast<std::ptrdiff_t>(end * row)));
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::pad(Var a, std::size_t begin, std::size_t total) {
  const auto& x = value(a);
  if (x.rank() == 0 || begin + x.dim(0) > total) {
    shape_fail("pad", "cannot place " + shape_str(x.shape()) + " at row " + std::to_string(begin) + " of " + std::to_string(total));
  }
  Shape out = x.shape();
  out[0] = total;
  const std::size_t row = x.dim(0) ? x.size() / x.dim(0) : 0;
  Node<T> n = make(OpKind::kPad, {a});
  n.begin = begin;
  n.value = Tensor<T>(out);
  std::copy(x.storage().begin(), x.storage().end(), n.value.storage().begin() + static_cast<std::ptrdiff_t>(begin * row));
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::conv2d(Var x, Var w, Conv2dParams params) {
  const Shape ys = conv_out_shape("conv2d", shape(x), shape(w), params);
  Node<T> n = make(OpKind::kConv2d, {x, w});
  n.conv = params;
  n.value = conv_forward(value(x), value(w), params, ys);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::conv2d_input_grad(Var gy, Var w, Conv2dParams params, Shape input_shape) {
  const Shape ys = conv_out_shape("conv2d_input_grad", input_shape, shape(w), params);
  require_same("conv2d_input_grad", ys, shape(gy));
  Node<T> n = make(OpKind::kConv2dInputGrad, {gy, w});
  n.conv = params;
  n.value = conv_input_grad(value(gy), value(w), params, input_shape);
  n.aux_shape = std::move(input_shape);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::conv2d_filter_grad(Var x, Var gy, Conv2dParams params, Shape filter_shape) {
  const Shape ys = conv_out_shape("conv2d_filter_grad", shape(x), filter_shape, params);
  require_same("conv2d_filter_grad", ys, shape(gy));
  Node<T> n = make(OpKind::kConv2dFilterGrad, {x, gy});
  n.conv = params;
  n.value = conv_filter_grad(value(x), value(gy), params, filter_shape);
  n.aux_shape = std::move(filter_shape);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::max_pool2x2(Var x) {
  const auto& in = value(x);
  require_rank("max_pool2x2", in.shape(), 4);
  const std::size_t b_n = in.dim(0), h = in.dim(1), w = in.dim(2), c = in.dim(3);
  const std::size_t oh = h / 2, ow = w / 2;
  if (oh == 0 || ow == 0) shape_fail("max_pool2x2", "input too small " + shape_str(in.shape()));
  auto index = std::make_shared<std::vector<std::uint32_t>>(b_n * oh * ow * c);
  Node<T> n = make(OpKind::kMaxPool2x2, {x});
  n.value = Tensor<T>(Shape{b_n, oh, ow, c});
  std::size_t o = 0;
  for (std::size_t b = 0; b < b_n; ++b)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox)
        for (std::size_t ch = 0; ch < c; ++ch, ++o) {
          std::size_t best = ((b * h + 2 * oy) * w + 2 * ox) * c + ch;
          for (std::size_t dy = 0; dy < 2; ++dy)
            for (std::size_t dx = 0; dx < 2; ++dx) {
              const std::size_t at = ((b * h + 2 * oy + dy) * w + 2 * ox + dx) * c + ch;
              if (in[at] > in[best]) best = at;
            }
          (*index)[o] = static_cast<std::uint32_t>(best);
          n.value[o] = in[best];
        }
  n.index = std::move(index);
  n.aux_shape = in.shape();
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::grid_sample(Var grid, std::shared_ptr<const GridStencil<T>> stencil) {
  const auto& g = value(grid);
  const std::size_t gs = stencil->grid_size;
  require_same("grid_sample", g.shape(), Shape{gs, gs, gs, 3});
  Node<T> n = make(OpKind::kGridSample, {grid});
  n.value = Tensor<T>(stencil->out_shape);
  for (std::size_t p = 0; p < stencil->pixels; ++p) {
    for (std::size_t k = 0; k < 8; ++k) {
      const T wk = stencil->weight[p * 8 + k];
      const std::size_t cell = stencil->cell[p * 8 + k];
      for (std::size_t c = 0; c < 3; ++c) n.value[p * 3 + c] += wk * g[cell * 3 + c];
    }
  }
  n.stencil = std::move(stencil);
  return push(std::move(n));
}

template <typename T>
Var Graph<T>::grid_sample_adjoint(Var displacement, std::shared_ptr<const GridStencil<T>> stencil) {
  const auto& d = value(displacement);
  require_same("grid_sample_adjoint", d.shape(), stencil->out_shape);
  const std::size_t gs = stencil->grid_size;
  Node<T> n = make(OpKind::kGridSampleAdjoint, {displacement});
  n.value = Tensor<T>(Shape{gs, gs, gs, 3});
  for (std::size_t p = 0; p < stencil->pixels; ++p) {
    for (std::size_t k = 0; k < 8; ++k) {
      const T wk = stencil->weight[p * 8 + k];
      const std::size_t cell = stencil->cell[p * 8 + k];
      for (std::size_t c = 0; c < 3; ++c) n.value[cell * 3 + c] += wk * d[p * 3 + c];
    }
  }
  n.stencil = std::move(stencil);
  return push(std::move(n));
}

template <typename T>
void Graph<T>::truncate(std::size_t n) {
  if (n < nodes_.size()) nodes_.resize(n);
}

template <typename T>
void Graph<T>::accumulate(std::vector<Var>& grads, NodeId target, Var contribution) {
  Var& slot = grads[target];
  slot = slot.valid() ? add(slot, contribution) : contribution;
}

// Emits input gradients of node `id` given its output gradient. Every rule is
// written in recorded ops so the result is itself differentiable.
template <typename T>
void Graph<T>::vjp(NodeId id, Var g, const std::vector<char>& live, std::vector<Var>& grads) {
  const OpKind kind = nodes_[id].kind;
  const std::vector<NodeId> in = nodes_[id].inputs;
  const Var self{id};
  auto needs = [&](std::size_t i) { return live[in[i]] != 0; };
  auto input = [&](std::size_t i) { return Var{in[i]}; };
  auto emit = [&](std::size_t i, Var contribution) { accumulate(grads, in[i], contribution); };

  switch (kind) {
    case OpKind::kParameter:
    case OpKind::kConstant:
      return;
    case OpKind::kAdd:
      if (needs(0)) emit(0, g);
      if (needs(1)) emit(1, g);
      return;
    case OpKind::kSub:
      if (needs(0)) emit(0, g);
      if (needs(1)) emit(1, neg(g));
      return;
    case OpKind::kMul:
      if (needs(0)) emit(0, mul(g, input(1)));
      if (needs(1)) emit(1, mul(g, input(0)));
      return;
    case OpKind::kScale:
      emit(0, scale(g, nodes_[id].scalar));
      return;
    case OpKind::kMatMul:
      if (needs(0)) emit(0, matmul(g, transpose(input(1))));
      if (needs(1)) emit(1, matmul(transpose(input(0)), g));
      return;
    case OpKind::kTranspose:
      emit(0, transpose(g));
      return;
    case OpKind::kReshape:
      emit(0, reshape(g, shape(input(0))));
      return;
    case OpKind::kSumAxis: {
      const std::size_t axis = nodes_[id].axis;
      const std::size_t len = shape(input(0))[axis];
      emit(0, broadcast_axis(g, axis, len));
      return;
    }
    case OpKind::kBroadcastAxis:
      emit(0, sum_axis(g, nodes_[id].axis));
      return;
    case OpKind::kSum:
      emit(0, broadcast_scalar(g, shape(input(0))));
      return;
    case OpKind::kMean: {
      const auto n_in = static_cast<T>(value(input(0)).size());
      emit(0, broadcast_scalar(scale(g, T{1} / n_in), shape(input(0))));
      return;
    }
    case OpKind::kBroadcastScalar:
      emit(0, reshape(sum(g), shape(input(0))));
      return;
    case OpKind::kRelu: {
      const auto& x = value(input(0));
      Tensor<T> mask(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) mask[i] = x[i] > T{0} ? T{1} : T{0};
      emit(0, mul(g, constant(std::move(mask))));
      return;
    }
    case OpKind::kClamp: {
      const auto& x = value(input(0));
      const T lo = nodes_[id].lo, hi = nodes_[id].hi;
      Tensor<T> mask(x.shape());
      for (std::size_t i = 0; i < x.size(); ++i) mask[i] = (x[i] >= lo && x[i] <= hi) ? T{1} : T{0};
      emit(0, mul(g, constant(std::move(mask))));
      return;
    }
    case OpKind::kLog:
      emit(0, mul(g, reciprocal(input(0))));
      return;
    case OpKind::kReciprocal:
      emit(0, neg(mul(g, mul(self, self))));
      return;
    case OpKind::kSoftmax: {
      const std::size_t cols = shape(self)[1];
      Var gs = mul(g, self);
      Var row = broadcast_axis(sum_axis(gs, 1), 1, cols);
      emit(0, mul(self, sub(g, row)));
      return;
    }
    case OpKind::kSoftmaxXent: {
      const Shape zs = shape(input(0));
      Tensor<T> onehot(zs);
      for (std::uint32_t at : *nodes_[id].index) onehot[at] = T{1};
      Var probs = softmax(input(0));
      Var diff = sub(probs, constant(std::move(onehot)));
      emit(0, mul(diff, broadcast_axis(g, 1, zs[1])));
      return;
    }
    case OpKind::kGather: {
      auto index = nodes_[id].index;
      emit(0, scatter_add(g, index, nodes_[id].aux_shape));
      return;
    }
    case OpKind::kScatterAdd: {
      auto index = nodes_[id].index;
      emit(0, gather(g, index, nodes_[id].aux_shape));
      return;
    }
    case OpKind::kConcat: {
      std::size_t row = 0;
      for (std::size_t i = 0; i < in.size(); ++i) {
        const std::size_t rows = shape(input(i))[0];
        if (needs(i)) emit(i, slice(g, row, row + rows));
        row += rows;
      }
      return;
    }
    case OpKind::kSlice:
      emit(0, pad(g, nodes_[id].begin, nodes_[id].extent));
      return;
    case OpKind::kPad: {
      const std::size_t begin = nodes_[id].begin;
      emit(0, slice(g, begin, begin + shape(input(0))[0]));
      return;
    }
    case OpKind::kConv2d: {
      const Conv2dParams p = nodes_[id].conv;
      if (needs(0)) emit(0, conv2d_input_grad(g, input(1), p, shape(input(0))));
      if (needs(1)) emit(1, conv2d_filter_grad(input(0), g, p, shape(input(1))));
      return;
    }
    case OpKind::kConv2dInputGrad: {
      // z = A(gy, w): <gz, z> = <conv(gz, w), gy> = <filter_grad(gz, gy), w>.
      const Conv2dParams p = nodes_[id].conv;
      if (needs(0)) emit(0, conv2d(g, input(1), p));
      if (needs(1)) emit(1, conv2d_filter_grad(g, input(0), p, shape(input(1))));
      return;
    }
    case OpKind::kConv2dFilterGrad: {
      // u = F(x, gy): <gu, u> = <input_grad(gy, gu), x> = <conv(x, gu), gy>.
      const Conv2dParams p = nodes_[id].conv;
      if (needs(0)) emit(0, conv2d_input_grad(input(1), g, p, shape(input(0))));
      if (needs(1)) emit(1, conv2d(input(0), g, p));
      return;
    }
    case OpKind::kMaxPool2x2: {
      auto index = nodes_[id].index;
      emit(0, scatter_add(g, index, nodes_[id].aux_shape));
      return;
    }
    case OpKind::kGridSample: {
      auto stencil = nodes_[id].stencil;
      emit(0, grid_sample_adjoint(g, stencil));
      return;
    }
    case OpKind::kGridSampleAdjoint: {
      auto stencil = nodes_[id].stencil;
      emit(0, grid_sample(g, stencil));
      return;
    }
  }
}

template <typename T>
std::vector<Var> Graph<T>::backward_impl(Var loss, std::span<const Var> wrt) {
  const auto& loss_node = node(loss);
  if (loss_node.value.size() != 1) {
    throw ShapeError("backward: loss must be scalar, got " + shape_str(loss_node.value.shape()));
  }
  const std::size_t n = static_cast<std::size_t>(loss.id) + 1;

  // live[i]: node i lies on a path from some wrt node.
  std::vector<char> live(n, 0);
  for (Var w : wrt) {
    node(w);
    if (w.id < n) live[w.id] = 1;
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (live[i]) continue;
    for (NodeId p : nodes_[i].inputs) {
      if (live[p]) {
        live[i] = 1;
        break;
      }
    }
  }

  std::vector<Var> grads(n);
  if (live[loss.id]) {
    grads[loss.id] = constant(Tensor<T>(loss_node.value.shape(), T{1}));
    for (std::size_t i = n; i-- > 0;) {
      if (!grads[i].valid() || !live[i]) continue;
      vjp(static_cast<NodeId>(i), grads[i], live, grads);
    }
  }

  std::vector<Var> out;
  out.reserve(wrt.size());
  for (Var w : wrt) {
    if (w.id < n && grads[w.id].valid()) {
      out.push_back(grads[w.id]);
    } else {
      out.push_back(constant(Tensor<T>(shape(w))));
    }
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> Graph<T>::gradients(Var loss, std::span<const Var> wrt) {
  const std::size_t mark = nodes_.size();
  std::vector<Var> nodes = backward_impl(loss, wrt);
  std::vector<Tensor<T>> out;
  out.reserve(nodes.size());
  for (Var v : nodes) out.push_back(value(v));
  truncate(mark);
  return out;
}

template <typename T>
std::vector<Var> Graph<T>::gradient_nodes(Var loss, std::span<const Var> wrt) {
  return backward_impl(loss, wrt);
}

template <typename T>
Var sgd_update_node(Graph<T>& graph, Var params, Var grads, T lr) {
  if (graph.shape(params) != graph.shape(grads)) {
    throw ShapeError("sgd_update_node: params " + shape_str(graph.shape(params)) + " vs grads " +
                     shape_str(graph.shape(grads)));
  }
  if (!graph.requires_grad(grads)) {
    throw ConfigError("sgd_update_node: gradient is detached from the graph; "
                      "take it with gradient_nodes()");
  }
  return graph.sub(params, graph.scale(grads, lr));
}

template class Graph<float>;
template class Graph<double>;
template struct GridStencil<float>;
template struct GridStencil<double>;
template Var sgd_update_node<float>(Graph<float>&, Var, Var, float);
template Var sgd_update_node<double>(Graph<double>&, Var, Var, double);

}  // namespace metapoison
