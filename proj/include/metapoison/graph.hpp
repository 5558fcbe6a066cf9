#pragma once

#include <cstdint>
#include <deque>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "metapoison/tensor.hpp"

namespace metapoison {

using NodeId = std::uint32_t;

/// Handle to a node recorded on a Graph. Only meaningful for the graph that
/// produced it.
struct Var {
  static constexpr NodeId kNone = std::numeric_limits<NodeId>::max();
  NodeId id = kNone;
  bool valid() const { return id != kNone; }
  bool operator==(const Var&) const = default;
};

enum class OpKind : std::uint8_t {
  kParameter,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kScale,
  kMatMul,
  kTranspose,
  kReshape,
  kSumAxis,
  kBroadcastAxis,
  kSum,
  kMean,
  kBroadcastScalar,
  kRelu,
  kClamp,
  kLog,
  kReciprocal,
  kSoftmax,
  kSoftmaxXent,
  kGather,
  kScatterAdd,
  kConcat,
  kSlice,
  kPad,
  kConv2d,
  kConv2dInputGrad,
  kConv2dFilterGrad,
  kMaxPool2x2,
  kGridSample,
  kGridSampleAdjoint,
};

const char* op_name(OpKind kind);

struct Conv2dParams {
  std::size_t stride = 1;
  std::size_t pad = 0;
  bool operator==(const Conv2dParams&) const = default;
};

/// Trilinear interpolation stencil over a (G, G, G, 3) displacement grid,
/// precomputed from fixed base colors: each of `pixels` points reads 8
/// grid cells with nonnegative weights summing to one.
template <typename T>
struct GridStencil {
  std::size_t grid_size = 0;
  std::size_t pixels = 0;
  std::vector<std::uint32_t> cell;  // pixels * 8 flat cell indices into G^3
  std::vector<T> weight;            // pixels * 8
  Shape out_shape;                  // e.g. (H, W, 3); numel == pixels * 3

  /// Builds the stencil for base colors laid out as (..., 3) in [0, 1].
  static GridStencil build(std::span<const T> colors, std::size_t grid_size,
                           Shape out_shape);
};

template <typename T>
struct Node {
  OpKind kind = OpKind::kConstant;
  std::vector<NodeId> inputs;
  Tensor<T> value;
  bool requires_grad = false;

  // Op attributes; unused fields stay default.
  T scalar{};
  T lo{};
  T hi{};
  std::size_t axis = 0;
  std::size_t begin = 0;
  std::size_t extent = 0;
  Shape aux_shape;
  Conv2dParams conv;
  std::shared_ptr<const std::vector<std::uint32_t>> index;
  std::shared_ptr<const GridStencil<T>> stencil;
};

/// Append-only computation tape with eager evaluation. Every op's backward
/// rule is itself expressed in recorded ops, so gradients can be taken as
/// graph nodes and differentiated again (needed to differentiate through
/// unrolled SGD updates).
///
/// Not thread-safe; one graph per task.
template <typename T>
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var parameter(Tensor<T> value);
  Var constant(Tensor<T> value);

  const Tensor<T>& value(Var v) const { return node(v).value; }
  const Shape& shape(Var v) const { return node(v).value.shape(); }
  bool requires_grad(Var v) const { return node(v).requires_grad; }
  const Node<T>& node(Var v) const;
  std::size_t size() const { return nodes_.size(); }

  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var scale(Var a, T factor);
  Var neg(Var a) { return scale(a, T{-1}); }
  /// (m, k) x (k, n) -> (m, n).
  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, Shape shape);
  /// Sums out `axis`, dropping it from the shape.
  Var sum_axis(Var a, std::size_t axis);
  /// Inserts a new axis of length `count` at `axis`, repeating values.
  Var broadcast_axis(Var a, std::size_t axis, std::size_t count);
  Var sum(Var a);
  Var mean(Var a);
  Var broadcast_scalar(Var a, Shape shape);
  Var relu(Var a);
  Var clamp(Var a, T lo, T hi);
  Var log(Var a);
  Var reciprocal(Var a);
  /// Row-wise softmax of a (B, C) tensor.
  Var softmax(Var logits);
  /// Per-row softmax cross-entropy of (B, C) logits; returns (B).
  Var softmax_xent(Var logits, std::span<const int> labels);
  /// out[i] = a.flat[index[i]], reshaped to `out_shape`.
  Var gather(Var a, std::shared_ptr<const std::vector<std::uint32_t>> index,
             Shape out_shape);
  /// out.flat[index[i]] += a.flat[i]; adjoint of gather.
  Var scatter_add(Var a,
                  std::shared_ptr<const std::vector<std::uint32_t>> index,
                  Shape out_shape);
  /// Concatenation along axis 0.
  Var concat(std::span<const Var> parts);
  /// Rows [begin, end) along axis 0.
  Var slice(Var a, std::size_t begin, std::size_t end);
  /// Embeds `a` at row `begin` of a zero tensor with `total` rows.
  Var pad(Var a, std::size_t begin, std::size_t total);
  /// NHWC input (B, H, W, Ci), filter (kh, kw, Ci, Co).
  Var conv2d(Var x, Var w, Conv2dParams params);
  Var conv2d_input_grad(Var gy, Var w, Conv2dParams params, Shape input_shape);
  Var conv2d_filter_grad(Var x, Var gy, Conv2dParams params,
                         Shape filter_shape);
  /// 2x2 max pool, stride 2, NHWC; odd trailing rows/cols are dropped.
  /// Ties resolve to the first element in row-major window order.
  Var max_pool2x2(Var x);
  /// Interpolated displacement of a (G, G, G, 3) grid at fixed colors.
  Var grid_sample(Var grid, std::shared_ptr<const GridStencil<T>> stencil);
  Var grid_sample_adjoint(Var displacement,
                          std::shared_ptr<const GridStencil<T>> stencil);

  /// Reverse-mode gradients of scalar `loss` w.r.t. `wrt`. The graph is left
  /// exactly as it was (scratch nodes are discarded).
  std::vector<Tensor<T>> gradients(Var loss, std::span<const Var> wrt);

  /// Like gradients(), but keeps the backward computation on the tape and
  /// returns differentiable nodes.
  std::vector<Var> gradient_nodes(Var loss, std::span<const Var> wrt);

  /// Drops every node with id >= n.
  void truncate(std::size_t n);

 private:
  Var push(Node<T> n);
  Node<T> make(OpKind kind, std::initializer_list<Var> inputs) const;
  std::vector<Var> backward_impl(Var loss, std::span<const Var> wrt);
  void vjp(NodeId id, Var grad, const std::vector<char>& live,
           std::vector<Var>& grads);
  void accumulate(std::vector<Var>& grads, NodeId target, Var contribution);

  std::deque<Node<T>> nodes_;  // references stay valid across appends
};

/// theta_next = params - lr * grads, recorded so outer gradients flow through
/// both `params` and `grads`. Throws if `grads` carries no graph dependency
/// (detached), which would silently drop second-order terms.
template <typename T>
Var sgd_update_node(Graph<T>& graph, Var params, Var grads, T lr);

extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace metapoison
