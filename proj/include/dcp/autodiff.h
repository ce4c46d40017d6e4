#pragma once

#include <cstddef>
#include <deque>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "dcp/tensor.h"

namespace dcp {

enum class OpKind {
  kConstant,
  kParameter,
  kMatMul,
  kConv1x1,
  kConv3x3Stride2,
  kSigmoid,
  kRelu,
  kSoftmax,
  kAdd,
  kMul,
  kScale,
  kShift,
  kScaleBy,
  kConcat,
  kMeanPool,
  kUpsample,
  kReshape,
  kTranspose,
  kSum,
  kPick,
  kCrossEntropy,
};

const char* op_name(OpKind op);

// Handle to a node of a Graph.
struct Var {
  std::size_t id = static_cast<std::size_t>(-1);
};

// Define-by-run tape. Nodes are appended in evaluation order, which is a
// topological order, so backward is a single reverse sweep. A graph may be
// differentiated once; a second backward() throws ContractError.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  Var constant(Tensor value);

  // Leaf bound to an external parameter tensor. Repeated calls with the same
  // tensor return the same node, so shared weights accumulate gradient.
  Var param(const Tensor& source);

  const Tensor& value(Var v) const;
  // Zero tensor of the value's shape when nothing flowed into v.
  const Tensor& grad(Var v) const;
  OpKind op(Var v) const;
  const std::vector<std::size_t>& inputs(Var v) const;
  bool requires_grad(Var v) const;

  // Gradient accumulated for a tensor registered through param(), or
  // nullptr if it never entered the graph.
  const Tensor* grad_of(const Tensor& source) const;

  void backward(Var loss);
  bool differentiated() const { return differentiated_; }
  std::size_t size() const { return nodes_.size(); }

  using Backprop = std::function<void(Graph&, std::size_t self)>;

  // Used by the op implementations.
  Var emplace(OpKind op, std::vector<std::size_t> inputs, Tensor value,
              Backprop backprop);
  Tensor& grad_buffer(std::size_t id);

 private:
  struct Node {
    OpKind op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor grad;
    Backprop backprop;
    bool requires_grad = false;
  };

  const Node& node(Var v) const;

  // A deque keeps value() references valid while later ops append nodes.
  std::deque<Node> nodes_;
  std::unordered_map<const Tensor*, std::size_t> params_;
  bool differentiated_ = false;
};

// a[m x k] * b[k x n].
Var matmul(Graph& g, Var a, Var b);
// Per-pixel linear map: x[H x W x C] * w[C x Co] + b[Co].
Var conv1x1(Graph& g, Var x, Var w, Var b);
// 3x3 convolution, stride 2, zero padding 1: x[H x W x C], w[3 x 3 x C x Co].
Var conv3x3_stride2(Graph& g, Var x, Var w, Var b);
Var sigmoid(Graph& g, Var x);
Var relu(Graph& g, Var x);
// Max-subtracted softmax along `axis`.
Var softmax(Graph& g, Var x, std::size_t axis);
Var add(Graph& g, Var a, Var b);
// Elementwise product.
Var mul(Graph& g, Var a, Var b);
Var scale(Graph& g, Var x, double factor);
Var shift(Graph& g, Var x, double offset);
// x times a single-element node.
Var scale_by(Graph& g, Var x, Var s);
Var concat(Graph& g, std::span<const Var> parts, std::size_t axis);
// Global average pool of x[H x W x C] into a [1 x C] row.
Var mean_pool(Graph& g, Var x);
// Nearest-neighbour replication of x[H x W x C] by `factor` on both axes.
Var upsample_nearest(Graph& g, Var x, std::size_t factor);
Var reshape(Graph& g, Var x, Shape shape);
// Transpose of a matrix.
Var transpose(Graph& g, Var x);
Var sum(Graph& g, Var x);
// Element `index` of x as a scalar node.
Var pick(Graph& g, Var x, std::size_t index);
// Mean over pixels of -log softmax(logits)[target]; logits[H x W x K].
Var cross_entropy(Graph& g, Var logits, const ClassMask& target);

// Plain forward evaluation helpers used outside graphs.
Tensor softmax_values(const Tensor& x, std::size_t axis);
double sigmoid_value(double x);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::vector<double> per_block;  // same order as the params argument
  std::size_t worst_block = 0;
  std::size_t worst_index = 0;
};

// Central finite differences against supplied analytic gradients. `f`
// must read the current contents of `params`; each coordinate is perturbed
// in place and restored. Error per coordinate is
// |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
GradCheckResult grad_check(const std::function<double()>& f,
                           std::span<Tensor* const> params,
                           std::span<const Tensor> analytic, double eps);

// Builds the graph with `build`, backpropagates, and checks every tensor in
// `params` that `build` bound through Graph::param.
GradCheckResult grad_check(const std::function<Var(Graph&)>& build,
                           std::span<Tensor* const> params, double eps);

}  // namespace dcp
