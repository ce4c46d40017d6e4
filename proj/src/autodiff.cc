#include "dcp/autodiff.h"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dcp/errors.h"

namespace dcp {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv1x1: return "conv1x1";
    case OpKind::kConv3x3Stride2: return "conv3x3_stride2";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kRelu: return "relu";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
    case OpKind::kScale: return "scale";
    case OpKind::kShift: return "shift";
    case OpKind::kScaleBy: return "scale_by";
    case OpKind::kConcat: return "concat";
    case OpKind::kMeanPool: return "mean_pool";
    case OpKind::kUpsample: return "upsample_nearest";
    case OpKind::kReshape: return "reshape";
    case OpKind::kTranspose: return "transpose";
    case OpKind::kSum: return "sum";
    case OpKind::kPick: return "pick";
    case OpKind::kCrossEntropy: return "cross_entropy";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Graph

Var Graph::constant(Tensor value) {
  return emplace(OpKind::kConstant, {}, std::move(value), nullptr);
}

Var Graph::param(const Tensor& source) {
  if (auto it = params_.find(&source); it != params_.end()) {
    return Var{it->second};
  }
  Node n;
  n.op = OpKind::kParameter;
  n.value = source;
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  params_.emplace(&source, id);
  return Var{id};
}

const Graph::Node& Graph::node(Var v) const {
  if (v.id >= nodes_.size()) {
    throw ContractError("invalid graph node id " + std::to_string(v.id));
  }
  return nodes_[v.id];
}

const Tensor& Graph::value(Var v) const { return node(v).value; }

const Tensor& Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.grad.empty() && !n.value.empty()) {
    // Lazily materialise a zero gradient so callers always see the value's
    // shape; the graph is single-threaded so this is safe.
    const_cast<Node&>(n).grad = Tensor(n.value.shape());
  }
  return n.grad;
}

OpKind Graph::op(Var v) const { return node(v).op; }

const std::vector<std::size_t>& Graph::inputs(Var v) const {
  return node(v).inputs;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

const Tensor* Graph::grad_of(const Tensor& source) const {
  auto it = params_.find(&source);
  if (it == params_.end()) return nullptr;
  return &grad(Var{it->second});
}

Var Graph::emplace(OpKind op, std::vector<std::size_t> inputs, Tensor value,
                   Backprop backprop) {
  Node n;
  n.op = op;
  n.requires_grad = false;
  for (std::size_t in : inputs) {
    if (in >= nodes_.size()) {
      throw ContractError("op input refers to a node outside the graph");
    }
    n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
  }
  n.inputs = std::move(inputs);
  n.value = std::move(value);
  if (n.requires_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var{nodes_.size() - 1};
}

Tensor& Graph::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad = Tensor(n.value.shape());
  return n.grad;
}

void Graph::backward(Var loss) {
  if (differentiated_) {
    throw ContractError("backward() already ran on this graph");
  }
  const Node& root = node(loss);
  if (root.value.size() != 1) {
    throw ContractError("backward() needs a scalar loss, got " +
                        shape_to_string(root.value.shape()));
  }
  differentiated_ = true;
  for (const auto& [tensor, id] : params_) grad_buffer(id);
  if (!root.requires_grad) return;
  grad_buffer(loss.id)[0] += 1.0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.requires_grad || !n.backprop || n.grad.empty()) continue;
    n.backprop(*this, i);
  }
}

// ---------------------------------------------------------------------------
// Ops

namespace {

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got " +
                         shape_to_string(t.shape()));
  }
}

bool wants(Graph& g, std::size_t id) { return g.requires_grad(Var{id}); }

}  // namespace

Var matmul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  require_rank(av, 2, "matmul");
  require_rank(bv, 2, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul: inner dimensions disagree for " +
                         shape_to_string(av.shape()) + " x " +
                         shape_to_string(bv.shape()));
  }
  Tensor out({m, n});
  const double* pa = av.data().data();
  const double* pb = bv.data().data();
  double* po = out.data().data();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double s = pa[i * k + p];
      if (s == 0.0) continue;
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += s * brow[j];
    }
  }
  return g.emplace(
      OpKind::kMatMul, {a.id, b.id}, std::move(out),
      [m, k, n](Graph& gr, std::size_t self) {
        const auto& in = gr.inputs(Var{self});
        const std::size_t ia = in[0], ib = in[1];
        const double* go = gr.grad(Var{self}).data().data();
        const double* pa = gr.value(Var{ia}).data().data();
        const double* pb = gr.value(Var{ib}).data().data();
        if (wants(gr, ia)) {
          double* ga = gr.grad_buffer(ia).data().data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = go + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double* brow = pb + p * n;
              double acc = 0.0;
              for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
              ga[i * k + p] += acc;
            }
          }
        }
        if (wants(gr, ib)) {
          double* gb = gr.grad_buffer(ib).data().data();
          for (std::size_t i = 0; i < m; ++i) {
            const double* grow = go + i * n;
            for (std::size_t p = 0; p < k; ++p) {
              const double s = pa[i * k + p];
              if (s == 0.0) continue;
              double* gbrow = gb + p * n;
              for (std::size_t j = 0; j < n; ++j) gbrow[j] += s * grow[j];
            }
          }
        }
      });
}

Var conv1x1(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  require_rank(xv, 3, "conv1x1");
  require_rank(wv, 2, "conv1x1");
  const std::size_t h = xv.dim(0), wd = xv.dim(1), c = xv.dim(2);
  const std::size_t co = wv.dim(1);
  if (wv.dim(0) != c || bv.size() != co) {
    throw DimensionError("conv1x1: input " + shape_to_string(xv.shape()) +
                         " incompatible with weight " +
                         shape_to_string(wv.shape()) + " and bias " +
                         shape_to_string(bv.shape()));
  }
  const std::size_t pixels = h * wd;
  Tensor out({h, wd, co});
  const double* px = xv.data().data();
  const double* pw = wv.data().data();
  const double* pb = bv.data().data();
  double* po = out.data().data();
  for (std::size_t p = 0; p < pixels; ++p) {
    double* orow = po + p * co;
    std::copy(pb, pb + co, orow);
    for (std::size_t i = 0; i < c; ++i) {
      const double s = px[p * c + i];
      if (s == 0.0) continue;
      const double* wrow = pw + i * co;
      for (std::size_t j = 0; j < co; ++j) orow[j] += s * wrow[j];
    }
  }
  return g.emplace(
      OpKind::kConv1x1, {x.id, w.id, b.id}, std::move(out),
      [pixels, c, co](Graph& gr, std::size_t self) {
        const auto& in = gr.inputs(Var{self});
        const double* go = gr.grad(Var{self}).data().data();
        const double* px = gr.value(Var{in[0]}).data().data();
        const double* pw = gr.value(Var{in[1]}).data().data();
        if (wants(gr, in[0])) {
          double* gx = gr.grad_buffer(in[0]).data().data();
          for (std::size_t p = 0; p < pixels; ++p) {
            const double* grow = go + p * co;
            for (std::size_t i = 0; i < c; ++i) {
              const double* wrow = pw + i * co;
              double acc = 0.0;
              for (std::size_t j = 0; j < co; ++j) acc += grow[j] * wrow[j];
              gx[p * c + i] += acc;
            }
          }
        }
        if (wants(gr, in[1])) {
          double* gw = gr.grad_buffer(in[1]).data().data();
          for (std::size_t p = 0; p < pixels; ++p) {
            const double* grow = go + p * co;
            for (std::size_t i = 0; i < c; ++i) {
              const double s = px[p * c + i];
              if (s == 0.0) continue;
              double* gwrow = gw + i * co;
              for (std::size_t j = 0; j < co; ++j) gwrow[j] += s * grow[j];
            }
          }
        }
        if (wants(gr, in[2])) {
          double* gb = gr.grad_buffer(in[2]).data().data();
          for (std::size_t p = 0; p < pixels; ++p) {
            for (std::size_t j = 0; j < co; ++j) gb[j] += go[p * co + j];
          }
        }
      });
}

Var conv3x3_stride2(Graph& g, Var x, Var w, Var b) {
  const Tensor& xv = g.value(x);
  const Tensor& wv = g.value(w);
  const Tensor& bv = g.value(b);
  require_rank(xv, 3, "conv3x3_stride2");
  require_rank(wv, 4, "conv3x3_stride2");
  const std::size_t h = xv.dim(0), wd = xv.dim(1), c = xv.dim(2);
  const std::size_t co = wv.dim(3);
  if (wv.dim(0) != 3 || wv.dim(1) != 3 || wv.dim(2) != c || bv.size() != co) {
    throw DimensionError("conv3x3_stride2: input " +
                         shape_to_string(xv.shape()) +
                         " incompatible with weight " +
                         shape_to_string(wv.shape()) + " and bias " +
                         shape_to_string(bv.shape()));
  }
  if (h % 2 != 0 || wd % 2 != 0) {
    throw DimensionError("conv3x3_stride2: spatial dims must be even, got " +
                         shape_to_string(xv.shape()));
  }
  const std::size_t oh = h / 2, ow = wd / 2;
  Tensor out({oh, ow, co});
  const double* px = xv.data().data();
  const double* pw = wv.data().data();
  const double* pb = bv.data().data();
  double* po = out.data().data();
  for (std::size_t oy = 0; oy < oh; ++oy) {
    for (std::size_t ox = 0; ox < ow; ++ox) {
      double* orow = po + (oy * ow + ox) * co;
      std::copy(pb, pb + co, orow);
      for (std::size_t ky = 0; ky < 3; ++ky) {
        const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
        for (std::size_t kx = 0; kx < 3; ++kx) {
          const std::ptrdiff_t ix =
              static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
          if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
          const double* xin = px + (iy * wd + ix) * c;
          const double* wk = pw + (ky * 3 + kx) * c * co;
          for (std::size_t i = 0; i < c; ++i) {
            const double s = xin[i];
            if (s == 0.0) continue;
            const double* wrow = wk + i * co;
            for (std::size_t j = 0; j < co; ++j) orow[j] += s * wrow[j];
          }
        }
      }
    }
  }
  return g.emplace(
      OpKind::kConv3x3Stride2, {x.id, w.id, b.id}, std::move(out),
      [h, wd, c, co, oh, ow](Graph& gr, std::size_t self) {
        const auto& in = gr.inputs(Var{self});
        const double* go = gr.grad(Var{self}).data().data();
        const double* px = gr.value(Var{in[0]}).data().data();
        const double* pw = gr.value(Var{in[1]}).data().data();
        const bool want_x = wants(gr, in[0]);
        const bool want_w = wants(gr, in[1]);
        double* gx = want_x ? gr.grad_buffer(in[0]).data().data() : nullptr;
        double* gw = want_w ? gr.grad_buffer(in[1]).data().data() : nullptr;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double* grow = go + (oy * ow + ox) * co;
            for (std::size_t ky = 0; ky < 3; ++ky) {
              const std::ptrdiff_t iy =
                  static_cast<std::ptrdiff_t>(2 * oy + ky) - 1;
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              for (std::size_t kx = 0; kx < 3; ++kx) {
                const std::ptrdiff_t ix =
                    static_cast<std::ptrdiff_t>(2 * ox + kx) - 1;
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(wd)) continue;
                const std::size_t xoff = (iy * wd + ix) * c;
                const std::size_t woff = (ky * 3 + kx) * c * co;
                for (std::size_t i = 0; i < c; ++i) {
                  const double* wrow = pw + woff + i * co;
                  if (want_x) {
                    double acc = 0.0;
                    for (std::size_t j = 0; j < co; ++j) acc += grow[j] * wrow[j];
                    gx[xoff + i] += acc;
                  }
                  if (want_w) {
                    const double s = px[xoff + i];
                    if (s == 0.0) continue;
                    double* gwrow = gw + woff + i * co;
                    for (std::size_t j = 0; j < co; ++j) gwrow[j] += s * grow[j];
                  }
                }
              }
            }
          }
        }
        if (wants(gr, in[2])) {
          double* gb = gr.grad_buffer(in[2]).data().data();
          for (std::size_t p = 0; p < oh * ow; ++p) {
            for (std::size_t j = 0; j < co; ++j) gb[j] += go[p * co + j];
          }
        }
      });
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Var sigmoid(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = sigmoid_value(xv[i]);
  return g.emplace(OpKind::kSigmoid, {x.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& y = gr.value(Var{self});
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < y.size(); ++i) {
                       gx[i] += go[i] * y[i] * (1.0 - y[i]);
                     }
                   });
}

Var relu(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  return g.emplace(OpKind::kRelu, {x.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& xv = gr.value(Var{in});
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < xv.size(); ++i) {
                       if (xv[i] > 0.0) gx[i] += go[i];
                     }
                   });
}

namespace {

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " invalid for " + shape_to_string(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor softmax_values(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis, "softmax");
  Tensor out(x.shape());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t a = 0; a < s.n; ++a) mx = std::max(mx, x[base + a * s.inner]);
      double total = 0.0;
      for (std::size_t a = 0; a < s.n; ++a) {
        const double e = std::exp(x[base + a * s.inner] - mx);
        out[base + a * s.inner] = e;
        total += e;
      }
      for (std::size_t a = 0; a < s.n; ++a) out[base + a * s.inner] /= total;
    }
  }
  return out;
}

Var softmax(Graph& g, Var x, std::size_t axis) {
  const AxisSplit s = split_axis(g.value(x).shape(), axis, "softmax");
  Tensor out = softmax_values(g.value(x), axis);
  return g.emplace(
      OpKind::kSoftmax, {x.id}, std::move(out), [s](Graph& gr, std::size_t self) {
        const std::size_t in = gr.inputs(Var{self})[0];
        const Tensor& y = gr.value(Var{self});
        const Tensor& go = gr.grad(Var{self});
        Tensor& gx = gr.grad_buffer(in);
        for (std::size_t o = 0; o < s.outer; ++o) {
          for (std::size_t i = 0; i < s.inner; ++i) {
            const std::size_t base = o * s.n * s.inner + i;
            double dot = 0.0;
            for (std::size_t a = 0; a < s.n; ++a) {
              dot += go[base + a * s.inner] * y[base + a * s.inner];
            }
            for (std::size_t a = 0; a < s.n; ++a) {
              const std::size_t k = base + a * s.inner;
              gx[k] += y[k] * (go[k] - dot);
            }
          }
        }
      });
}

Var add(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("add: shapes " + shape_to_string(av.shape()) +
                         " and " + shape_to_string(bv.shape()) + " differ");
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return g.emplace(OpKind::kAdd, {a.id, b.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const Tensor& go = gr.grad(Var{self});
                     for (std::size_t in : gr.inputs(Var{self})) {
                       if (!wants(gr, in)) continue;
                       Tensor& gi = gr.grad_buffer(in);
                       for (std::size_t i = 0; i < go.size(); ++i) gi[i] += go[i];
                     }
                   });
}

Var mul(Graph& g, Var a, Var b) {
  const Tensor& av = g.value(a);
  const Tensor& bv = g.value(b);
  if (av.shape() != bv.shape()) {
    throw DimensionError("mul: shapes " + shape_to_string(av.shape()) +
                         " and " + shape_to_string(bv.shape()) + " differ");
  }
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return g.emplace(OpKind::kMul, {a.id, b.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const auto& in = gr.inputs(Var{self});
                     const Tensor& go = gr.grad(Var{self});
                     const Tensor& av = gr.value(Var{in[0]});
                     const Tensor& bv = gr.value(Var{in[1]});
                     if (wants(gr, in[0])) {
                       Tensor& ga = gr.grad_buffer(in[0]);
                       for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bv[i];
                     }
                     if (wants(gr, in[1])) {
                       Tensor& gb = gr.grad_buffer(in[1]);
                       for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * av[i];
                     }
                   });
}

Var scale(Graph& g, Var x, double factor) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = factor * xv[i];
  return g.emplace(OpKind::kScale, {x.id}, std::move(out),
                   [factor](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < go.size(); ++i) gx[i] += factor * go[i];
                   });
}

Var shift(Graph& g, Var x, double offset) {
  const Tensor& xv = g.value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = xv[i] + offset;
  return g.emplace(OpKind::kShift, {x.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
                   });
}

Var scale_by(Graph& g, Var x, Var s) {
  const Tensor& xv = g.value(x);
  const Tensor& sv = g.value(s);
  if (sv.size() != 1) {
    throw DimensionError("scale_by: factor must be a single element, got " +
                         shape_to_string(sv.shape()));
  }
  const double f = sv[0];
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f * xv[i];
  return g.emplace(OpKind::kScaleBy, {x.id, s.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const auto& in = gr.inputs(Var{self});
                     const Tensor& go = gr.grad(Var{self});
                     const Tensor& xv = gr.value(Var{in[0]});
                     const double f = gr.value(Var{in[1]})[0];
                     if (wants(gr, in[0])) {
                       Tensor& gx = gr.grad_buffer(in[0]);
                       for (std::size_t i = 0; i < go.size(); ++i) gx[i] += f * go[i];
                     }
                     if (wants(gr, in[1])) {
                       double acc = 0.0;
                       for (std::size_t i = 0; i < go.size(); ++i) acc += go[i] * xv[i];
                       gr.grad_buffer(in[1])[0] += acc;
                     }
                   });
}

Var concat(Graph& g, std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const Shape& first = g.value(parts[0]).shape();
  Shape out_shape = first;
  split_axis(first, axis, "concat");
  std::vector<std::size_t> widths;
  std::vector<std::size_t> ids;
  out_shape[axis] = 0;
  for (Var p : parts) {
    const Shape& s = g.value(p).shape();
    if (s.size() != first.size()) {
      throw DimensionError("concat: rank mismatch " + shape_to_string(first) +
                           " vs " + shape_to_string(s));
    }
    for (std::size_t d = 0; d < s.size(); ++d) {
      if (d != axis && s[d] != first[d]) {
        throw DimensionError("concat: shapes " + shape_to_string(first) +
                             " and " + shape_to_string(s) +
                             " differ off the concat axis");
      }
    }
    widths.push_back(s[axis]);
    out_shape[axis] += s[axis];
    ids.push_back(p.id);
  }
  const AxisSplit split = split_axis(out_shape, axis, "concat");
  Tensor out(out_shape);
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const Tensor& src = g.value(parts[k]);
    const std::size_t chunk = widths[k] * split.inner;
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(src.data().data() + o * chunk, chunk,
                  out.data().data() + o * split.n * split.inner + offset);
    }
    offset += chunk;
  }
  return g.emplace(OpKind::kConcat, std::move(ids), std::move(out),
                   [split, widths](Graph& gr, std::size_t self) {
                     const auto& in = gr.inputs(Var{self});
                     const Tensor& go = gr.grad(Var{self});
                     std::size_t offset = 0;
                     for (std::size_t k = 0; k < in.size(); ++k) {
                       const std::size_t chunk = widths[k] * split.inner;
                       if (wants(gr, in[k])) {
                         Tensor& gi = gr.grad_buffer(in[k]);
                         for (std::size_t o = 0; o < split.outer; ++o) {
                           const double* src =
                               go.data().data() + o * split.n * split.inner + offset;
                           double* dst = gi.data().data() + o * chunk;
                           for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
                         }
                       }
                       offset += chunk;
                     }
                   });
}

Var mean_pool(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 3, "mean_pool");
  const std::size_t pixels = xv.dim(0) * xv.dim(1), c = xv.dim(2);
  Tensor out({1, c});
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t j = 0; j < c; ++j) out[j] += xv[p * c + j];
  }
  for (std::size_t j = 0; j < c; ++j) out[j] /= static_cast<double>(pixels);
  return g.emplace(OpKind::kMeanPool, {x.id}, std::move(out),
                   [pixels, c](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     const double inv = 1.0 / static_cast<double>(pixels);
                     for (std::size_t p = 0; p < pixels; ++p) {
                       for (std::size_t j = 0; j < c; ++j) gx[p * c + j] += go[j] * inv;
                     }
                   });
}

Var upsample_nearest(Graph& g, Var x, std::size_t factor) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 3, "upsample_nearest");
  if (factor == 0) throw InputError("upsample_nearest: factor must be positive");
  const std::size_t h = xv.dim(0), w = xv.dim(1), c = xv.dim(2);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out({oh, ow, c});
  for (std::size_t y = 0; y < oh; ++y) {
    for (std::size_t xx = 0; xx < ow; ++xx) {
      const double* src = xv.data().data() + ((y / factor) * w + xx / factor) * c;
      std::copy_n(src, c, out.data().data() + (y * ow + xx) * c);
    }
  }
  return g.emplace(OpKind::kUpsample, {x.id}, std::move(out),
                   [w, c, oh, ow, factor](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t y = 0; y < oh; ++y) {
                       for (std::size_t xx = 0; xx < ow; ++xx) {
                         double* dst =
                             gx.data().data() + ((y / factor) * w + xx / factor) * c;
                         const double* src = go.data().data() + (y * ow + xx) * c;
                         for (std::size_t j = 0; j < c; ++j) dst[j] += src[j];
                       }
                     }
                   });
}

Var reshape(Graph& g, Var x, Shape shape) {
  Tensor out = g.value(x).reshaped(std::move(shape));
  return g.emplace(OpKind::kReshape, {x.id}, std::move(out),
                   [](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
                   });
}

Var transpose(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  require_rank(xv, 2, "transpose");
  const std::size_t m = xv.dim(0), n = xv.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = xv[i * n + j];
  }
  return g.emplace(OpKind::kTranspose, {x.id}, std::move(out),
                   [m, n](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const Tensor& go = gr.grad(Var{self});
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < m; ++i) {
                       for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += go[j * m + i];
                     }
                   });
}

Var sum(Graph& g, Var x) {
  const Tensor& xv = g.value(x);
  double total = 0.0;
  for (double v : xv.data()) total += v;
  return g.emplace(OpKind::kSum, {x.id}, Tensor::scalar(total),
                   [](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     const double go = gr.grad(Var{self})[0];
                     Tensor& gx = gr.grad_buffer(in);
                     for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += go;
                   });
}

Var pick(Graph& g, Var x, std::size_t index) {
  const Tensor& xv = g.value(x);
  if (index >= xv.size()) {
    throw DimensionError("pick: index " + std::to_string(index) +
                         " out of range for " + shape_to_string(xv.shape()));
  }
  return g.emplace(OpKind::kPick, {x.id}, Tensor::scalar(xv[index]),
                   [index](Graph& gr, std::size_t self) {
                     const std::size_t in = gr.inputs(Var{self})[0];
                     gr.grad_buffer(in)[index] += gr.grad(Var{self})[0];
                   });
}

Var cross_entropy(Graph& g, Var logits, const ClassMask& target) {
  const Tensor& lv = g.value(logits);
  require_rank(lv, 3, "cross_entropy");
  const std::size_t h = lv.dim(0), w = lv.dim(1), k = lv.dim(2);
  if (target.height != h || target.width != w) {
    throw DimensionError("cross_entropy: logits " + shape_to_string(lv.shape()) +
                         " vs mask " + std::to_string(target.height) + "x" +
                         std::to_string(target.width));
  }
  const std::size_t pixels = h * w;
  Tensor probs({pixels, k});
  double loss = 0.0;
  for (std::size_t p = 0; p < pixels; ++p) {
    const std::size_t label = target.labels[p];
    if (label >= k) {
      throw InputError("cross_entropy: class id " + std::to_string(label) +
                       " outside [0, " + std::to_string(k) + ")");
    }
    const double* row = lv.data().data() + p * k;
    double mx = row[0];
    for (std::size_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(row[j] - mx);
      probs[p * k + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < k; ++j) probs[p * k + j] /= total;
    loss += (mx + std::log(total)) - row[label];
  }
  loss /= static_cast<double>(pixels);
  std::vector<std::uint8_t> labels = target.labels;
  return g.emplace(
      OpKind::kCrossEntropy, {logits.id}, Tensor::scalar(loss),
      [probs = std::move(probs), labels = std::move(labels), pixels, k](
          Graph& gr, std::size_t self) {
        const std::size_t in = gr.inputs(Var{self})[0];
        const double go = gr.grad(Var{self})[0] / static_cast<double>(pixels);
        Tensor& gx = gr.grad_buffer(in);
        for (std::size_t p = 0; p < pixels; ++p) {
          for (std::size_t j = 0; j < k; ++j) {
            const double onehot = (labels[p] == j) ? 1.0 : 0.0;
            gx[p * k + j] += go * (probs[p * k + j] - onehot);
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient checking

GradCheckResult grad_check(const std::function<double()>& f,
                           std::span<Tensor* const> params,
                           std::span<const Tensor> analytic, double eps) {
  if (!(eps > 0.0)) throw InputError("grad_check: eps must be positive");
  if (params.size() != analytic.size()) {
    throw DimensionError("grad_check: " + std::to_string(params.size()) +
                         " parameter blocks but " +
                         std::to_string(analytic.size()) + " gradients");
  }
  GradCheckResult result;
  result.per_block.assign(params.size(), 0.0);
  for (std::size_t b = 0; b < params.size(); ++b) {
    Tensor& p = *params[b];
    if (analytic[b].shape() != p.shape()) {
      throw DimensionError("grad_check: gradient " +
                           shape_to_string(analytic[b].shape()) +
                           " vs parameter " + shape_to_string(p.shape()));
    }
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double saved = p[i];
      p[i] = saved + eps;
      const double up = f();
      p[i] = saved - eps;
      const double down = f();
      p[i] = saved;
      const double numeric = (up - down) / (2.0 * eps);
      const double a = analytic[b][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      result.per_block[b] = std::max(result.per_block[b], err);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_block = b;
        result.worst_index = i;
      }
    }
  }
  return result;
}

GradCheckResult grad_check(const std::function<Var(Graph&)>& build,
                           std::span<Tensor* const> params, double eps) {
  std::vector<Tensor> analytic;
  {
    Graph g;
    const Var loss = build(g);
    g.backward(loss);
    for (Tensor* p : params) {
      const Tensor* gp = g.grad_of(*p);
      analytic.push_back(gp ? *gp : Tensor(p->shape()));
    }
  }
  auto value = [&build]() {
    Graph g;
    return g.value(build(g)).item();
  };
  return grad_check(value, params, analytic, eps);
}

}  // namespace dcp
