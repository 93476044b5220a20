// SPDX-License-Identifier: Apache-2.0
#include "maskgru/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <string>

namespace maskgru {

namespace debug {
namespace {
std::atomic<Fault> g_fault{Fault::kNone};
}
void set_fault(Fault fault) { g_fault.store(fault); }
Fault fault() { return g_fault.load(); }
}  // namespace debug

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kMul: return "mul";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kAddScalar: return "add_scalar";
    case OpKind::kConcat: return "concat_channels";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kTanh: return "tanh";
    case OpKind::kRelu: return "relu";
    case OpKind::kPrelu: return "prelu";
    case OpKind::kAbs: return "abs";
    case OpKind::kMaxPool2d: return "maxpool2d";
    case OpKind::kFlatten: return "flatten";
    case OpKind::kLinear: return "linear";
    case OpKind::kInstanceNorm: return "instance_norm";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kSum: return "sum";
    case OpKind::kGather: return "gather";
    case OpKind::kMinimum: return "minimum";
    case OpKind::kMaximum: return "maximum";
    case OpKind::kCustom: return "custom";
  }
  return "unknown";
}

// ---------------------------------------------------------------------------
// Var / BackwardContext

const Tensor& Var::value() const {
  if (!graph_) throw UsageError("value() on an unbound Var");
  return graph_->value(*this);
}

bool Var::requires_grad() const { return graph_ && graph_->requires_grad(*this); }

const Tensor& BackwardContext::out_value() const { return graph_.nodes_[node_].value; }

const Tensor& BackwardContext::input(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].value;
}

bool BackwardContext::needs_grad(std::size_t i) const {
  return graph_.nodes_[graph_.nodes_[node_].inputs.at(i)].requires_grad;
}

std::span<double> BackwardContext::input_grad(std::size_t i) {
  auto& in = graph_.nodes_[graph_.nodes_[node_].inputs.at(i)];
  if (in.grad.size() != in.value.numel()) in.grad.assign(in.value.numel(), 0.0);
  return in.grad;
}

// ---------------------------------------------------------------------------
// Graph

void Graph::check_owned(Var v, const char* what) const {
  if (v.graph_ != this || v.id_ >= nodes_.size()) {
    throw UsageError(std::string(what) + ": Var does not belong to this graph");
  }
}

Var Graph::constant(Tensor value) {
  if (check_finite_ && !value.all_finite()) throw NumericError("non-finite constant");
  nodes_.push_back(Node{OpKind::kConstant, {}, std::move(value), {}, false, nullptr, {}});
  return Var(this, nodes_.size() - 1);
}

Var Graph::parameter(Tensor& param) {
  if (check_finite_ && !param.all_finite()) throw NumericError("non-finite parameter");
  nodes_.push_back(Node{OpKind::kParameter, {}, param, {}, grad_enabled_, &param, {}});
  nodes_.back().value.clear_grad();
  return Var(this, nodes_.size() - 1);
}

Var Graph::record(OpKind kind, std::initializer_list<Var> inputs, Tensor value, BackwardFn backward) {
  Node node{kind, {}, std::move(value), {}, false, nullptr, {}};
  node.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    check_owned(v, op_name(kind));
    node.inputs.push_back(v.id_);
    node.requires_grad = node.requires_grad || nodes_[v.id_].requires_grad;
  }
  node.requires_grad = node.requires_grad && grad_enabled_;
  if (check_finite_ && !node.value.all_finite()) {
    throw NumericError(std::string("non-finite output from ") + op_name(kind));
  }
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Tensor& Graph::value(Var v) const {
  check_owned(v, "value");
  return nodes_[v.id_].value;
}

std::span<const double> Graph::grad(Var v) const {
  check_owned(v, "grad");
  return nodes_[v.id_].grad;
}

bool Graph::requires_grad(Var v) const {
  check_owned(v, "requires_grad");
  return nodes_[v.id_].requires_grad;
}

void Graph::backward(Var loss) {
  check_owned(loss, "backward");
  if (backward_done_) throw UsageError("backward: graph has already been differentiated");
  Node& root = nodes_[loss.id_];
  if (root.value.numel() != 1) {
    throw UsageError("backward: loss must be a scalar, got shape " + shape_str(root.value.shape()));
  }
  backward_done_ = true;
  if (!root.requires_grad) return;
  root.grad.assign(1, 1.0);

  for (std::size_t id = loss.id_ + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || node.grad.empty()) continue;
    if (node.param != nullptr) {
      auto dst = node.param->mutable_grad();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += node.grad[i];
      continue;
    }
    if (node.backward) {
      BackwardContext ctx(*this, id, node.grad);
      node.backward(ctx);
    }
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

void require_same_shape(Var a, Var b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_same_graph(Var a, Var b, const char* op) {
  if (a.graph() != b.graph() || !a.valid()) {
    throw UsageError(std::string(op) + ": operands belong to different graphs");
  }
}

template <typename F>
Tensor map_unary(const Tensor& x, F f) {
  Tensor out(x.shape());
  auto src = x.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

double stable_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  require_same_graph(a, b, "add");
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += rhs[i];
  return a.graph()->record(OpKind::kAdd, {a, b}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    for (std::size_t k = 0; k < 2; ++k) {
      if (!ctx.needs_grad(k)) continue;
      auto d = ctx.input_grad(k);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  require_same_graph(a, b, "sub");
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] -= rhs[i];
  return a.graph()->record(OpKind::kSub, {a, b}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    if (ctx.needs_grad(0)) {
      auto d = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
    }
    if (ctx.needs_grad(1)) {
      auto d = ctx.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_graph(a, b, "mul");
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  auto dst = out.data();
  auto rhs = b.value().data();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] *= rhs[i];
  return a.graph()->record(OpKind::kMul, {a, b}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto av = ctx.input(0).data();
    auto bv = ctx.input(1).data();
    if (ctx.needs_grad(0)) {
      auto d = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * bv[i];
    }
    if (ctx.needs_grad(1)) {
      auto d = ctx.input_grad(1);
      for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * av[i];
    }
  });
}

Var scalar_mul(Var a, double s) {
  Tensor out = map_unary(a.value(), [s](double v) { return v * s; });
  return a.graph()->record(OpKind::kScalarMul, {a}, std::move(out), [s](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * s;
  });
}

Var add_scalar(Var a, double s) {
  Tensor out = map_unary(a.value(), [s](double v) { return v + s; });
  return a.graph()->record(OpKind::kAddScalar, {a}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var concat_channels(Var a, Var b) {
  require_same_graph(a, b, "concat_channels");
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin() + 1, sa.end(), sb.begin() + 1)) {
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(sa) + " and " + shape_str(sb));
  }
  Shape so = sa;
  so[0] = sa[0] + sb[0];
  std::vector<double> data;
  data.reserve(shape_numel(so));
  auto av = a.value().data();
  auto bv = b.value().data();
  data.insert(data.end(), av.begin(), av.end());
  data.insert(data.end(), bv.begin(), bv.end());
  const std::size_t split = av.size();
  return a.graph()->record(OpKind::kConcat, {a, b}, Tensor(so, std::move(data)),
                           [split](BackwardContext& ctx) {
                             auto g = ctx.out_grad();
                             if (ctx.needs_grad(0)) {
                               auto d = ctx.input_grad(0);
                               for (std::size_t i = 0; i < split; ++i) d[i] += g[i];
                             }
                             if (ctx.needs_grad(1)) {
                               auto d = ctx.input_grad(1);
                               for (std::size_t i = 0; i < d.size(); ++i) d[i] += g[split + i];
                             }
                           });
}

Var sigmoid(Var x) {
  Tensor out = map_unary(x.value(), stable_sigmoid);
  return x.graph()->record(OpKind::kSigmoid, {x}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto y = ctx.out_value().data();
    auto d = ctx.input_grad(0);
    const double fudge = debug::fault() == debug::Fault::kSigmoidBackward ? 1.01 : 1.0;
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += fudge * g[i] * y[i] * (1.0 - y[i]);
  });
}

Var tanh(Var x) {
  Tensor out = map_unary(x.value(), [](double v) { return std::tanh(v); });
  return x.graph()->record(OpKind::kTanh, {x}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto y = ctx.out_value().data();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i] * (1.0 - y[i] * y[i]);
  });
}

Var relu(Var x) {
  Tensor out = map_unary(x.value(), [](double v) { return v > 0.0 ? v : 0.0; });
  return x.graph()->record(OpKind::kRelu, {x}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto xv = ctx.input(0).data();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) d[i] += g[i];
    }
  });
}

Var prelu(Var x, Var slope) {
  require_same_graph(x, slope, "prelu");
  if (slope.value().numel() != 1) throw ShapeError("prelu: slope must have a single element");
  const double a = slope.value()[0];
  Tensor out = map_unary(x.value(), [a](double v) { return v > 0.0 ? v : a * v; });
  return x.graph()->record(OpKind::kPrelu, {x, slope}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto xv = ctx.input(0).data();
    const double a = ctx.input(1)[0];
    if (ctx.needs_grad(0)) {
      auto d = ctx.input_grad(0);
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] > 0.0) {
          d[i] += g[i];
        } else if (xv[i] < 0.0) {
          d[i] += a * g[i];
        }
      }
    }
    if (ctx.needs_grad(1)) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] < 0.0) acc += g[i] * xv[i];
      }
      ctx.input_grad(1)[0] += acc;
    }
  });
}

Var abs(Var x) {
  Tensor out = map_unary(x.value(), [](double v) { return std::fabs(v); });
  return x.graph()->record(OpKind::kAbs, {x}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto xv = ctx.input(0).data();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0) {
        d[i] += g[i];
      } else if (xv[i] < 0.0) {
        d[i] -= g[i];
      }
    }
  });
}

Var maxpool2d(Var x, std::size_t kernel, std::size_t stride) {
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("maxpool2d: expected [C,H,W], got " + shape_str(s));
  if (kernel == 0 || stride == 0) throw ParameterError("maxpool2d: kernel and stride must be positive");
  if (s[1] < kernel || s[2] < kernel) {
    throw ShapeError("maxpool2d: kernel " + std::to_string(kernel) + " larger than input " + shape_str(s));
  }
  const std::size_t c = s[0], h = s[1], w = s[2];
  const std::size_t oh = (h - kernel) / stride + 1;
  const std::size_t ow = (w - kernel) / stride + 1;
  Tensor out(Shape{c, oh, ow});
  std::vector<std::size_t> argmax(out.numel());
  auto in = x.value().data();
  auto dst = out.data();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (ch * h + oy * stride) * w + ox * stride;
        for (std::size_t ky = 0; ky < kernel; ++ky) {
          const std::size_t row = (ch * h + oy * stride + ky) * w + ox * stride;
          for (std::size_t kx = 0; kx < kernel; ++kx) {
            if (in[row + kx] > in[best]) best = row + kx;
          }
        }
        const std::size_t o = (ch * oh + oy) * ow + ox;
        dst[o] = in[best];
        argmax[o] = best;
      }
    }
  }
  return x.graph()->record(OpKind::kMaxPool2d, {x}, std::move(out),
                           [argmax = std::move(argmax)](BackwardContext& ctx) {
                             auto g = ctx.out_grad();
                             auto d = ctx.input_grad(0);
                             for (std::size_t o = 0; o < g.size(); ++o) d[argmax[o]] += g[o];
                           });
}

Var flatten(Var x) {
  Tensor out = x.value().reshaped(Shape{x.value().numel()});
  return x.graph()->record(OpKind::kFlatten, {x}, std::move(out), [](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    auto d = ctx.input_grad(0);
    for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
  });
}

Var linear(Var weight, Var x, Var bias) {
  require_same_graph(weight, x, "linear");
  require_same_graph(weight, bias, "linear");
  const Shape& ws = weight.shape();
  if (ws.size() != 2 || x.shape() != Shape{ws[1]} || bias.shape() != Shape{ws[0]}) {
    throw ShapeError("linear: weight " + shape_str(ws) + ", input " + shape_str(x.shape()) +
                     ", bias " + shape_str(bias.shape()) + " are inconsistent");
  }
  const std::size_t n_out = ws[0], n_in = ws[1];
  Tensor out = bias.value();
  auto wv = weight.value().data();
  auto xv = x.value().data();
  auto dst = out.data();
  for (std::size_t o = 0; o < n_out; ++o) {
    const double* row = wv.data() + o * n_in;
    double acc = 0.0;
    for (std::size_t i = 0; i < n_in; ++i) acc += row[i] * xv[i];
    dst[o] += acc;
  }
  return weight.graph()->record(
      OpKind::kLinear, {weight, x, bias}, std::move(out), [n_out, n_in](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        if (ctx.needs_grad(0)) {
          auto xv = ctx.input(1).data();
          auto dw = ctx.input_grad(0);
          for (std::size_t o = 0; o < n_out; ++o) {
            if (g[o] == 0.0) continue;
            double* row = dw.data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) row[i] += g[o] * xv[i];
          }
        }
        if (ctx.needs_grad(1)) {
          auto wv = ctx.input(0).data();
          auto dx = ctx.input_grad(1);
          for (std::size_t o = 0; o < n_out; ++o) {
            if (g[o] == 0.0) continue;
            const double* row = wv.data() + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) dx[i] += g[o] * row[i];
          }
        }
        if (ctx.needs_grad(2)) {
          auto db = ctx.input_grad(2);
          for (std::size_t o = 0; o < n_out; ++o) db[o] += g[o];
        }
      });
}

Var instance_norm(Var x, Var scale, Var shift, double eps) {
  require_same_graph(x, scale, "instance_norm");
  require_same_graph(x, shift, "instance_norm");
  const Shape& s = x.shape();
  if (s.size() != 3) throw ShapeError("instance_norm: expected [C,H,W], got " + shape_str(s));
  const std::size_t c = s[0], n = s[1] * s[2];
  if (scale.shape() != Shape{c} || shift.shape() != Shape{c}) {
    throw ShapeError("instance_norm: scale/shift must have shape [" + std::to_string(c) + "]");
  }
  auto xv = x.value().data();
  auto gamma = scale.value().data();
  auto beta = shift.value().data();
  Tensor out(s);
  auto dst = out.data();
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(c);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double* src = xv.data() + ch * n;
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += src[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (src[i] - mean) * (src[i] - mean);
    var /= static_cast<double>(n);
    const double inv = 1.0 / std::sqrt(var + eps);
    inv_std[ch] = inv;
    for (std::size_t i = 0; i < n; ++i) {
      const double xh = (src[i] - mean) * inv;
      xhat[ch * n + i] = xh;
      dst[ch * n + i] = gamma[ch] * xh + beta[ch];
    }
  }
  return x.graph()->record(
      OpKind::kInstanceNorm, {x, scale, shift}, std::move(out),
      [c, n, xhat = std::move(xhat), inv_std = std::move(inv_std)](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto gamma = ctx.input(1).data();
        const double nn = static_cast<double>(n);
        for (std::size_t ch = 0; ch < c; ++ch) {
          const double* gy = g.data() + ch * n;
          const double* xh = xhat.data() + ch * n;
          double sum_g = 0.0, sum_gx = 0.0;
          for (std::size_t i = 0; i < n; ++i) {
            sum_g += gy[i];
            sum_gx += gy[i] * xh[i];
          }
          if (ctx.needs_grad(0)) {
            double* dx = ctx.input_grad(0).data() + ch * n;
            const double k = gamma[ch] * inv_std[ch] / nn;
            for (std::size_t i = 0; i < n; ++i) {
              dx[i] += k * (nn * gy[i] - sum_g - xh[i] * sum_gx);
            }
          }
          if (ctx.needs_grad(1)) ctx.input_grad(1)[ch] += sum_gx;
          if (ctx.needs_grad(2)) ctx.input_grad(2)[ch] += sum_g;
        }
      });
}

Var conv2d(Var x, Var weight, Var bias, std::size_t padding) {
  require_same_graph(x, weight, "conv2d");
  require_same_graph(x, bias, "conv2d");
  const Shape& xs = x.shape();
  const Shape& ws = weight.shape();
  if (xs.size() != 3 || ws.size() != 4) {
    throw ShapeError("conv2d: expected input [C,H,W] and weight [Co,Ci,kh,kw], got " + shape_str(xs) +
                     " and " + shape_str(ws));
  }
  if (ws[1] != xs[0]) {
    throw ShapeError("conv2d: input has " + std::to_string(xs[0]) + " channels but weight expects " +
                     std::to_string(ws[1]));
  }
  if (bias.shape() != Shape{ws[0]}) throw ShapeError("conv2d: bias must have shape [" + std::to_string(ws[0]) + "]");
  const std::size_t ci_n = xs[0], h = xs[1], w = xs[2];
  const std::size_t co_n = ws[0], kh = ws[2], kw = ws[3];
  if (h + 2 * padding < kh || w + 2 * padding < kw) {
    throw ShapeError("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = h + 2 * padding - kh + 1;
  const std::size_t ow = w + 2 * padding - kw + 1;
  const long pad = static_cast<long>(padding);

  Tensor out(Shape{co_n, oh, ow});
  auto in = x.value().data();
  auto wt = weight.value().data();
  auto bv = bias.value().data();
  auto dst = out.data();

  // Valid output-column range for a kernel column offset: ix = ox + kx - pad in [0, w).
  auto col_range = [=](std::size_t kx, std::size_t& lo, std::size_t& hi) {
    const long off = static_cast<long>(kx) - pad;
    const long l = std::max(0L, -off);
    const long r = std::min(static_cast<long>(ow), static_cast<long>(w) - off);
    lo = static_cast<std::size_t>(l);
    hi = r > l ? static_cast<std::size_t>(r) : lo;
  };

  for (std::size_t co = 0; co < co_n; ++co) {
    double* oplane = dst.data() + co * oh * ow;
    std::fill(oplane, oplane + oh * ow, bv[co]);
    for (std::size_t ci = 0; ci < ci_n; ++ci) {
      const double* iplane = in.data() + ci * h * w;
      for (std::size_t ky = 0; ky < kh; ++ky) {
        for (std::size_t kx = 0; kx < kw; ++kx) {
          const double wv = wt[((co * ci_n + ci) * kh + ky) * kw + kx];
          std::size_t lo, hi;
          col_range(kx, lo, hi);
          const long xoff = static_cast<long>(kx) - pad;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const long iy = static_cast<long>(oy + ky) - pad;
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            const double* irow = iplane + static_cast<std::size_t>(iy) * w;
            double* orow = oplane + oy * ow;
            for (std::size_t ox = lo; ox < hi; ++ox) {
              orow[ox] += wv * irow[static_cast<long>(ox) + xoff];
            }
          }
        }
      }
    }
  }

  return x.graph()->record(
      OpKind::kConv2d, {x, weight, bias}, std::move(out),
      [=](BackwardContext& ctx) {
        auto g = ctx.out_grad();
        auto in = ctx.input(0).data();
        auto wt = ctx.input(1).data();
        const bool need_x = ctx.needs_grad(0);
        const bool need_w = ctx.needs_grad(1);
        std::span<double> dx = need_x ? ctx.input_grad(0) : std::span<double>{};
        std::span<double> dw = need_w ? ctx.input_grad(1) : std::span<double>{};
        const double wfudge = debug::fault() == debug::Fault::kConvWeightBackward ? 0.99 : 1.0;
        for (std::size_t co = 0; co < co_n; ++co) {
          const double* gplane = g.data() + co * oh * ow;
          for (std::size_t ci = 0; ci < ci_n; ++ci) {
            const double* iplane = in.data() + ci * h * w;
            double* dxplane = need_x ? dx.data() + ci * h * w : nullptr;
            for (std::size_t ky = 0; ky < kh; ++ky) {
              for (std::size_t kx = 0; kx < kw; ++kx) {
                const std::size_t widx = ((co * ci_n + ci) * kh + ky) * kw + kx;
                const double wv = wt[widx];
                std::size_t lo, hi;
                col_range(kx, lo, hi);
                const long xoff = static_cast<long>(kx) - pad;
                double acc = 0.0;
                for (std::size_t oy = 0; oy < oh; ++oy) {
                  const long iy = static_cast<long>(oy + ky) - pad;
                  if (iy < 0 || iy >= static_cast<long>(h)) continue;
                  const double* grow = gplane + oy * ow;
                  const std::size_t irow_off = static_cast<std::size_t>(iy) * w;
                  if (need_w) {
                    const double* irow = iplane + irow_off;
                    for (std::size_t ox = lo; ox < hi; ++ox) acc += grow[ox] * irow[static_cast<long>(ox) + xoff];
                  }
                  if (need_x) {
                    double* drow = dxplane + irow_off;
                    for (std::size_t ox = lo; ox < hi; ++ox) drow[static_cast<long>(ox) + xoff] += wv * grow[ox];
                  }
                }
                if (need_w) dw[widx] += wfudge * acc;
              }
            }
          }
        }
        if (ctx.needs_grad(2)) {
          auto db = ctx.input_grad(2);
          for (std::size_t co = 0; co < co_n; ++co) {
            const double* gplane = g.data() + co * oh * ow;
            double acc = 0.0;
            for (std::size_t i = 0; i < oh * ow; ++i) acc += gplane[i];
            db[co] += acc;
          }
        }
      });
}

Var sum(Var x) {
  double acc = 0.0;
  for (double v : x.value().data()) acc += v;
  return x.graph()->record(OpKind::kSum, {x}, Tensor::scalar(acc), [](BackwardContext& ctx) {
    const double g = ctx.out_grad()[0];
    for (double& d : ctx.input_grad(0)) d += g;
  });
}

Var gather(Var x, std::vector<std::size_t> indices) {
  if (indices.empty()) throw ShapeError("gather: no indices");
  auto xv = x.value().data();
  std::vector<double> data(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= xv.size()) throw ShapeError("gather: index out of range");
    data[i] = xv[indices[i]];
  }
  Tensor out(Shape{indices.size()}, std::move(data));
  return x.graph()->record(OpKind::kGather, {x}, std::move(out),
                           [indices = std::move(indices)](BackwardContext& ctx) {
                             auto g = ctx.out_grad();
                             auto d = ctx.input_grad(0);
                             for (std::size_t i = 0; i < indices.size(); ++i) d[indices[i]] += g[i];
                           });
}

namespace {

Var select_elementwise(Var a, Var b, bool take_min, OpKind kind) {
  require_same_graph(a, b, op_name(kind));
  require_same_shape(a, b, op_name(kind));
  auto av = a.value().data();
  auto bv = b.value().data();
  Tensor out(a.shape());
  auto dst = out.data();
  std::vector<bool> from_a(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) {
    from_a[i] = take_min ? av[i] <= bv[i] : av[i] >= bv[i];
    dst[i] = from_a[i] ? av[i] : bv[i];
  }
  return a.graph()->record(kind, {a, b}, std::move(out), [from_a = std::move(from_a)](BackwardContext& ctx) {
    auto g = ctx.out_grad();
    std::span<double> da = ctx.needs_grad(0) ? ctx.input_grad(0) : std::span<double>{};
    std::span<double> db = ctx.needs_grad(1) ? ctx.input_grad(1) : std::span<double>{};
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (from_a[i]) {
        if (!da.empty()) da[i] += g[i];
      } else if (!db.empty()) {
        db[i] += g[i];
      }
    }
  });
}

}  // namespace

Var minimum(Var a, Var b) { return select_elementwise(a, b, true, OpKind::kMinimum); }
Var maximum(Var a, Var b) { return select_elementwise(a, b, false, OpKind::kMaximum); }

}  // namespace maskgru
