// SPDX-License-Identifier: Apache-2.0
#include "maskgru/cells.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <random>

namespace maskgru {

const char* model_kind_name(ModelKind kind) {
  return kind == ModelKind::kConvGru ? "convgru" : "maskgru";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "convgru") return ModelKind::kConvGru;
  if (name == "maskgru") return ModelKind::kMaskGru;
  throw ParameterError("unknown model kind '" + name + "' (expected maskgru or convgru)");
}

BBox BBox::canonical() const {
  return {std::min(x1, x2), std::min(y1, y2), std::max(x1, x2), std::max(y1, y2)};
}

double BBox::area() const { return std::max(0.0, x2 - x1) * std::max(0.0, y2 - y1); }

// ---------------------------------------------------------------------------
// Configuration and parameters

ModelConfig ModelConfig::for_kind(ModelKind kind, std::size_t height, std::size_t width) {
  ModelConfig cfg;
  cfg.kind = kind;
  cfg.height = height;
  cfg.width = width;
  cfg.instance_norm = kind == ModelKind::kMaskGru;
  return cfg;
}

void ModelConfig::validate() const {
  if (height == 0 || width == 0) throw ParameterError("frame size must be positive");
  if (kernel == 0 || kernel % 2 == 0) throw ParameterError("kernel size must be odd");
  if (pool_kernel == 0 || pool_stride == 0) throw ParameterError("pool kernel and stride must be positive");
  if (pool_kernel > height || pool_kernel > width) throw ParameterError("pool kernel larger than the frame");
  if (hidden1 == 0 || hidden2 == 0) throw ParameterError("head widths must be positive");
  if (!(beta >= 0.0 && beta <= 1.0)) throw ParameterError("beta must lie in [0, 1]");
  if (!(input_scale > 0.0)) throw ParameterError("input scale must be positive");
}

std::size_t ModelConfig::pooled_height() const { return (height - pool_kernel) / pool_stride + 1; }
std::size_t ModelConfig::pooled_width() const { return (width - pool_kernel) / pool_stride + 1; }

ModelParams ModelParams::zeros(const ModelConfig& config) {
  config.validate();
  const std::size_t k = config.kernel;
  ModelParams p;
  p.config = config;
  for (GateParams* g : {&p.reset, &p.update, &p.candidate}) {
    g->weight = Tensor(Shape{3, 6, k, k});
    g->bias = Tensor(Shape{3});
  }
  for (NormParams* n : {&p.reset_norm, &p.update_norm, &p.candidate_norm}) {
    n->scale = Tensor(Shape{3});
    n->shift = Tensor(Shape{3});
  }
  HeadParams& h = p.head;
  h.pool_weight = Tensor(Shape{1, 3, k, k});
  h.pool_bias = Tensor(Shape{1});
  h.fc1_weight = Tensor(Shape{config.hidden1, config.flatten_size()});
  h.fc1_bias = Tensor(Shape{config.hidden1});
  h.fc2_weight = Tensor(Shape{config.hidden2, config.hidden1});
  h.fc2_bias = Tensor(Shape{config.hidden2});
  h.out_weight = Tensor(Shape{4, config.hidden2});
  h.out_bias = Tensor(Shape{4});
  h.slope1 = Tensor(Shape{1});
  h.slope2 = Tensor(Shape{1});
  return p;
}

ModelParams ModelParams::initialize(const ModelConfig& config, std::uint64_t seed) {
  ModelParams p = zeros(config);
  std::mt19937_64 rng(seed);
  auto uniform = [&rng](Tensor& t, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (double& v : t.data()) v = dist(rng);
  };
  const double k2 = static_cast<double>(config.kernel * config.kernel);
  for (GateParams* g : {&p.reset, &p.update, &p.candidate}) uniform(g->weight, 1.0 / std::sqrt(6.0 * k2));
  // Normalised gates are unbounded. Start them near the range of the plain
  // activations (r, z around 0.5; ĥ around 0) so the recurrence is stable.
  for (NormParams* n : {&p.reset_norm, &p.update_norm}) {
    std::fill(n->scale.data().begin(), n->scale.data().end(), 0.25);
    std::fill(n->shift.data().begin(), n->shift.data().end(), 0.5);
  }
  std::fill(p.candidate_norm.scale.data().begin(), p.candidate_norm.scale.data().end(), 0.5);
  HeadParams& h = p.head;
  uniform(h.pool_weight, 1.0 / std::sqrt(3.0 * k2));
  uniform(h.fc1_weight, std::sqrt(6.0 / static_cast<double>(config.flatten_size())));
  uniform(h.fc2_weight, std::sqrt(6.0 / static_cast<double>(config.hidden1)));
  uniform(h.out_weight, 1.0 / std::sqrt(static_cast<double>(config.hidden2)));
  // Start from a small box in the middle of the frame.
  const double cx = 0.5 * static_cast<double>(config.width);
  const double cy = 0.5 * static_cast<double>(config.height);
  const double half = static_cast<double>(std::min(config.width, config.height)) / 16.0;
  h.out_bias[0] = cx - half;
  h.out_bias[1] = cy - half;
  h.out_bias[2] = cx + half;
  h.out_bias[3] = cy + half;
  h.slope1[0] = 0.25;
  h.slope2[0] = 0.25;
  return p;
}

namespace {

template <typename Params, typename Ref, typename Self>
std::vector<Ref> collect_named(Self& p) {
  std::vector<Ref> out;
  auto add = [&out](const char* name, auto& t) { out.push_back(Ref{name, &t}); };
  add("gate_r.weight", p.reset.weight);
  add("gate_r.bias", p.reset.bias);
  add("gate_z.weight", p.update.weight);
  add("gate_z.bias", p.update.bias);
  add("gate_h.weight", p.candidate.weight);
  add("gate_h.bias", p.candidate.bias);
  if (p.config.uses_instance_norm()) {
    add("norm_r.scale", p.reset_norm.scale);
    add("norm_r.shift", p.reset_norm.shift);
    add("norm_z.scale", p.update_norm.scale);
    add("norm_z.shift", p.update_norm.shift);
    add("norm_h.scale", p.candidate_norm.scale);
    add("norm_h.shift", p.candidate_norm.shift);
  }
  add("head.pool.weight", p.head.pool_weight);
  add("head.pool.bias", p.head.pool_bias);
  add("head.fc1.weight", p.head.fc1_weight);
  add("head.fc1.bias", p.head.fc1_bias);
  add("head.fc2.weight", p.head.fc2_weight);
  add("head.fc2.bias", p.head.fc2_bias);
  add("head.out.weight", p.head.out_weight);
  add("head.out.bias", p.head.out_bias);
  if (p.config.activation == HeadActivation::kPrelu) {
    add("head.act1.slope", p.head.slope1);
    add("head.act2.slope", p.head.slope2);
  }
  return out;
}

}  // namespace

std::vector<NamedTensorRef> ModelParams::named() {
  return collect_named<ModelParams, NamedTensorRef>(*this);
}

std::vector<std::pair<std::string, const Tensor*>> ModelParams::named() const {
  struct ConstRef {
    std::string name;
    const Tensor* tensor;
  };
  std::vector<std::pair<std::string, const Tensor*>> out;
  for (auto& r : collect_named<ModelParams, ConstRef>(*this)) out.emplace_back(r.name, r.tensor);
  return out;
}

std::size_t ModelParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : named()) n += t->numel();
  return n;
}

void ModelParams::zero_grad() {
  for (auto& r : named()) r.tensor->zero_grad();
}

// ---------------------------------------------------------------------------
// Graph binding

CellState::CellState(Var h) : h_(h) {
  const Shape& s = h.shape();
  if (s.size() != 3 || s[0] != 3) {
    throw ShapeError("cell state must have shape [3,H,W], got " + shape_str(s));
  }
}

namespace {

template <typename Bind>
BoundModel bind_with(const ModelParams& p, Bind bind_one) {
  p.config.validate();
  BoundModel m;
  m.config = p.config;
  m.reset = {bind_one(p.reset.weight), bind_one(p.reset.bias)};
  m.update = {bind_one(p.update.weight), bind_one(p.update.bias)};
  m.candidate = {bind_one(p.candidate.weight), bind_one(p.candidate.bias)};
  if (p.config.uses_instance_norm()) {
    m.reset_norm = NormVars{bind_one(p.reset_norm.scale), bind_one(p.reset_norm.shift)};
    m.update_norm = NormVars{bind_one(p.update_norm.scale), bind_one(p.update_norm.shift)};
    m.candidate_norm = NormVars{bind_one(p.candidate_norm.scale), bind_one(p.candidate_norm.shift)};
  }
  const HeadParams& h = p.head;
  m.head.pool_weight = bind_one(h.pool_weight);
  m.head.pool_bias = bind_one(h.pool_bias);
  m.head.fc1_weight = bind_one(h.fc1_weight);
  m.head.fc1_bias = bind_one(h.fc1_bias);
  m.head.fc2_weight = bind_one(h.fc2_weight);
  m.head.fc2_bias = bind_one(h.fc2_bias);
  m.head.out_weight = bind_one(h.out_weight);
  m.head.out_bias = bind_one(h.out_bias);
  if (p.config.activation == HeadActivation::kPrelu) {
    m.head.slope1 = bind_one(h.slope1);
    m.head.slope2 = bind_one(h.slope2);
  }
  return m;
}

}  // namespace

BoundModel bind(Graph& graph, ModelParams& params) {
  // bind_with only reads through const refs; the tensors themselves are ours.
  return bind_with(params, [&graph](const Tensor& t) { return graph.parameter(const_cast<Tensor&>(t)); });
}

BoundModel bind_frozen(Graph& graph, const ModelParams& params) {
  return bind_with(params, [&graph](const Tensor& t) { return graph.constant(t); });
}

// ---------------------------------------------------------------------------
// Cells

namespace {

void check_step_inputs(const BoundModel& model, const CellState& prev, Var frame) {
  const Shape expected{3, model.config.height, model.config.width};
  if (frame.shape() != expected) {
    throw ShapeError("frame must have shape " + shape_str(expected) + ", got " + shape_str(frame.shape()));
  }
  if (prev.value().shape() != expected) {
    throw ShapeError("hidden state must have shape " + shape_str(expected) + ", got " +
                     shape_str(prev.value().shape()));
  }
}

Var gate_conv(const GateVars& gate, Var input, std::size_t kernel) {
  return conv2d(input, gate.weight, gate.bias, (kernel - 1) / 2);
}

Var maybe_norm(const std::optional<NormVars>& norm, Var x) {
  return norm ? instance_norm(x, norm->scale, norm->shift) : x;
}

CellState gru_step(const BoundModel& model, const CellState& prev, Var frame, bool normalise) {
  check_step_inputs(model, prev, frame);
  const std::size_t k = model.config.kernel;
  const std::optional<NormVars> none;
  const auto& nr = normalise ? model.reset_norm : none;
  const auto& nz = normalise ? model.update_norm : none;
  const auto& nh = normalise ? model.candidate_norm : none;

  Var h = prev.h();
  Var hx = concat_channels(h, frame);
  Var r = maybe_norm(nr, sigmoid(gate_conv(model.reset, hx, k)));
  Var z = maybe_norm(nz, sigmoid(gate_conv(model.update, hx, k)));
  Var cand = maybe_norm(nh, tanh(gate_conv(model.candidate, concat_channels(mul(h, r), frame), k)));
  Var keep = add_scalar(scalar_mul(z, -1.0), 1.0);
  return CellState(add(mul(h, keep), mul(z, cand)));
}

}  // namespace

CellState convgru_step(const BoundModel& model, const CellState& prev, Var frame) {
  return gru_step(model, prev, frame, false);
}

CellState maskgru_step(const BoundModel& model, const CellState& prev, Var frame) {
  return gru_step(model, prev, frame, true);
}

HeadOutput bbox_head(const BoundModel& model, const CellState& state) {
  const ModelConfig& cfg = model.config;
  const HeadVars& hv = model.head;
  auto activate = [&](Var x, Var slope) {
    return cfg.activation == HeadActivation::kPrelu ? prelu(x, slope) : relu(x);
  };
  Var pooled = maxpool2d(state.h(), cfg.pool_kernel, cfg.pool_stride);
  Var hpool = conv2d(pooled, hv.pool_weight, hv.pool_bias, (cfg.kernel - 1) / 2);
  Var a1 = activate(linear(hv.fc1_weight, flatten(hpool), hv.fc1_bias), hv.slope1);
  Var a2 = activate(linear(hv.fc2_weight, a1, hv.fc2_bias), hv.slope2);
  Var raw = linear(hv.out_weight, a2, hv.out_bias);
  Var lo = minimum(gather(raw, {0, 1}), gather(raw, {2, 3}));
  Var hi = maximum(gather(raw, {0, 1}), gather(raw, {2, 3}));
  return {concat_channels(lo, hi), a1, a2};
}

BBox to_bbox(const Tensor& box) {
  if (box.numel() != 4) throw ShapeError("a box tensor has 4 entries, got " + shape_str(box.shape()));
  return {box[0], box[1], box[2], box[3]};
}

// ---------------------------------------------------------------------------
// Mask and blend

namespace {
std::atomic<std::uint64_t> g_render_calls{0};

// Rounded pixel index, saturated well outside any frame so casts stay defined.
long pixel_index(double v) {
  if (std::isnan(v)) return -(1L << 40);
  const double r = std::round(std::clamp(v, -1e12, 1e12));
  return static_cast<long>(r);
}
}  // namespace

std::uint64_t render_mask_calls() { return g_render_calls.load(); }

Tensor render_mask(const BBox& box, std::size_t height, std::size_t width, double value, std::size_t channel,
                   std::size_t thickness) {
  g_render_calls.fetch_add(1, std::memory_order_relaxed);
  if (height == 0 || width == 0) throw ParameterError("render_mask: frame size must be positive");
  if (channel > 2) throw ParameterError("render_mask: channel must be 0, 1 or 2");
  if (thickness == 0) throw ParameterError("render_mask: thickness must be positive");
  Tensor mask(Shape{3, height, width});
  if (std::isnan(box.x1) || std::isnan(box.y1) || std::isnan(box.x2) || std::isnan(box.y2)) return mask;

  const BBox b = box.canonical();
  const long x1 = pixel_index(b.x1), x2 = pixel_index(b.x2);
  const long y1 = pixel_index(b.y1), y2 = pixel_index(b.y2);
  const long t = static_cast<long>(thickness);
  const long h = static_cast<long>(height), w = static_cast<long>(width);

  const long ry0 = std::max(y1, 0L), ry1 = std::min(y2, h - 1);
  const long rx0 = std::max(x1, 0L), rx1 = std::min(x2, w - 1);
  for (long y = ry0; y <= ry1; ++y) {
    const bool edge_row = y - y1 < t || y2 - y < t;
    for (long x = rx0; x <= rx1; ++x) {
      if (edge_row || x - x1 < t || x2 - x < t) {
        mask.at(channel, static_cast<std::size_t>(y), static_cast<std::size_t>(x)) = value;
      }
    }
  }
  return mask;
}

CellState blend_hidden(const CellState& h, const Tensor& mask, double beta) {
  if (!(beta >= 0.0 && beta <= 1.0)) {
    throw ParameterError("blend_hidden: beta must lie in [0, 1], got " + std::to_string(beta));
  }
  if (mask.shape() != h.value().shape()) {
    throw ShapeError("blend_hidden: mask shape " + shape_str(mask.shape()) + " differs from state " +
                     shape_str(h.value().shape()));
  }
  Graph& g = *h.h().graph();
  Tensor scaled = mask;
  for (double& v : scaled.data()) v *= 1.0 - beta;
  return CellState(add(scalar_mul(h.h(), beta), g.constant(std::move(scaled))));
}

// ---------------------------------------------------------------------------
// Sequences

Unrolled unroll(const BoundModel& model, std::span<const Var> frames, std::span<const BBox> teacher_boxes,
                const std::vector<bool>& teacher_flags, const StepObserver& observer) {
  if (frames.empty()) throw UsageError("unroll: empty frame sequence");
  const std::size_t steps = frames.size();
  if (!teacher_flags.empty() && teacher_flags.size() != steps) {
    throw UsageError("unroll: teacher_flags must have one entry per frame");
  }
  if (!teacher_boxes.empty() && teacher_boxes.size() != steps) {
    throw UsageError("unroll: teacher_boxes must have one entry per frame");
  }
  const bool any_flag = std::find(teacher_flags.begin(), teacher_flags.end(), true) != teacher_flags.end();
  if (any_flag && teacher_boxes.empty()) throw UsageError("unroll: teacher forcing requested without teacher boxes");

  const ModelConfig& cfg = model.config;
  const bool masked = cfg.kind == ModelKind::kMaskGru;
  Graph& g = *frames[0].graph();

  std::optional<CellState> state;
  if (masked && cfg.initial_state == InitialState::kFirstBoxMask) {
    if (teacher_boxes.empty()) throw UsageError("unroll: first-box initial state needs teacher boxes");
    CellState zero(g.constant(Tensor(Shape{3, cfg.height, cfg.width})));
    state = blend_hidden(zero, render_mask(teacher_boxes[0], cfg.height, cfg.width, cfg.mask_value), cfg.beta);
  } else {
    state = CellState(g.constant(Tensor(Shape{3, cfg.height, cfg.width})));
  }

  Unrolled out;
  out.boxes.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    CellState h = masked ? maskgru_step(model, *state, frames[t]) : convgru_step(model, *state, frames[t]);
    HeadOutput head = bbox_head(model, h);
    const BBox predicted = to_bbox(head.box.value());
    out.boxes.push_back(head.box);
    out.predictions.push_back(predicted);
    out.hidden.push_back(h.h());
    out.head_hidden2.push_back(head.hidden2);

    if (!masked) {
      if (observer) observer(StepRecord{t, h.value(), predicted, MaskSource::kNone, nullptr, nullptr,
                                        head.hidden2.value()});
      state = h;
      continue;
    }
    const bool forced = !teacher_flags.empty() && teacher_flags[t];
    const Tensor mask = render_mask(forced ? teacher_boxes[t] : predicted, cfg.height, cfg.width, cfg.mask_value);
    CellState blended = blend_hidden(h, mask, cfg.beta);
    if (observer) {
      observer(StepRecord{t, h.value(), predicted, forced ? MaskSource::kTeacher : MaskSource::kPrediction, &mask,
                          &blended.value(), head.hidden2.value()});
    }
    state = blended;
  }
  return out;
}

std::vector<BBox> run_sequence(const ModelParams& params, std::span<const Tensor> frames,
                               std::span<const BBox> teacher_boxes, const std::vector<bool>& teacher_flags,
                               const StepObserver& observer) {
  Graph graph(false);
  BoundModel model = bind_frozen(graph, params);
  std::vector<Var> vars;
  vars.reserve(frames.size());
  for (const Tensor& f : frames) vars.push_back(graph.constant(f));
  return unroll(model, vars, teacher_boxes, teacher_flags, observer).predictions;
}

}  // namespace maskgru
