// SPDX-License-Identifier: Apache-2.0
#include "maskgru/training.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>
#include <random>

#include "maskgru/eval.hpp"
#include "maskgru/parallel.hpp"

namespace maskgru {

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ParameterError("learning rate must be positive");
  if (batch_size == 0) throw ParameterError("batch size must be positive");
  if (max_epochs == 0) throw ParameterError("max_epochs must be positive");
  if (!(gamma >= 0.0)) throw ParameterError("gamma must be non-negative");
  if (!(early_stop.min_delta >= 0.0)) throw ParameterError("early-stop min_delta must be non-negative");
  if (!(clip_norm >= 0.0)) throw ParameterError("clip norm must be non-negative");
  if (!(huber_delta > 0.0)) throw ParameterError("smooth-L1 delta must be positive");
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size},
          {"max_epochs", c.max_epochs},
          {"gamma", c.gamma},
          {"seq_len", c.seq_len},
          {"early_stop", {{"patience", c.early_stop.patience}, {"min_delta", c.early_stop.min_delta}}},
          {"seed", c.seed},
          {"tf_mode", c.tf_mode == TeacherForcingMode::kPerTimestep ? "per-timestep" : "per-sequence"},
          {"clip_norm", c.clip_norm},
          {"huber_delta", c.huber_delta},
          {"threads", c.threads}};
}

// ---------------------------------------------------------------------------
// Objective, schedule, optimizer

Var smooth_l1(Var pred, const BBox& truth, double delta) {
  if (pred.shape() != Shape{4}) throw ShapeError("smooth_l1: prediction must have shape [4]");
  if (!(delta > 0.0)) throw ParameterError("smooth_l1: delta must be positive");
  const double target[4] = {truth.x1, truth.y1, truth.x2, truth.y2};
  const auto p = pred.value().data();
  std::array<double, 4> slope{};
  double total = 0.0;
  for (int i = 0; i < 4; ++i) {
    const double d = p[i] - target[i];
    if (std::abs(d) < delta) {
      total += 0.5 * d * d / delta;
      slope[i] = d / delta;
    } else {
      total += std::abs(d) - 0.5 * delta;
      slope[i] = d > 0.0 ? 1.0 : -1.0;
    }
  }
  return pred.graph()->record(OpKind::kCustom, {pred}, Tensor::scalar(total), [slope](BackwardContext& ctx) {
    const double g = ctx.out_grad()[0];
    auto dx = ctx.input_grad(0);
    for (int i = 0; i < 4; ++i) dx[i] += g * slope[i];
  });
}

double smooth_l1_value(const BBox& pred, const BBox& truth, double delta) {
  const double d[4] = {pred.x1 - truth.x1, pred.y1 - truth.y1, pred.x2 - truth.x2, pred.y2 - truth.y2};
  double total = 0.0;
  for (double v : d) total += std::abs(v) < delta ? 0.5 * v * v / delta : std::abs(v) - 0.5 * delta;
  return total;
}

double tf_probability(std::size_t epoch, double gamma) {
  return std::max(1.0 - gamma * static_cast<double>(epoch), 0.0);
}

void adam_step(const std::vector<NamedTensorRef>& params, AdamState& s, double lr) {
  if (s.m.empty()) {
    for (const auto& p : params) {
      s.m.emplace_back(p.tensor->shape());
      s.v.emplace_back(p.tensor->shape());
    }
  }
  if (s.m.size() != params.size()) throw UsageError("adam_step: parameter list changed between steps");
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].tensor->has_grad()) throw UsageError("adam_step: no gradient for '" + params[k].name + "'");
    if (s.m[k].shape() != params[k].tensor->shape()) {
      throw UsageError("adam_step: moment shape mismatch for '" + params[k].name + "'");
    }
  }
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto w = params[k].tensor->data();
    auto g = params[k].tensor->grad();
    auto m = s.m[k].data();
    auto v = s.v[k].data();
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * g[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * g[i] * g[i];
      w[i] -= lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + s.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Resumable state

TrainState TrainState::fresh(const ModelConfig& model, std::uint64_t seed) {
  TrainState s;
  s.params = ModelParams::initialize(model, derive_seed(seed, 0, 3));
  s.best_params = s.params;
  return s;
}

void TrainState::save(const std::filesystem::path& path) const {
  NamedTensors extra;
  const auto named = params.named();
  if (!adam.m.empty()) {
    for (std::size_t k = 0; k < named.size(); ++k) {
      extra.emplace_back("adam.m." + named[k].first, adam.m[k]);
      extra.emplace_back("adam.v." + named[k].first, adam.v[k]);
    }
  }
  for (const auto& [name, t] : best_params.named()) extra.emplace_back("best." + name, *t);
  auto scalar = [&extra](const char* name, double v) { extra.emplace_back(name, Tensor::scalar(v)); };
  scalar("train.next_epoch", static_cast<double>(next_epoch));
  scalar("train.adam_step", static_cast<double>(adam.step));
  scalar("train.best_val_loss", best_val_loss);
  scalar("train.has_best", has_best ? 1.0 : 0.0);
  scalar("train.epochs_since_best", static_cast<double>(epochs_since_best));
  scalar("train.stopped", stopped ? 1.0 : 0.0);
  save_checkpoint(path, params, extra);
}

TrainState TrainState::load(const std::filesystem::path& path) {
  Checkpoint ck = load_checkpoint(path);
  TrainState s;
  s.params = ck.params;
  s.best_params = ck.params;
  auto scalar = [&](const char* name) {
    const Tensor* t = ck.find_extra(name);
    if (!t || t->numel() != 1) throw DataError(path.string() + ": not a resumable checkpoint (missing " + name + ")");
    return t->item();
  };
  s.next_epoch = static_cast<std::size_t>(scalar("train.next_epoch"));
  s.adam.step = static_cast<std::uint64_t>(scalar("train.adam_step"));
  s.best_val_loss = scalar("train.best_val_loss");
  s.has_best = scalar("train.has_best") != 0.0;
  s.epochs_since_best = static_cast<std::size_t>(scalar("train.epochs_since_best"));
  s.stopped = scalar("train.stopped") != 0.0;
  auto named = s.params.named();
  auto best = s.best_params.named();
  for (std::size_t k = 0; k < named.size(); ++k) {
    const Tensor* m = ck.find_extra("adam.m." + named[k].name);
    const Tensor* v = ck.find_extra("adam.v." + named[k].name);
    if (m && v) {
      s.adam.m.push_back(*m);
      s.adam.v.push_back(*v);
    }
    if (const Tensor* b = ck.find_extra("best." + named[k].name)) *best[k].tensor = *b;
  }
  if (!s.adam.m.empty() && s.adam.m.size() != named.size()) throw DataError(path.string() + ": partial optimizer state");
  if (s.adam.m.empty() && s.adam.step != 0) throw DataError(path.string() + ": optimizer moments missing");
  return s;
}

// ---------------------------------------------------------------------------
// Metrics

nlohmann::json EpochMetrics::to_json() const {
  nlohmann::json j = {{"epoch", epoch},
                      {"eps", eps},
                      {"train_loss", train_loss},
                      {"train_iou", train_iou},
                      {"val_loss", val_loss ? nlohmann::json(*val_loss) : nlohmann::json(nullptr)},
                      {"val_iou", val_iou ? nlohmann::json(*val_iou) : nlohmann::json(nullptr)},
                      {"teacher_fraction", teacher_fraction},
                      {"grad_norm_total", grad_norm_total},
                      {"dead_relu_frac", dead_relu_frac},
                      {"dead_unit_frac", dead_unit_frac},
                      {"improved", improved}};
  for (const auto& [name, v] : grad_norm) j["grad_norm_" + name] = v;
  j["hidden_grad_norm"] = hidden_grad_norm;
  return j;
}

// ---------------------------------------------------------------------------
// Training loop

namespace {

std::size_t frames_used(const SequenceSample& s, std::size_t seq_len) {
  return seq_len == 0 ? s.length() : seq_len;
}

void check_dataset(std::span<const SequenceSample> data, const ModelConfig& model, std::size_t seq_len,
                   const char* what) {
  for (const SequenceSample& s : data) {
    if (s.height != model.height || s.width != model.width) {
      throw UsageError(std::string(what) + " frames are " + std::to_string(s.height) + "x" + std::to_string(s.width) +
                       " but the model expects " + std::to_string(model.height) + "x" + std::to_string(model.width));
    }
    if (s.length() == 0 || (seq_len > 0 && s.length() < seq_len)) {
      throw UsageError(std::string(what) + " sequence shorter than seq_len " + std::to_string(seq_len));
    }
  }
}

struct SequenceResult {
  double loss = 0.0;
  double iou_sum = 0.0;
  std::size_t steps = 0;
  std::vector<std::vector<double>> grads;  // per parameter tensor
  std::vector<double> hidden_grad_norm;
  std::vector<std::uint8_t> unit_alive;  // NN_2 units active at least once
  std::size_t dead = 0;
  std::size_t activations = 0;
};

double l2(std::span<const double> v) {
  double acc = 0.0;
  for (double x : v) acc += x * x;
  return std::sqrt(acc);
}

SequenceResult run_training_sequence(const ModelParams& base, const SequenceSample& sample, std::size_t steps,
                                     const std::vector<bool>& flags, double delta, const StepObserver& observer) {
  ModelParams p = base;
  p.zero_grad();
  Graph graph;
  BoundModel model = bind(graph, p);
  std::vector<Var> frames;
  frames.reserve(steps);
  for (std::size_t t = 0; t < steps; ++t) frames.push_back(graph.constant(sample.frame(t, p.config.input_scale)));
  const std::span<const BBox> truth(sample.boxes.data(), steps);
  Unrolled u = unroll(model, frames, truth, flags, observer);

  Var loss = smooth_l1(u.boxes[0], truth[0], delta);
  for (std::size_t t = 1; t < steps; ++t) loss = add(loss, smooth_l1(u.boxes[t], truth[t], delta));
  graph.backward(loss);

  SequenceResult r;
  r.loss = loss.value().item();
  r.steps = steps;
  for (std::size_t t = 0; t < steps; ++t) {
    r.iou_sum += iou(u.predictions[t], truth[t]);
    r.hidden_grad_norm.push_back(l2(graph.grad(u.hidden[t])));
    const auto act = u.head_hidden2[t].value().data();
    if (r.unit_alive.empty()) r.unit_alive.assign(act.size(), 0);
    for (std::size_t i = 0; i < act.size(); ++i) {
      const bool off = act[i] <= 0.0;
      r.dead += off;
      r.unit_alive[i] |= !off;
    }
    r.activations += act.size();
  }
  for (const auto& ref : p.named()) {
    auto g = ref.tensor->has_grad() ? ref.tensor->grad() : std::span<const double>();
    std::vector<double> copy(ref.tensor->numel(), 0.0);
    std::copy(g.begin(), g.end(), copy.begin());
    r.grads.push_back(std::move(copy));
  }
  return r;
}

}  // namespace

SequenceLoss sequence_loss(const ModelParams& params, const SequenceSample& sample, std::size_t seq_len,
                           double delta) {
  const std::size_t steps = frames_used(sample, seq_len);
  const std::vector<Tensor> frames = sample.frames(params.config.input_scale, steps);
  const std::span<const BBox> truth(sample.boxes.data(), steps);
  // The first-box initial state needs the first ground-truth box even at inference.
  const std::vector<BBox> pred = run_sequence(params, frames, truth, {});
  SequenceLoss out;
  for (std::size_t t = 0; t < steps; ++t) {
    out.loss += smooth_l1_value(pred[t], truth[t], delta);
    out.mean_iou += iou(pred[t], truth[t]);
  }
  out.mean_iou /= static_cast<double>(steps);
  return out;
}

std::vector<EpochMetrics> train(TrainState& state, const TrainConfig& cfg, std::span<const SequenceSample> train_set,
                                std::span<const SequenceSample> val_set, const EpochCallback& on_epoch,
                                const TrainObserver& observer) {
  cfg.validate();
  state.params.config.validate();
  if (train_set.empty()) throw UsageError("train: empty training set");
  check_dataset(train_set, state.params.config, cfg.seq_len, "training");
  check_dataset(val_set, state.params.config, cfg.seq_len, "validation");
  const std::size_t threads = observer ? 1 : std::max<std::size_t>(cfg.threads, 1);
  const bool early_stopping = !val_set.empty() && cfg.early_stop.patience > 0;

  std::vector<EpochMetrics> history;
  while (state.next_epoch < cfg.max_epochs && !state.stopped) {
    const std::size_t epoch = state.next_epoch;
    std::mt19937_64 rng(derive_seed(cfg.seed, epoch, 7));
    std::uniform_real_distribution<double> coin(0.0, 1.0);

    EpochMetrics mt;
    mt.epoch = epoch;
    mt.eps = tf_probability(epoch, cfg.gamma);

    // Draw order: teacher-forcing decisions for every sequence, then the shuffle.
    std::vector<std::vector<bool>> flags(train_set.size());
    std::size_t forced = 0, total_steps = 0;
    for (std::size_t i = 0; i < train_set.size(); ++i) {
      const std::size_t steps = frames_used(train_set[i], cfg.seq_len);
      if (cfg.tf_mode == TeacherForcingMode::kPerSequence) {
        flags[i].assign(steps, coin(rng) < mt.eps);
      } else {
        flags[i].resize(steps);
        for (std::size_t t = 0; t < steps; ++t) flags[i][t] = coin(rng) < mt.eps;
      }
      forced += static_cast<std::size_t>(std::count(flags[i].begin(), flags[i].end(), true));
      total_steps += steps;
    }
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    mt.teacher_fraction = static_cast<double>(forced) / static_cast<double>(total_steps);

    auto named = state.params.named();
    std::vector<double> norm_sum(named.size(), 0.0);
    std::vector<double> hidden_sum;
    std::vector<std::uint8_t> alive;
    double loss_sum = 0.0, iou_sum = 0.0;
    std::size_t iou_count = 0, dead = 0, activations = 0, batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<SequenceResult> results(n);
      parallel_for(n, threads, [&](std::size_t j) {
        const std::size_t idx = order[start + j];
        StepObserver step_observer;
        if (observer) step_observer = [&, idx](const StepRecord& r) { observer(epoch, idx, r); };
        results[j] = run_training_sequence(state.params, train_set[idx], frames_used(train_set[idx], cfg.seq_len),
                                           flags[idx], cfg.huber_delta, step_observer);
      });

      // Fixed-order reduction into the shared gradient slots.
      const double inv_n = 1.0 / static_cast<double>(n);
      for (std::size_t k = 0; k < named.size(); ++k) {
        auto g = named[k].tensor->mutable_grad();
        std::fill(g.begin(), g.end(), 0.0);
        for (const SequenceResult& r : results)
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += r.grads[k][i];
        for (double& v : g) v *= inv_n;
      }
      double global = 0.0;
      for (std::size_t k = 0; k < named.size(); ++k) {
        const double nk = l2(named[k].tensor->grad());
        norm_sum[k] += nk;
        global += nk * nk;
      }
      global = std::sqrt(global);
      mt.grad_norm_total += global;
      if (cfg.clip_norm > 0.0 && global > cfg.clip_norm) {
        const double s = cfg.clip_norm / global;
        for (auto& ref : named)
          for (double& v : ref.tensor->mutable_grad()) v *= s;
      }
      adam_step(named, state.adam, cfg.learning_rate);
      ++batches;

      for (const SequenceResult& r : results) {
        loss_sum += r.loss;
        iou_sum += r.iou_sum;
        iou_count += r.steps;
        dead += r.dead;
        activations += r.activations;
        if (hidden_sum.size() < r.hidden_grad_norm.size()) hidden_sum.resize(r.hidden_grad_norm.size(), 0.0);
        for (std::size_t t = 0; t < r.hidden_grad_norm.size(); ++t) hidden_sum[t] += r.hidden_grad_norm[t];
        if (alive.empty()) alive.assign(r.unit_alive.size(), 0);
        for (std::size_t i = 0; i < alive.size(); ++i) alive[i] |= r.unit_alive[i];
      }
    }
    for (auto& ref : named) ref.tensor->clear_grad();

    const double n_train = static_cast<double>(train_set.size());
    mt.train_loss = loss_sum / n_train;
    mt.train_iou = iou_sum / static_cast<double>(iou_count);
    for (std::size_t k = 0; k < named.size(); ++k) mt.grad_norm[named[k].name] = norm_sum[k] / static_cast<double>(batches);
    mt.grad_norm_total /= static_cast<double>(batches);
    for (double v : hidden_sum) mt.hidden_grad_norm.push_back(v / n_train);
    mt.dead_relu_frac = static_cast<double>(dead) / static_cast<double>(activations);
    mt.dead_unit_frac = static_cast<double>(std::count(alive.begin(), alive.end(), 0)) / static_cast<double>(alive.size());

    if (!val_set.empty()) {
      std::vector<SequenceLoss> vals(val_set.size());
      parallel_for(val_set.size(), threads, [&](std::size_t i) {
        vals[i] = sequence_loss(state.params, val_set[i], cfg.seq_len, cfg.huber_delta);
      });
      double vl = 0.0, vi = 0.0;
      for (const SequenceLoss& v : vals) {
        vl += v.loss;
        vi += v.mean_iou;
      }
      mt.val_loss = vl / static_cast<double>(vals.size());
      mt.val_iou = vi / static_cast<double>(vals.size());
      mt.improved = !state.has_best || *mt.val_loss < state.best_val_loss - cfg.early_stop.min_delta;
      if (mt.improved) {
        state.best_val_loss = *mt.val_loss;
        state.has_best = true;
        state.best_params = state.params;
        state.epochs_since_best = 0;
      } else {
        ++state.epochs_since_best;
      }
      if (early_stopping && state.epochs_since_best >= cfg.early_stop.patience) state.stopped = true;
    } else {
      state.best_params = state.params;
    }

    state.next_epoch = epoch + 1;
    history.push_back(mt);
    if (on_epoch && !on_epoch(mt, state)) break;
  }
  return history;
}

// ---------------------------------------------------------------------------
// Gradient check on a small model

GradCheckReport check_model_gradients(const ModelGradCheck& setup) {
  ModelConfig cfg = ModelConfig::for_kind(setup.kind, setup.size, setup.size);
  cfg.kernel = setup.kernel;
  cfg.hidden1 = setup.hidden1;
  cfg.hidden2 = setup.hidden2;
  cfg.pool_kernel = std::min<std::size_t>(cfg.pool_kernel, setup.size);
  cfg.pool_stride = std::min<std::size_t>(cfg.pool_stride, setup.size);
  cfg.mask_value = 1.0;
  if (setup.kind == ModelKind::kMaskGru) cfg.beta = setup.beta;
  if (setup.steps == 0) throw ParameterError("gradient check needs at least one step");
  if (!(setup.weight_scale > 0.0)) throw ParameterError("gradient check weight scale must be positive");

  std::mt19937_64 rng(derive_seed(setup.seed, 1, 5));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::uniform_real_distribution<double> bias(-0.5, 0.5);
  std::uniform_real_distribution<double> jitter(-0.8, 0.8);
  std::uniform_real_distribution<double> corner(0.0, static_cast<double>(setup.size) - 1.0);

  ModelParams params = ModelParams::initialize(cfg, setup.seed);
  for (const auto& ref : params.named()) {
    if (ref.name.ends_with(".weight")) {
      for (double& v : ref.tensor->data()) v *= setup.weight_scale;
    } else if (ref.name.ends_with(".bias")) {
      for (double& v : ref.tensor->data()) v = bias(rng);
    }
  }
  const double c = 0.5 * static_cast<double>(setup.size), half = static_cast<double>(setup.size) / 8.0;
  params.head.out_bias = Tensor(Shape{4}, std::vector<double>{c - half, c - half, c + half, c + half});

  std::vector<Tensor> frames;
  std::vector<BBox> truth;
  for (std::size_t t = 0; t < setup.steps; ++t) {
    Tensor f(Shape{3, setup.size, setup.size});
    for (double& v : f.data()) v = unit(rng);
    frames.push_back(std::move(f));
    truth.push_back(BBox{corner(rng), corner(rng), corner(rng), corner(rng)}.canonical());
  }
  const std::vector<bool> flags(setup.steps, setup.teacher_forcing);
  const auto predicted = run_sequence(params, frames, truth, flags);
  for (std::size_t t = 0; t < setup.steps; ++t) {
    const BBox& p = predicted[t];
    truth[t] = BBox{p.x1 + jitter(rng), p.y1 + jitter(rng), p.x2 + jitter(rng), p.y2 + jitter(rng)};
  }

  auto loss = [&](Graph& g) {
    BoundModel m = bind(g, params);
    std::vector<Var> xs;
    for (const Tensor& f : frames) xs.push_back(g.constant(f));
    Unrolled u = unroll(m, xs, truth, flags);
    Var total = smooth_l1(u.boxes[0], truth[0]);
    for (std::size_t t = 1; t < u.boxes.size(); ++t) total = add(total, smooth_l1(u.boxes[t], truth[t]));
    return total;
  };
  return grad_check(loss, params.named(), setup.eps, setup.tol);
}

}  // namespace maskgru
