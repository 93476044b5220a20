// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgru/cells.hpp"
#include "maskgru/checkpoint.hpp"
#include "maskgru/gradcheck.hpp"
#include "maskgru/synthdata.hpp"

namespace maskgru {

enum class TeacherForcingMode : std::uint8_t { kPerSequence = 0, kPerTimestep = 1 };

struct EarlyStop {
  std::size_t patience = 5;  // 0 disables early stopping
  double min_delta = 1e-4;
};

/// Optimisation settings. The blend weight lives in ModelConfig::beta.
struct TrainConfig {
  double learning_rate = 1e-4;
  std::size_t batch_size = 8;
  std::size_t max_epochs = 100;
  double gamma = 0.01;
  std::size_t seq_len = 60;  // frames used per sequence; 0 uses every frame
  EarlyStop early_stop;
  std::uint64_t seed = 0;
  TeacherForcingMode tf_mode = TeacherForcingMode::kPerSequence;
  double clip_norm = 0.0;  // global gradient-norm clip; 0 disables
  double huber_delta = 1.0;
  std::size_t threads = 1;

  void validate() const;
};

nlohmann::json to_json(const TrainConfig& config);

/// Sum over the four coordinates of 0.5·d²/δ when |d| < δ, else |d| − δ/2.
Var smooth_l1(Var pred, const BBox& truth, double delta = 1.0);
double smooth_l1_value(const BBox& pred, const BBox& truth, double delta = 1.0);

/// ε = max(1 − γ·epoch, 0).
double tf_probability(std::size_t epoch, double gamma);

struct AdamState {
  std::vector<Tensor> m;
  std::vector<Tensor> v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update of every tensor in `params` from its grad
/// slot. Moments are allocated on the first call. Throws UsageError when a
/// parameter has no gradient or the parameter list changed shape.
void adam_step(const std::vector<NamedTensorRef>& params, AdamState& state, double lr);

/// Everything needed to continue a run exactly where it stopped.
struct TrainState {
  ModelParams params;
  ModelParams best_params;
  AdamState adam;
  std::size_t next_epoch = 0;
  double best_val_loss = 0.0;
  bool has_best = false;
  std::size_t epochs_since_best = 0;
  bool stopped = false;

  static TrainState fresh(const ModelConfig& model, std::uint64_t seed);
  /// Model parameters plus the optimizer and bookkeeping as named tensors.
  void save(const std::filesystem::path& path) const;
  static TrainState load(const std::filesystem::path& path);
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double eps = 0.0;
  double train_loss = 0.0;
  double train_iou = 0.0;  // predictions made during the training pass
  std::optional<double> val_loss;
  std::optional<double> val_iou;
  double teacher_fraction = 0.0;  // share of mask renders driven by ground truth
  std::map<std::string, double> grad_norm;  // per parameter tensor, mean over batches
  double grad_norm_total = 0.0;
  std::vector<double> hidden_grad_norm;  // ‖∂L/∂h_t‖ per timestep, mean over sequences
  double dead_relu_frac = 0.0;  // NN_2 outputs ≤ 0 over every unit, step and sequence
  double dead_unit_frac = 0.0;  // NN_2 units that stayed ≤ 0 for the whole epoch
  bool improved = false;

  nlohmann::json to_json() const;
};

/// Called after each epoch; return false to stop after this epoch.
using EpochCallback = std::function<bool(const EpochMetrics&, const TrainState&)>;

/// Observes the mask decisions of every training forward pass.
using TrainObserver = std::function<void(std::size_t epoch, std::size_t sequence, const StepRecord&)>;

/**
 * Runs epochs from state.next_epoch until max_epochs, early stopping or a
 * callback veto. Per epoch, one generator seeded from (seed, epoch) first
 * draws the teacher-forcing decisions (per sequence, or per timestep), then
 * shuffles the batch order. Sequence losses are summed over timesteps and
 * averaged over the batch. Per-sequence gradients may be computed in
 * parallel; they are reduced in batch order, so the result does not depend
 * on the thread count.
 *
 * Throws UsageError on an empty training set. An empty validation set
 * disables early stopping.
 */
std::vector<EpochMetrics> train(TrainState& state, const TrainConfig& config, std::span<const SequenceSample> train_set,
                                std::span<const SequenceSample> val_set, const EpochCallback& on_epoch = {},
                                const TrainObserver& observer = {});

struct SequenceLoss {
  double loss = 0.0;
  double mean_iou = 0.0;
};

/// Inference-mode loss and IoU of one sequence.
SequenceLoss sequence_loss(const ModelParams& params, const SequenceSample& sample, std::size_t seq_len,
                           double delta = 1.0);

struct ModelGradCheck {
  ModelKind kind = ModelKind::kMaskGru;
  std::size_t size = 8;
  std::size_t steps = 2;
  std::size_t kernel = 3;
  std::size_t hidden1 = 16;
  std::size_t hidden2 = 8;
  double beta = 0.5;
  bool teacher_forcing = true;
  double weight_scale = 4.0;  // multiplies the initial weights so gates stay out of their flat tails
  std::uint64_t seed = 0;
  double eps = 1e-5;
  double tol = 1e-4;
};

/// Finite-difference check of every parameter tensor of a small model on a
/// random [0, 1] sequence under the smooth-L1 objective. The mask value is 1
/// to match the frame range, and targets sit within 0.8 px of the model's own
/// predictions. Teacher forcing keeps the rendered masks fixed while
/// parameters are perturbed.
GradCheckReport check_model_gradients(const ModelGradCheck& setup);

}  // namespace maskgru
