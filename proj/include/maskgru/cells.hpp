// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "maskgru/autograd.hpp"
#include "maskgru/gradcheck.hpp"

namespace maskgru {

enum class ModelKind : std::uint8_t { kConvGru = 0, kMaskGru = 1 };
enum class HeadActivation : std::uint8_t { kRelu = 0, kPrelu = 1 };
enum class InitialState : std::uint8_t { kZeros = 0, kFirstBoxMask = 1 };

const char* model_kind_name(ModelKind kind);
ModelKind parse_model_kind(const std::string& name);

/// Axis-aligned box in input-frame pixel coordinates, corner format.
struct BBox {
  double x1 = 0.0;
  double y1 = 0.0;
  double x2 = 0.0;
  double y2 = 0.0;

  BBox canonical() const;
  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const;

  friend bool operator==(const BBox&, const BBox&) = default;
};

struct ModelConfig {
  ModelKind kind = ModelKind::kMaskGru;
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t kernel = 3;
  std::size_t pool_kernel = 4;
  std::size_t pool_stride = 4;
  std::size_t hidden1 = 128;
  std::size_t hidden2 = 64;
  double beta = 0.5;
  // Only meaningful for maskGRU; the convGRU cell never normalises.
  bool instance_norm = true;
  HeadActivation activation = HeadActivation::kRelu;
  InitialState initial_state = InitialState::kZeros;
  double mask_value = 255.0;
  // Multiplier applied to 8-bit frame samples when they are loaded.
  double input_scale = 1.0;

  static ModelConfig for_kind(ModelKind kind, std::size_t height, std::size_t width);

  void validate() const;
  bool uses_instance_norm() const { return kind == ModelKind::kMaskGru && instance_norm; }
  std::size_t pooled_height() const;
  std::size_t pooled_width() const;
  std::size_t flatten_size() const { return pooled_height() * pooled_width(); }
};

struct GateParams {
  Tensor weight;  // [3, 6, k, k]
  Tensor bias;    // [3]
};

struct NormParams {
  Tensor scale;  // [3]
  Tensor shift;  // [3]
};

struct HeadParams {
  Tensor pool_weight;  // [1, 3, k, k]
  Tensor pool_bias;    // [1]
  Tensor fc1_weight;   // [d1, flatten]
  Tensor fc1_bias;
  Tensor fc2_weight;  // [d2, d1]
  Tensor fc2_bias;
  Tensor out_weight;  // [4, d2]
  Tensor out_bias;    // [4]
  Tensor slope1;      // PReLU only
  Tensor slope2;
};

/// Every learnable tensor of one model variant, plus its configuration.
struct ModelParams {
  ModelConfig config;
  GateParams reset;
  GateParams update;
  GateParams candidate;
  NormParams reset_norm;
  NormParams update_norm;
  NormParams candidate_norm;
  HeadParams head;

  /// All-zero parameters (IN scales and PReLU slopes included).
  static ModelParams zeros(const ModelConfig& config);
  static ModelParams initialize(const ModelConfig& config, std::uint64_t seed);

  /// Learnable tensors in a fixed order. Tensors the configuration does not
  /// use (norms without IN, slopes without PReLU) are omitted.
  std::vector<NamedTensorRef> named();
  std::vector<std::pair<std::string, const Tensor*>> named() const;
  std::size_t parameter_count() const;
  void zero_grad();
};

/// Hidden state carried between steps: always [3, H, W].
class CellState {
 public:
  explicit CellState(Var h);
  Var h() const { return h_; }
  const Tensor& value() const { return h_.value(); }

 private:
  Var h_;
};

struct GateVars {
  Var weight;
  Var bias;
};

struct NormVars {
  Var scale;
  Var shift;
};

struct HeadVars {
  Var pool_weight, pool_bias;
  Var fc1_weight, fc1_bias;
  Var fc2_weight, fc2_bias;
  Var out_weight, out_bias;
  Var slope1, slope2;
};

/// Parameters placed on a graph.
struct BoundModel {
  ModelConfig config;
  GateVars reset, update, candidate;
  std::optional<NormVars> reset_norm, update_norm, candidate_norm;
  HeadVars head;
};

/// Trainable binding: gradients flow back into `params`.
BoundModel bind(Graph& graph, ModelParams& params);
/// Inference binding: parameters enter the graph as constants.
BoundModel bind_frozen(Graph& graph, const ModelParams& params);

/// r = σ(W_r*[h,x]+b_r), z = σ(W_z*[h,x]+b_z),
/// ĥ = tanh(W_ĥ*[h⊙r,x]+b_ĥ), h' = h⊙(1-z) + z⊙ĥ.
CellState convgru_step(const BoundModel& model, const CellState& prev, Var frame);

/// The same recurrence with each gate activation passed through instance
/// normalisation (identity when the model was bound without IN). `prev` is
/// the blended state from the previous step.
CellState maskgru_step(const BoundModel& model, const CellState& prev, Var frame);

struct HeadOutput {
  Var box;      // [4] canonical (x1, y1, x2, y2)
  Var hidden1;  // NN_1 activations
  Var hidden2;  // NN_2 activations
};

/// maxpool -> k×k conv to one channel -> flatten -> two activated FC layers
/// -> linear to 4 coordinates, sorted so x1<=x2 and y1<=y2.
HeadOutput bbox_head(const BoundModel& model, const CellState& h);

BBox to_bbox(const Tensor& box);

/**
 * Zero tensor [3, H, W] with the outline of `box` drawn in one channel.
 *
 * Coordinates are rounded to the nearest pixel index and the outline spans
 * the inclusive range [round(x1), round(x2)] × [round(y1), round(y2)].
 * Pixels outside the frame are dropped, so a partially visible box shows
 * only its visible edges. `thickness` grows the outline inwards.
 */
Tensor render_mask(const BBox& box, std::size_t height, std::size_t width, double value = 255.0,
                   std::size_t channel = 0, std::size_t thickness = 1);

/// Number of render_mask calls made by this process (instrumentation).
std::uint64_t render_mask_calls();

/// β·h + (1-β)·mask. The mask enters as a constant: no gradient flows to it.
CellState blend_hidden(const CellState& h, const Tensor& mask, double beta);

enum class MaskSource { kNone, kTeacher, kPrediction };

/// Per-step view handed to a StepObserver.
struct StepRecord {
  std::size_t t;
  const Tensor& hidden;               // h_t
  BBox box;                           // prediction at t
  MaskSource mask_source;             // kNone for convGRU
  const Tensor* mask;                 // nullptr for convGRU
  const Tensor* blended;              // state carried to t+1; nullptr for convGRU
  const Tensor& head_hidden2;         // NN_2 activations
};

using StepObserver = std::function<void(const StepRecord&)>;

struct Unrolled {
  std::vector<Var> boxes;
  std::vector<BBox> predictions;
  std::vector<Var> hidden;        // h_t per step
  std::vector<Var> head_hidden2;  // NN_2 output per step
};

/**
 * Runs the model over a frame sequence on an existing graph.
 *
 * Per step: cell -> head -> (maskGRU) mask from the teacher box when the
 * step's flag is set, otherwise from the prediction -> blend -> carry.
 * `teacher_boxes` may be empty when no flag is set and the initial state
 * does not need the first box. Empty `teacher_flags` means all false.
 */
Unrolled unroll(const BoundModel& model, std::span<const Var> frames, std::span<const BBox> teacher_boxes,
                const std::vector<bool>& teacher_flags, const StepObserver& observer = {});

/// Inference convenience: builds its own graph and returns the predictions.
std::vector<BBox> run_sequence(const ModelParams& params, std::span<const Tensor> frames,
                               std::span<const BBox> teacher_boxes = {}, const std::vector<bool>& teacher_flags = {},
                               const StepObserver& observer = {});

}  // namespace maskgru
