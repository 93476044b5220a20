// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgru/cells.hpp"
#include "maskgru/synthdata.hpp"

namespace maskgru {

/// Continuous intersection over union of canonical boxes; 0 when the union
/// has zero area.
double iou(const BBox& a, const BBox& b);

struct EvalReport {
  std::string dataset_id;  // fingerprint of the evaluated sequences
  std::size_t frames = 0;
  std::vector<double> sequence_iou;  // mean over timesteps, per sequence
  double mean_iou = 0.0;             // mean of sequence_iou
  std::vector<double> thresholds{0.1, 0.25, 0.5};
  std::vector<double> rate_at;       // per threshold: mean over sequences of the hit fraction
  std::vector<double> timestep_iou;  // per timestep, mean over sequences long enough

  nlohmann::json to_json() const;
};

/// FNV-1a over dimensions, pixels and boxes, as 16 hex digits.
std::string dataset_fingerprint(std::span<const SequenceSample> dataset);

using Predictor = std::function<std::vector<BBox>(const SequenceSample&)>;

/// Scores predictor output against ground truth. Sequences are independent
/// and may run on `threads` workers; aggregation order is fixed.
EvalReport evaluate(const Predictor& predict, std::span<const SequenceSample> dataset, std::size_t threads = 1);

/// Inference run (no teacher forcing) of a frozen model. Throws UsageError
/// when the parameters do not belong to `kind` or the frame size differs.
EvalReport evaluate(ModelKind kind, const ModelParams& params, std::span<const SequenceSample> dataset,
                    std::size_t threads = 1);

/// Predictor wrapping run_sequence; frames are scaled by the model's input scale.
Predictor model_predictor(const ModelParams& params);

struct ModelReports {
  std::string name;
  EvalReport train;
  std::optional<EvalReport> val;
};

struct ReferenceRow {
  std::string name;
  double train_iou;
  double val_iou;
};

/// Average IoU values reported for the original volleyball footage. Shown
/// beside desk-scale results for context only; they are not comparable.
std::span<const ReferenceRow> reference_rows();

struct Comparison {
  std::vector<ModelReports> ranked;  // by training IoU, descending, stable
  std::string text;                  // fixed-width grid
  nlohmann::json records;            // one record per model per split
};

/// Requires at least two entries evaluated on the same sequences.
Comparison compare(std::vector<ModelReports> reports, bool with_reference = true);

}  // namespace maskgru
