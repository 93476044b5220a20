// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "maskgru/cells.hpp"

namespace maskgru {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Checkpoint {
  ModelParams params;
  /// Tensors that are not model parameters (optimizer moments, resume
  /// counters, best-so-far weights), in file order.
  NamedTensors extra;

  const Tensor* find_extra(const std::string& name) const;
};

/**
 * Binary layout, little-endian throughout:
 *   "MGRUCKPT", u32 version, u8 model kind,
 *   hyperparameters (u32 k, pool kernel, pool stride, d1, d2; f64 beta;
 *   u8 instance norm, activation, initial state; u32 H, W; f64 mask value,
 *   input scale),
 *   u32 tensor count, then per tensor: u32 name length, name bytes,
 *   u32 rank, u64 dims, f64 data.
 */
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params, const NamedTensors& extra = {});
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Loads and checks that the stored model kind matches `expected`.
Checkpoint load_checkpoint(const std::filesystem::path& path, ModelKind expected);

}  // namespace maskgru
