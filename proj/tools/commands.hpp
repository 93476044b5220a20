// SPDX-License-Identifier: Apache-2.0
//
// Resolved options and entry points for each subcommand. Parsing lives in
// cli.cpp; everything here takes fully validated settings.
#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "maskgru/cells.hpp"
#include "maskgru/synthdata.hpp"
#include "maskgru/training.hpp"

namespace maskgru::cli {

struct Common {
  std::filesystem::path out;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  bool force = false;
};

struct GenDataOptions {
  Common common;
  SceneConfig scene;
  std::size_t count = 100;
  double train_frac = 0.7;
  SplitBy split_by = SplitBy::kSequence;
};

struct TrainOptions {
  Common common;
  std::filesystem::path data;
  ModelConfig model;
  TrainConfig train;
  bool resume = false;
};

struct EvalOptions {
  Common common;
  std::filesystem::path data;
  std::vector<std::pair<std::string, std::filesystem::path>> checkpoints;  // label, path
  std::optional<ModelKind> expected_kind;
  std::string split = "both";  // train | val | both
  bool reference = true;
};

struct RenderOptions {
  Common common;
  std::filesystem::path checkpoint;
  std::filesystem::path sequence;
  std::string format = "png";
  std::size_t scale = 4;
  std::size_t thickness = 1;
  bool hidden = false;
};

struct GradcheckOptions {
  Common common;
  std::vector<ModelKind> kinds;
  ModelGradCheck setup;
};

struct PlotOptions {
  Common common;
  std::vector<std::pair<std::string, std::filesystem::path>> metrics;  // label, path
  std::vector<std::string> fields;
  std::string format = "png";
  std::size_t width = 640;
  std::size_t height = 400;
  std::optional<std::size_t> epoch;  // for per-timestep fields; default is the last record
};

int cmd_gen_data(const GenDataOptions& opt, std::ostream& out);
int cmd_train(const TrainOptions& opt, std::ostream& out);
int cmd_eval(const EvalOptions& opt, std::ostream& out);
int cmd_render(const RenderOptions& opt, std::ostream& out);
int cmd_gradcheck(const GradcheckOptions& opt, std::ostream& out);
int cmd_plot(const PlotOptions& opt, std::ostream& out);

/// "png" when the build has a PNG encoder, otherwise "ppm".
std::string default_image_format();

/// Relative output paths land under $MASKGRU_OUTPUT_ROOT when it is set.
std::filesystem::path output_path(const std::filesystem::path& p);

/// Input paths as given; a relative path missing from the working directory
/// is looked up under $MASKGRU_OUTPUT_ROOT as well.
std::filesystem::path input_path(const std::filesystem::path& p);

}  // namespace maskgru::cli
