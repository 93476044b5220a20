// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "maskgru/cells.hpp"
#include "maskgru/tensor.hpp"

namespace maskgru {

struct Range {
  double lo = 0.0;
  double hi = 0.0;
};

enum class BackgroundKind : std::uint8_t { kFlat = 0, kGradient = 1, kTextured = 2 };

const char* background_name(BackgroundKind kind);
BackgroundKind parse_background(const std::string& name);

/// A small bright ball moving ballistically among larger drifting ellipses.
struct SceneConfig {
  std::size_t height = 64;
  std::size_t width = 64;
  std::size_t seq_len = 60;
  double ball_radius = 3.0;
  Range ball_speed{1.0, 3.0};   // px per frame; the upper end also caps speed
  double gravity = 0.15;        // px per frame², downwards
  double hit_prob = 0.03;       // chance per frame of an impulse that redirects the ball
  std::size_t num_distractors = 4;
  Range distractor_size{6.0, 12.0};  // ellipse semi-axis range, px
  double distractor_speed = 1.5;
  std::size_t motion_blur_len = 0;   // sub-frame samples; 0 or 1 disables blur
  double occlusion_prob = 0.3;       // chance a distractor is drawn over the ball
  BackgroundKind background = BackgroundKind::kTextured;
  std::size_t sequences_per_scene = 1;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SequenceMeta {
  std::size_t index = 0;
  std::uint64_t seed = 0;        // per-sequence stream
  std::uint64_t scene_seed = 0;  // shared by sequences of one scene
  std::vector<double> center_x;  // ball trajectory, one entry per frame
  std::vector<double> center_y;
  std::vector<bool> occluded;    // ball fully covered by a distractor
};

/**
 * T frames of planar 8-bit RGB plus one ground-truth box per frame.
 *
 * Frames stay 8-bit in memory; frame() promotes to doubles scaled by
 * `scale` (1.0 keeps the raw [0, 255] range).
 */
struct SequenceSample {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> pixels;  // T × 3 × H × W
  std::vector<BBox> boxes;
  SequenceMeta meta;

  std::size_t length() const { return boxes.size(); }
  std::span<const std::uint8_t> frame_bytes(std::size_t t) const;
  Tensor frame(std::size_t t, double scale = 1.0) const;
  std::vector<Tensor> frames(double scale = 1.0, std::size_t limit = 0) const;

  friend bool operator==(const SequenceSample& a, const SequenceSample& b) {
    return a.height == b.height && a.width == b.width && a.pixels == b.pixels && a.boxes == b.boxes;
  }
};

/// Deterministic in (config, count): sequence i uses child seed (seed, i).
std::vector<SequenceSample> generate(const SceneConfig& config, std::size_t count, std::size_t threads = 1);
SequenceSample generate_one(const SceneConfig& config, std::size_t index);

enum class SplitBy { kSequence, kSceneSeed };

struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> val;
};

/// Seeded shuffle, then round(train_frac · units) units go to train. In
/// scene-seed mode the units are scenes, so no scene straddles the split.
Split split(std::span<const SequenceSample> dataset, double train_frac, SplitBy by, std::uint64_t seed);

std::vector<SequenceSample> select(std::span<const SequenceSample> dataset, std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// On-disk format

/// Header "MGRUSEQ\0", u32 version, H, W, T; T planar RGB frames; T×4 f64 boxes.
void write_sequence(const std::filesystem::path& path, const SequenceSample& sample);
SequenceSample read_sequence(const std::filesystem::path& path);

struct DatasetInfo {
  SceneConfig config;
  std::vector<std::string> files;
  std::vector<SequenceMeta> meta;  // index and seeds per file; no trajectory
  std::vector<std::string> train_files;
  std::vector<std::string> val_files;
};

std::string sequence_file_name(std::size_t index);

/// One file per sequence plus manifest.json. With a split, the manifest
/// records which files belong to each side.
void write_dataset(const std::filesystem::path& dir, const SceneConfig& config,
                   std::span<const SequenceSample> samples, const Split* split = nullptr);
DatasetInfo read_dataset_info(const std::filesystem::path& dir);

/// Loads the sequences of one side ("train", "val") or all of them ("all").
std::vector<SequenceSample> load_dataset(const std::filesystem::path& dir, const std::string& which = "all");

}  // namespace maskgru
