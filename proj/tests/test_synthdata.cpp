// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include <unistd.h>

#include "maskgru/synthdata.hpp"

namespace maskgru {
namespace {

namespace fs = std::filesystem;

SceneConfig small_scene(std::uint64_t seed = 1) {
  SceneConfig c;
  c.seq_len = 20;
  c.seed = seed;
  return c;
}

fs::path scratch_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("maskgru_test_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

// Exhaustive matched filter: the integer-grid center whose disc collects the
// most intensity (summed over channels).
std::pair<double, double> brightest_disc(const SequenceSample& s, std::size_t t, double r) {
  const auto bytes = s.frame_bytes(t);
  const long h = static_cast<long>(s.height), w = static_cast<long>(s.width), reach = static_cast<long>(std::ceil(r));
  double best = -1.0;
  std::pair<double, double> at{0, 0};
  for (long cy = 0; cy < h; ++cy)
    for (long cx = 0; cx < w; ++cx) {
      double acc = 0.0;
      for (long y = cy - reach; y <= cy + reach; ++y)
        for (long x = cx - reach; x <= cx + reach; ++x) {
          if (y < 0 || y >= h || x < 0 || x >= w) continue;
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) > r * r) continue;
          for (long c = 0; c < 3; ++c) acc += bytes[static_cast<std::size_t>((c * h + y) * w + x)];
        }
      if (acc > best) {
        best = acc;
        at = {static_cast<double>(cx), static_cast<double>(cy)};
      }
    }
  return at;
}

TEST(SceneConfig, Validation) {
  SceneConfig c;
  EXPECT_NO_THROW(c.validate());
  c.ball_radius = 8.0;  // min(64,64)/8
  EXPECT_THROW(c.validate(), ParameterError);
  c = SceneConfig{};
  c.occlusion_prob = 1.5;
  EXPECT_THROW(c.validate(), ParameterError);
  c = SceneConfig{};
  c.ball_speed = {3.0, 1.0};
  EXPECT_THROW(c.validate(), ParameterError);
  EXPECT_EQ(parse_background("gradient"), BackgroundKind::kGradient);
  EXPECT_THROW(parse_background("grass"), ParameterError);
}

TEST(Generate, StaticBallHasConstantBox) {
  SceneConfig c = small_scene();
  c.ball_speed = {0.0, 0.0};
  c.motion_blur_len = 0;
  const auto s = generate_one(c, 0);
  ASSERT_EQ(s.length(), c.seq_len);
  for (const BBox& b : s.boxes) EXPECT_EQ(b, s.boxes[0]);
}

TEST(Generate, DeterministicAcrossRunsAndThreads) {
  const SceneConfig c = small_scene(42);
  const auto a = generate(c, 6, 1);
  const auto b = generate(c, 6, 4);
  ASSERT_EQ(a.size(), 6u);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(a[i] == b[i]);
  EXPECT_FALSE(a[0] == a[1]);
  EXPECT_FALSE(generate(small_scene(43), 1)[0] == a[0]);
}

TEST(Generate, RejectsZeroCount) { EXPECT_THROW(generate(small_scene(), 0), UsageError); }

TEST(Generate, BoxesTrackBallCenter) {
  SceneConfig c = small_scene(5);
  c.occlusion_prob = 1.0;
  c.num_distractors = 6;
  for (const auto& s : generate(c, 4)) {
    for (std::size_t t = 0; t < s.length(); ++t) {
      const BBox& b = s.boxes[t];
      EXPECT_DOUBLE_EQ(0.5 * (b.x1 + b.x2), s.meta.center_x[t]);
      EXPECT_DOUBLE_EQ(0.5 * (b.y1 + b.y2), s.meta.center_y[t]);
      EXPECT_NEAR(b.area(), 4.0 * c.ball_radius * c.ball_radius, 1e-9);
    }
  }
}

TEST(Generate, MatchedFilterFindsBall) {
  for (std::size_t blur : {0u, 5u}) {
    SceneConfig c = small_scene(11);
    c.num_distractors = 0;
    c.motion_blur_len = blur;
    for (const auto& s : generate(c, 3)) {
      for (std::size_t t = 0; t < s.length(); ++t) {
        const auto [x, y] = brightest_disc(s, t, c.ball_radius);
        EXPECT_LE(std::hypot(x - s.meta.center_x[t], y - s.meta.center_y[t]), 1.0) << "blur " << blur << " t " << t;
      }
    }
  }
}

TEST(Generate, ScenesShareBackground) {
  SceneConfig c = small_scene(3);
  c.sequences_per_scene = 2;
  const auto s = generate(c, 4);
  EXPECT_EQ(s[0].meta.scene_seed, s[1].meta.scene_seed);
  EXPECT_NE(s[1].meta.scene_seed, s[2].meta.scene_seed);
  EXPECT_NE(s[0].meta.seed, s[1].meta.seed);
}

TEST(Split, SequenceModeArithmeticAndDeterminism) {
  const auto data = generate(small_scene(), 10);
  const Split a = split(data, 0.7, SplitBy::kSequence, 9);
  EXPECT_EQ(a.train.size(), 7u);
  EXPECT_EQ(a.val.size(), 3u);
  const Split b = split(data, 0.7, SplitBy::kSequence, 9);
  EXPECT_EQ(a.train, b.train);
  std::set<std::size_t> all(a.train.begin(), a.train.end());
  all.insert(a.val.begin(), a.val.end());
  EXPECT_EQ(all.size(), 10u);
}

TEST(Split, SceneModeKeepsScenesTogether) {
  SceneConfig c = small_scene();
  c.sequences_per_scene = 3;
  const auto data = generate(c, 12);
  const Split s = split(data, 0.5, SplitBy::kSceneSeed, 2);
  std::set<std::uint64_t> train_scenes;
  for (std::size_t i : s.train) train_scenes.insert(data[i].meta.scene_seed);
  for (std::size_t i : s.val) EXPECT_EQ(train_scenes.count(data[i].meta.scene_seed), 0u);
  EXPECT_EQ(s.train.size(), 6u);
}

TEST(Split, EmptySideIsUsageError) {
  const auto data = generate(small_scene(), 2);
  EXPECT_THROW(split(data, 0.1, SplitBy::kSequence, 0), UsageError);
  EXPECT_THROW(split(data, 1.0, SplitBy::kSequence, 0), ParameterError);
}

TEST(SequenceFile, RoundTripIsBitExact) {
  const fs::path dir = scratch_dir("seq");
  fs::create_directories(dir);
  SceneConfig c = small_scene(8);
  c.motion_blur_len = 3;
  const auto s = generate_one(c, 2);
  write_sequence(dir / "a.mgs", s);
  const auto back = read_sequence(dir / "a.mgs");
  EXPECT_TRUE(back == s);
  for (std::size_t t = 0; t < s.length(); ++t) EXPECT_TRUE(back.frame(t) == s.frame(t));
  write_sequence(dir / "b.mgs", back);
  std::ifstream fa(dir / "a.mgs", std::ios::binary), fb(dir / "b.mgs", std::ios::binary);
  EXPECT_EQ(std::string(std::istreambuf_iterator<char>(fa), {}), std::string(std::istreambuf_iterator<char>(fb), {}));
  EXPECT_EQ(fs::file_size(dir / "a.mgs"), 24u + s.pixels.size() + 32u * s.length());
  fs::remove_all(dir);
}

TEST(SequenceFile, CorruptFilesAreDataErrors) {
  const fs::path dir = scratch_dir("bad");
  fs::create_directories(dir);
  const auto s = generate_one(small_scene(), 0);
  write_sequence(dir / "ok.mgs", s);
  fs::resize_file(dir / "ok.mgs", fs::file_size(dir / "ok.mgs") - 5);
  EXPECT_THROW(read_sequence(dir / "ok.mgs"), DataError);
  std::ofstream(dir / "junk.mgs") << "definitely not a sequence";
  EXPECT_THROW(read_sequence(dir / "junk.mgs"), DataError);
  EXPECT_THROW(read_sequence(dir / "missing.mgs"), DataError);
  fs::remove_all(dir);
}

TEST(Dataset, DirectoryRoundTripWithSplit) {
  const fs::path dir = scratch_dir("ds");
  const SceneConfig c = small_scene(4);
  const auto data = generate(c, 5);
  const Split sp = split(data, 0.6, SplitBy::kSequence, 1);
  write_dataset(dir, c, data, &sp);
  const DatasetInfo info = read_dataset_info(dir);
  EXPECT_EQ(info.files.size(), 5u);
  EXPECT_EQ(info.train_files.size(), 3u);
  EXPECT_EQ(info.config.seed, c.seed);
  const auto all = load_dataset(dir);
  ASSERT_EQ(all.size(), 5u);
  for (std::size_t i = 0; i < 5; ++i) {
    EXPECT_TRUE(all[i] == data[i]);
    EXPECT_EQ(all[i].meta.scene_seed, data[i].meta.scene_seed);
  }
  const auto val = load_dataset(dir, "val");
  ASSERT_EQ(val.size(), 2u);
  EXPECT_TRUE(val[0] == data[sp.val[0]]);
  EXPECT_THROW(load_dataset(dir, "test"), UsageError);
  fs::remove_all(dir);
}

}  // namespace
}  // namespace maskgru
