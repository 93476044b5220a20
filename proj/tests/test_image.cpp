// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include <unistd.h>

#include "maskgru/image.hpp"
#include "maskgru/plot.hpp"
#include "model_oracles.hpp"

namespace maskgru {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  return fs::temp_directory_path() / ("maskgru_img_" + std::to_string(::getpid()) + "_" + name);
}

TEST(Overlay, OutlinePixelsUseThePalette) {
  SceneConfig c;
  c.height = c.width = 24;
  c.ball_radius = 2.0;
  c.distractor_size = {2.0, 4.0};
  c.seq_len = 2;
  c.seed = 3;
  const auto s = generate_one(c, 0);
  Image img = frame_image(s, 1);
  const Image plain = img;
  const BBox truth{3.2, 4.0, 12.6, 9.4}, pred{14.0, 2.0, 20.0, 20.0};
  draw_box(img, truth, kTruthColor);
  draw_box(img, pred, kPredictionColor);
  for (std::size_t y = 0; y < 24; ++y)
    for (std::size_t x = 0; x < 24; ++x) {
      const long lx = static_cast<long>(x), ly = static_cast<long>(y);
      if (oracle::on_outline(pred, lx, ly)) {
        EXPECT_EQ(img.at(x, y), kPredictionColor);
      } else if (oracle::on_outline(truth, lx, ly)) {
        EXPECT_EQ(img.at(x, y), kTruthColor);
      } else {
        EXPECT_EQ(img.at(x, y), plain.at(x, y));
      }
    }
  EXPECT_EQ(kTruthColor, (Rgb{0, 255, 0}));
  EXPECT_EQ(kPredictionColor, (Rgb{255, 0, 0}));
}

TEST(Overlay, FrameImageKeepsPlanarBytes) {
  SceneConfig c;
  c.height = 8;
  c.width = 12;
  c.seq_len = 1;
  c.ball_radius = 0.9;
  c.distractor_size = {1.5, 2.0};
  const auto s = generate_one(c, 0);
  const Image img = frame_image(s, 0);
  const auto b = s.frame_bytes(0);
  EXPECT_EQ(img.at(5, 3), (Rgb{b[3 * 12 + 5], b[96 + 3 * 12 + 5], b[192 + 3 * 12 + 5]}));
}

TEST(TensorImage, MapsRangeToBytes) {
  Tensor t(Shape{1, 1, 3}, {-1.0, 0.0, 1.0});
  const Image g = tensor_image(t);
  EXPECT_EQ(g.at(0, 0), (Rgb{0, 0, 0}));
  EXPECT_EQ(g.at(1, 0), (Rgb{128, 128, 128}));
  EXPECT_EQ(g.at(2, 0), (Rgb{255, 255, 255}));
  EXPECT_EQ(tensor_image(Tensor(Shape{3, 2, 2})).at(1, 1), (Rgb{0, 0, 0}));
  EXPECT_THROW(tensor_image(Tensor(Shape{2, 2, 2})), ShapeError);
  const Image up = upscale(g, 3);
  EXPECT_EQ(up.width(), 9u);
  EXPECT_EQ(up.at(8, 2), g.at(2, 0));
}

TEST(ImageFiles, PpmRoundTripAndPngSignature) {
  Image img(5, 4, {10, 20, 30});
  img.set(2, 1, {200, 100, 0});
  const fs::path ppm = temp_file("a.ppm");
  write_image(ppm, img);
  EXPECT_TRUE(read_ppm(ppm) == img);
  EXPECT_EQ(fs::file_size(ppm), 11u + 60u);
  fs::remove(ppm);
  EXPECT_THROW(write_image(temp_file("a.gif"), img), UsageError);
  const fs::path png = temp_file("a.png");
  if (png_supported()) {
    write_image(png, img);
    std::ifstream in(png, std::ios::binary);
    char sig[8];
    in.read(sig, 8);
    EXPECT_EQ(std::string(sig + 1, 3), "PNG");
    fs::remove(png);
  } else {
    EXPECT_THROW(write_image(png, img), UsageError);
  }
}

TEST(Plot, DrawsSeriesInTheirColours) {
  PlotSpec spec;
  spec.title = "dead fraction";
  spec.x_label = "epoch";
  spec.series = {{"b=0.25", {0, 1, 2, 3}, {0.1, 0.2, 0.3, 0.4}}, {"b=1", {0, 1, 2, 3}, {0.5, 0.5, 0.6, 0.9}}};
  const Image img = render_plot(spec);
  EXPECT_EQ(img.width(), 640u);
  EXPECT_EQ(img.height(), 400u);
  std::size_t first = 0, second = 0;
  for (std::size_t y = 0; y < img.height(); ++y)
    for (std::size_t x = 0; x < img.width(); ++x) {
      first += img.at(x, y) == series_color(0);
      second += img.at(x, y) == series_color(1);
    }
  EXPECT_GT(first, 300u);
  EXPECT_GT(second, 300u);
  spec.series[0].y.pop_back();
  EXPECT_THROW(render_plot(spec), ParameterError);
  spec.series.clear();
  spec.width = 100;
  EXPECT_THROW(render_plot(spec), ParameterError);
}

TEST(Plot, TextUsesFixedAdvance) {
  Image img(40, 10);
  draw_text(img, 0, 0, "1", {255, 255, 255});
  EXPECT_EQ(text_width("abc"), 18u);
  EXPECT_EQ(img.at(2, 0), (Rgb{255, 255, 255}));  // top of the '1' stem
  EXPECT_EQ(img.at(0, 0), (Rgb{0, 0, 0}));
}

}  // namespace
}  // namespace maskgru
