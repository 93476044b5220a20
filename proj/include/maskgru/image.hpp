// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "maskgru/cells.hpp"
#include "maskgru/synthdata.hpp"

namespace maskgru {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  friend bool operator==(const Rgb&, const Rgb&) = default;
};

// Overlay palette.
inline constexpr Rgb kTruthColor{0, 255, 0};
inline constexpr Rgb kPredictionColor{255, 0, 0};

/// Interleaved 8-bit RGB raster.
class Image {
 public:
  Image() = default;
  Image(std::size_t width, std::size_t height, Rgb fill = {});

  std::size_t width() const { return width_; }
  std::size_t height() const { return height_; }
  Rgb at(std::size_t x, std::size_t y) const;
  /// Writes are clipped: coordinates outside the raster are ignored.
  void set(long x, long y, Rgb c);
  const std::vector<std::uint8_t>& bytes() const { return rgb_; }

  friend bool operator==(const Image&, const Image&) = default;

 private:
  std::size_t width_ = 0;
  std::size_t height_ = 0;
  std::vector<std::uint8_t> rgb_;
};

Image frame_image(const SequenceSample& sample, std::size_t t);

/// Paints the pixels render_mask would set for `box`.
void draw_box(Image& image, const BBox& box, Rgb color, std::size_t thickness = 1);

/// Visualises a [C, H, W] tensor (C = 1 or 3) by mapping the tensor-wide
/// [min, max] range to [0, 255]. A constant tensor maps to black.
Image tensor_image(const Tensor& chw);

/// Nearest-neighbour enlargement by an integer factor.
Image upscale(const Image& image, std::size_t factor);

void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_ppm(const std::filesystem::path& path);

/// True when the build links libpng.
bool png_supported();
void write_png(const std::filesystem::path& path, const Image& image);

/// Picks the encoder from the extension (.ppm or .png).
void write_image(const std::filesystem::path& path, const Image& image);

}  // namespace maskgru
