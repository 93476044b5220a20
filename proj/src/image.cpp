// SPDX-License-Identifier: Apache-2.0
#include "maskgru/image.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <memory>
#include <string>

#include "maskgru/errors.hpp"

#ifdef MASKGRU_HAVE_PNG
#include <png.h>
#endif

namespace maskgru {

Image::Image(std::size_t width, std::size_t height, Rgb fill) : width_(width), height_(height) {
  rgb_.resize(width * height * 3);
  for (std::size_t i = 0; i < width * height; ++i) {
    rgb_[3 * i] = fill.r;
    rgb_[3 * i + 1] = fill.g;
    rgb_[3 * i + 2] = fill.b;
  }
}

Rgb Image::at(std::size_t x, std::size_t y) const {
  if (x >= width_ || y >= height_) throw UsageError("Image::at: pixel outside the raster");
  const std::size_t i = 3 * (y * width_ + x);
  return {rgb_[i], rgb_[i + 1], rgb_[i + 2]};
}

void Image::set(long x, long y, Rgb c) {
  if (x < 0 || y < 0 || static_cast<std::size_t>(x) >= width_ || static_cast<std::size_t>(y) >= height_) return;
  const std::size_t i = 3 * (static_cast<std::size_t>(y) * width_ + static_cast<std::size_t>(x));
  rgb_[i] = c.r;
  rgb_[i + 1] = c.g;
  rgb_[i + 2] = c.b;
}

Image frame_image(const SequenceSample& sample, std::size_t t) {
  const auto planes = sample.frame_bytes(t);
  const std::size_t n = sample.height * sample.width;
  Image img(sample.width, sample.height);
  for (std::size_t y = 0; y < sample.height; ++y)
    for (std::size_t x = 0; x < sample.width; ++x) {
      const std::size_t i = y * sample.width + x;
      img.set(static_cast<long>(x), static_cast<long>(y), {planes[i], planes[n + i], planes[2 * n + i]});
    }
  return img;
}

void draw_box(Image& image, const BBox& box, Rgb color, std::size_t thickness) {
  const Tensor mask = render_mask(box, image.height(), image.width(), 1.0, 0, thickness);
  for (std::size_t y = 0; y < image.height(); ++y)
    for (std::size_t x = 0; x < image.width(); ++x)
      if (mask[y * image.width() + x] != 0.0) image.set(static_cast<long>(x), static_cast<long>(y), color);
}

Image tensor_image(const Tensor& chw) {
  if (chw.rank() != 3 || (chw.dim(0) != 1 && chw.dim(0) != 3)) {
    throw ShapeError("tensor_image: expected [1, H, W] or [3, H, W], got " + shape_str(chw.shape()));
  }
  const std::size_t c = chw.dim(0), h = chw.dim(1), w = chw.dim(2);
  const auto data = chw.data();
  const auto [lo, hi] = std::minmax_element(data.begin(), data.end());
  const double span = *hi - *lo;
  auto level = [&](double v) {
    return static_cast<std::uint8_t>(span > 0.0 ? std::clamp((v - *lo) / span * 255.0 + 0.5, 0.0, 255.0) : 0.0);
  };
  Image img(w, h);
  for (std::size_t y = 0; y < h; ++y)
    for (std::size_t x = 0; x < w; ++x) {
      const std::size_t i = y * w + x;
      const std::uint8_t r = level(data[i]);
      const Rgb px = c == 1 ? Rgb{r, r, r} : Rgb{r, level(data[h * w + i]), level(data[2 * h * w + i])};
      img.set(static_cast<long>(x), static_cast<long>(y), px);
    }
  return img;
}

Image upscale(const Image& image, std::size_t factor) {
  if (factor == 0) throw ParameterError("upscale: factor must be positive");
  Image out(image.width() * factor, image.height() * factor);
  for (std::size_t y = 0; y < out.height(); ++y)
    for (std::size_t x = 0; x < out.width(); ++x)
      out.set(static_cast<long>(x), static_cast<long>(y), image.at(x / factor, y / factor));
  return out;
}

void write_ppm(const std::filesystem::path& path, const Image& image) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "P6\n" << image.width() << ' ' << image.height() << "\n255\n";
  out.write(reinterpret_cast<const char*>(image.bytes().data()), static_cast<std::streamsize>(image.bytes().size()));
  if (!out) throw DataError("short write to " + path.string());
}

Image read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (magic != "P6" || !in || maxval != 255 || w == 0 || h == 0) throw DataError(path.string() + ": not an 8-bit P6 file");
  in.get();
  std::vector<char> raw(w * h * 3);
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in || in.peek() != std::char_traits<char>::eof()) throw DataError(path.string() + ": pixel data size mismatch");
  Image img(w, h);
  for (std::size_t i = 0; i < w * h; ++i) {
    img.set(static_cast<long>(i % w), static_cast<long>(i / w),
            {static_cast<std::uint8_t>(raw[3 * i]), static_cast<std::uint8_t>(raw[3 * i + 1]),
             static_cast<std::uint8_t>(raw[3 * i + 2])});
  }
  return img;
}

#ifdef MASKGRU_HAVE_PNG

bool png_supported() { return true; }

void write_png(const std::filesystem::path& path, const Image& image) {
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw DataError("cannot write " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) {
    png_destroy_write_struct(&png, nullptr);
    throw DataError("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(image.width()), static_cast<png_uint_32>(image.height()), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < image.height(); ++y) {
    png_write_row(png, image.bytes().data() + 3 * y * image.width());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

#else

bool png_supported() { return false; }

void write_png(const std::filesystem::path& path, const Image&) {
  throw UsageError("cannot write " + path.string() + ": built without PNG support, use .ppm");
}

#endif

void write_image(const std::filesystem::path& path, const Image& image) {
  const std::string ext = path.extension().string();
  if (ext == ".ppm") {
    write_ppm(path, image);
  } else if (ext == ".png") {
    write_png(path, image);
  } else {
    throw UsageError("unsupported image extension '" + ext + "' (use .ppm or .png)");
  }
}

}  // namespace maskgru
