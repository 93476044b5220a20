// SPDX-License-Identifier: Apache-2.0
#include "maskgru/plot.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>

#include "maskgru/errors.hpp"

namespace maskgru {
namespace {

struct Glyph {
  char c;
  std::array<std::uint8_t, 7> rows;  // 5 bits per row, MSB is the left column
};

constexpr Glyph kFont[] = {
    {' ', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x00}}, {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}},
    {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}},
    {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}}, {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}},
    {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}}, {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}},
    {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}}, {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}},
    {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}}, {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}}, {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}},
    {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}}, {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}},
    {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}}, {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}},
    {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}}, {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}},
    {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}}, {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}},
    {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}}, {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}}, {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}},
    {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}}, {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}},
    {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}}, {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}},
    {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}}, {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}},
    {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}}, {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}},
    {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}}, {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}}, {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}},
    {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}}, {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}},
    {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}}, {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}},
    {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}}, {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
    {'?', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04}},
};

const Glyph& glyph(char c) {
  const char u = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  for (const Glyph& g : kFont)
    if (g.c == u) return g;
  return kFont[std::size(kFont) - 1];  // '?'
}

constexpr Rgb kWhite{255, 255, 255};
constexpr Rgb kInk{40, 40, 40};
constexpr Rgb kGrid{225, 225, 225};

void line(Image& img, long x0, long y0, long x1, long y1, Rgb c) {
  const long dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const long sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  long err = dx + dy;
  for (;;) {
    img.set(x0, y0, c);
    if (x0 == x1 && y0 == y1) break;
    const long e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

}  // namespace

Rgb series_color(std::size_t i) {
  static constexpr std::array<Rgb, 8> palette{{{31, 119, 180},
                                               {214, 39, 40},
                                               {44, 160, 44},
                                               {255, 127, 14},
                                               {148, 103, 189},
                                               {140, 86, 75},
                                               {227, 119, 194},
                                               {23, 190, 207}}};
  return palette[i % palette.size()];
}

std::size_t text_width(const std::string& text, std::size_t scale) { return text.size() * 6 * scale; }

void draw_text(Image& image, long x, long y, const std::string& text, Rgb color, std::size_t scale) {
  const long s = static_cast<long>(scale);
  for (char ch : text) {
    const Glyph& g = glyph(ch);
    for (long row = 0; row < 7; ++row)
      for (long col = 0; col < 5; ++col) {
        if (!(g.rows[static_cast<std::size_t>(row)] & (0x10 >> col))) continue;
        for (long dy = 0; dy < s; ++dy)
          for (long dx = 0; dx < s; ++dx) image.set(x + col * s + dx, y + row * s + dy, color);
      }
    x += 6 * s;
  }
}

Image render_plot(const PlotSpec& spec) {
  if (spec.width < 160 || spec.height < 120) throw ParameterError("render_plot: canvas must be at least 160x120");
  double xmin = INFINITY, xmax = -INFINITY, ymin = INFINITY, ymax = -INFINITY;
  for (const Series& s : spec.series) {
    if (s.x.size() != s.y.size()) throw ParameterError("render_plot: series '" + s.label + "' has mismatched x/y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (!(xmin <= xmax)) xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  if (xmin == xmax) xmin -= 0.5, xmax += 0.5;
  if (ymin == ymax) ymin -= 0.5, ymax += 0.5;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  Image img(spec.width, spec.height, kWhite);
  const long W = static_cast<long>(spec.width), H = static_cast<long>(spec.height);
  const long left = 64, right = W - 16, top = 28, bottom = H - 40;
  auto px = [&](double x) { return left + std::lround((x - xmin) / (xmax - xmin) * static_cast<double>(right - left)); };
  auto py = [&](double y) { return bottom - std::lround((y - ymin) / (ymax - ymin) * static_cast<double>(bottom - top)); };

  for (int i = 0; i <= 4; ++i) {
    const double fx = xmin + (xmax - xmin) * i / 4.0, fy = ymin + (ymax - ymin) * i / 4.0;
    const long gx = px(fx), gy = py(fy);
    line(img, gx, top, gx, bottom, kGrid);
    line(img, left, gy, right, gy, kGrid);
    const std::string lx = tick_label(fx), ly = tick_label(fy);
    draw_text(img, gx - static_cast<long>(text_width(lx)) / 2, bottom + 6, lx, kInk);
    draw_text(img, left - 6 - static_cast<long>(text_width(ly)), gy - 3, ly, kInk);
  }
  line(img, left, top, left, bottom, kInk);
  line(img, left, bottom, right, bottom, kInk);

  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const Series& s = spec.series[k];
    const Rgb c = series_color(k);
    bool have_prev = false;
    long x0 = 0, y0 = 0;
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) {
        have_prev = false;
        continue;
      }
      const long x1 = px(s.x[i]), y1 = py(s.y[i]);
      if (have_prev) line(img, x0, y0, x1, y1, c);
      img.set(x1, y1, c);
      x0 = x1;
      y0 = y1;
      have_prev = true;
    }
  }

  // Legend, top-right, one row per series, over a white panel.
  std::size_t widest = 0;
  for (const Series& s : spec.series) widest = std::max(widest, text_width(s.label));
  const long lx = right - 4 - static_cast<long>(widest) - 14;
  if (!spec.series.empty()) {
    const long ly1 = top + 4 + 10 * static_cast<long>(spec.series.size());
    for (long y = top + 1; y <= ly1; ++y)
      for (long x = lx - 3; x < right; ++x) img.set(x, y, kWhite);
  }
  for (std::size_t k = 0; k < spec.series.size(); ++k) {
    const Rgb c = series_color(k);
    const long ly = top + 4 + 10 * static_cast<long>(k);
    line(img, lx, ly + 3, lx + 10, ly + 3, c);
    line(img, lx, ly + 4, lx + 10, ly + 4, c);
    draw_text(img, lx + 14, ly, spec.series[k].label, kInk);
  }

  draw_text(img, (W - static_cast<long>(text_width(spec.title, 2))) / 2, 6, spec.title, kInk, 2);
  draw_text(img, (left + right - static_cast<long>(text_width(spec.x_label))) / 2, H - 14, spec.x_label, kInk);
  draw_text(img, 4, top - 12, spec.y_label, kInk);
  return img;
}

}  // namespace maskgru
