// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "maskgru/image.hpp"

namespace maskgru {

struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::size_t width = 640;
  std::size_t height = 400;
};

/// Colour of series i in render_plot; cycles after eight entries.
Rgb series_color(std::size_t i);

/**
 * Line chart with axes, five ticks per axis, a legend and a title drawn in a
 * built-in 5×7 pixel font (upper-case letters, digits and common
 * punctuation; lower case is folded to upper case). Non-finite points break
 * the line. Throws ParameterError when a series has mismatched x/y lengths
 * or the canvas is smaller than 160×120.
 */
Image render_plot(const PlotSpec& spec);

/// Draws `text` with its top-left corner at (x, y), `scale` pixels per font dot.
void draw_text(Image& image, long x, long y, const std::string& text, Rgb color, std::size_t scale = 1);
std::size_t text_width(const std::string& text, std::size_t scale = 1);

}  // namespace maskgru
