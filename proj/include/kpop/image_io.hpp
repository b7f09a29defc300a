#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "kpop/tensor.hpp"

namespace kpop::io {

/// 8-bit RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // row-major, 3 bytes per pixel

  static Image filled(int width, int height, std::array<std::uint8_t, 3> colour);
  void set(int x, int y, std::array<std::uint8_t, 3> colour);
  std::array<std::uint8_t, 3> get(int x, int y) const;
};

// Binary P5 / P6. Grayscale images keep only the red channel.
void write_pgm(const std::filesystem::path& path, const Image& image);
void write_ppm(const std::filesystem::path& path, const Image& image);
Image read_pnm(const std::filesystem::path& path);

/// Values in [lo, hi] mapped to gray levels, each pixel repeated `scale` times.
Image gray_image(std::span<const double> values, int width, int height, double lo, double hi, int scale = 1);
/// Images [n, 1, H, W] in [-1, 1] tiled `cols` per row with a 1-pixel gutter.
Image tile_images(const nn::Tensor& images, int cols, int scale = 1);
/// Values in [0, 1] through a black-red-yellow-white ramp.
Image heat_image(std::span<const double> values, int width, int height, int scale = 1);

/// Minimal line-plot renderer: axes, tick labels, one polyline per series.
struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};

struct PlotOptions {
  int width = 480;
  int height = 320;
  std::string title;
  std::string x_label;
  std::string y_label;
};

Image line_plot(const std::vector<Series>& series, const PlotOptions& options = {});

/// 3x5 bitmap text; unknown glyphs draw as a box.
void draw_text(Image& image, int x, int y, std::string_view text, std::array<std::uint8_t, 3> colour, int scale = 1);
void draw_line(Image& image, int x0, int y0, int x1, int y1, std::array<std::uint8_t, 3> colour);

}  // namespace kpop::io
