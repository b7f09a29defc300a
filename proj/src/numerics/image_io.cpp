#include "kpop/image_io.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "kpop/error.hpp"

namespace kpop::io {

using Colour = std::array<std::uint8_t, 3>;

Image Image::filled(int width, int height, Colour colour) {
  if (width < 1 || height < 1) throw UsageError("image dimensions must be positive");
  Image img;
  img.width = width;
  img.height = height;
  img.rgb.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < img.rgb.size(); i += 3) std::copy(colour.begin(), colour.end(), img.rgb.begin() + i);
  return img;
}

void Image::set(int x, int y, Colour colour) {
  if (x < 0 || y < 0 || x >= width || y >= height) return;
  const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
  std::copy(colour.begin(), colour.end(), rgb.begin() + i);
}

Colour Image::get(int x, int y) const {
  const auto i = (static_cast<std::size_t>(y) * width + x) * 3;
  return {rgb[i], rgb[i + 1], rgb[i + 2]};
}

namespace {

void write_pnm(const std::filesystem::path& path, const Image& image, bool gray) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  os << (gray ? "P5" : "P6") << '\n' << image.width << ' ' << image.height << "\n255\n";
  if (gray) {
    std::vector<char> g(static_cast<std::size_t>(image.width) * image.height);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = static_cast<char>(image.rgb[i * 3]);
    os.write(g.data(), static_cast<std::streamsize>(g.size()));
  } else {
    os.write(reinterpret_cast<const char*>(image.rgb.data()), static_cast<std::streamsize>(image.rgb.size()));
  }
  if (!os) throw IoError("failed writing " + path.string());
}

// Uppercase 3x5 glyphs, one row per 3-bit group, top row first.
const char* glyph(char c) {
  switch (std::toupper(static_cast<unsigned char>(c))) {
    case '0': return "111101101101111";
    case '1': return "010110010010111";
    case '2': return "111001111100111";
    case '3': return "111001111001111";
    case '4': return "101101111001001";
    case '5': return "111100111001111";
    case '6': return "111100111101111";
    case '7': return "111001001010010";
    case '8': return "111101111101111";
    case '9': return "111101111001111";
    case 'A': return "010101111101101";
    case 'B': return "110101110101110";
    case 'C': return "011100100100011";
    case 'D': return "110101101101110";
    case 'E': return "111100110100111";
    case 'F': return "111100110100100";
    case 'G': return "011100101101011";
    case 'H': return "101101111101101";
    case 'I': return "111010010010111";
    case 'J': return "001001001101010";
    case 'K': return "101101110101101";
    case 'L': return "100100100100111";
    case 'M': return "101111111101101";
    case 'N': return "110101101101101";
    case 'O': return "010101101101010";
    case 'P': return "110101110100100";
    case 'Q': return "010101101110011";
    case 'R': return "110101110101101";
    case 'S': return "011100010001110";
    case 'T': return "111010010010010";
    case 'U': return "101101101101111";
    case 'V': return "101101101101010";
    case 'W': return "101101111111101";
    case 'X': return "101101010101101";
    case 'Y': return "101101010010010";
    case 'Z': return "111001010100111";
    case '.': return "000000000000010";
    case ',': return "000000000010100";
    case '-': return "000000111000000";
    case '+': return "000010111010000";
    case '=': return "000111000111000";
    case ':': return "000010000010000";
    case '_': return "000000000000111";
    case '/': return "001001010100100";
    case '(': return "010100100100010";
    case ')': return "010001001001010";
    case ' ': return "000000000000000";
    default: return "111101101101111";
  }
}

}  // namespace

void write_pgm(const std::filesystem::path& path, const Image& image) { write_pnm(path, image, true); }
void write_ppm(const std::filesystem::path& path, const Image& image) { write_pnm(path, image, false); }

Image read_pnm(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path.string());
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  is >> magic >> w >> h >> maxval;
  is.get();
  if ((magic != "P5" && magic != "P6") || w < 1 || h < 1 || maxval != 255) {
    throw IoError(path.string() + " is not an 8-bit binary PGM/PPM file");
  }
  Image img = Image::filled(w, h, {0, 0, 0});
  if (magic == "P6") {
    is.read(reinterpret_cast<char*>(img.rgb.data()), static_cast<std::streamsize>(img.rgb.size()));
  } else {
    std::vector<char> g(static_cast<std::size_t>(w) * h);
    is.read(g.data(), static_cast<std::streamsize>(g.size()));
    for (std::size_t i = 0; i < g.size(); ++i) {
      const auto v = static_cast<std::uint8_t>(g[i]);
      img.rgb[i * 3] = img.rgb[i * 3 + 1] = img.rgb[i * 3 + 2] = v;
    }
  }
  if (!is) throw IoError(path.string() + " is truncated");
  return img;
}

Image gray_image(std::span<const double> values, int width, int height, double lo, double hi, int scale) {
  if (values.size() != static_cast<std::size_t>(width) * height) throw DimensionError("gray_image size mismatch");
  Image img = Image::filled(width * scale, height * scale, {0, 0, 0});
  const double span = hi > lo ? hi - lo : 1.0;
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double v = std::clamp((values[static_cast<std::size_t>(y) * width + x] - lo) / span, 0.0, 1.0);
      const auto g = static_cast<std::uint8_t>(std::lround(v * 255.0));
      for (int dy = 0; dy < scale; ++dy)
        for (int dx = 0; dx < scale; ++dx) img.set(x * scale + dx, y * scale + dy, {g, g, g});
    }
  }
  return img;
}

Image tile_images(const nn::Tensor& images, int cols, int scale) {
  if (images.rank() != 4 || images.dim(1) != 1) throw DimensionError("tile_images expects [n, 1, H, W]");
  const int n = static_cast<int>(images.dim(0)), h = static_cast<int>(images.dim(2)), w = static_cast<int>(images.dim(3));
  cols = std::max(1, std::min(cols, n));
  const int rows = (n + cols - 1) / cols;
  const int cw = w * scale + 1, ch = h * scale + 1;
  Image out = Image::filled(cols * cw + 1, rows * ch + 1, {64, 64, 64});
  const auto d = images.data();
  for (int i = 0; i < n; ++i) {
    auto tile = gray_image(d.subspan(static_cast<std::size_t>(i) * h * w, static_cast<std::size_t>(h) * w), w, h, -1.0,
                           1.0, scale);
    const int ox = (i % cols) * cw + 1, oy = (i / cols) * ch + 1;
    for (int y = 0; y < tile.height; ++y)
      for (int x = 0; x < tile.width; ++x) out.set(ox + x, oy + y, tile.get(x, y));
  }
  return out;
}

Image heat_image(std::span<const double> values, int width, int height, int scale) {
  if (values.size() != static_cast<std::size_t>(width) * height) throw DimensionError("heat_image size mismatch");
  Image img = Image::filled(width * scale, height * scale, {0, 0, 0});
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const double v = std::clamp(values[static_cast<std::size_t>(y) * width + x], 0.0, 1.0);
      const auto r = static_cast<std::uint8_t>(std::lround(std::min(1.0, 3 * v) * 255));
      const auto g = static_cast<std::uint8_t>(std::lround(std::clamp(3 * v - 1, 0.0, 1.0) * 255));
      const auto b = static_cast<std::uint8_t>(std::lround(std::clamp(3 * v - 2, 0.0, 1.0) * 255));
      for (int dy = 0; dy < scale; ++dy)
        for (int dx = 0; dx < scale; ++dx) img.set(x * scale + dx, y * scale + dy, {r, g, b});
    }
  }
  return img;
}

void draw_line(Image& image, int x0, int y0, int x1, int y1, Colour colour) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    image.set(x0, y0, colour);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
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

void draw_text(Image& image, int x, int y, std::string_view text, Colour colour, int scale) {
  for (char c : text) {
    const char* g = glyph(c);
    for (int r = 0; r < 5; ++r)
      for (int k = 0; k < 3; ++k)
        if (g[r * 3 + k] == '1')
          for (int dy = 0; dy < scale; ++dy)
            for (int dx = 0; dx < scale; ++dx) image.set(x + k * scale + dx, y + r * scale + dy, colour);
    x += 4 * scale;
  }
}

namespace {

std::string tick_label(double v) {
  std::ostringstream os;
  os.precision(3);
  os << v;
  return os.str();
}

constexpr Colour kPalette[] = {{31, 119, 180}, {214, 39, 40}, {44, 160, 44}, {148, 103, 189},
                               {255, 127, 14}, {23, 190, 207}, {140, 86, 75}, {127, 127, 127}};

}  // namespace

Image line_plot(const std::vector<Series>& series, const PlotOptions& options) {
  if (series.empty()) throw UsageError("line_plot needs at least one series");
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& s : series) {
    if (s.x.size() != s.y.size()) throw DimensionError("series '" + s.label + "' has mismatched x and y");
    for (std::size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i])) continue;
      xmin = std::min(xmin, s.x[i]);
      xmax = std::max(xmax, s.x[i]);
      ymin = std::min(ymin, s.y[i]);
      ymax = std::max(ymax, s.y[i]);
    }
  }
  if (xmin > xmax) {
    xmin = 0;
    xmax = 1;
    ymin = 0;
    ymax = 1;
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) {
    ymin -= 0.5;
    ymax += 0.5;
  }
  const Colour black{0, 0, 0}, grid{225, 225, 225};
  Image img = Image::filled(options.width, options.height, {255, 255, 255});
  const int left = 56, right = options.width - 120, top = 24, bottom = options.height - 36;
  auto px = [&](double x) { return left + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (right - left))); };
  auto py = [&](double y) { return bottom - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (bottom - top))); };
  for (int i = 0; i <= 4; ++i) {
    const double xv = xmin + (xmax - xmin) * i / 4.0, yv = ymin + (ymax - ymin) * i / 4.0;
    draw_line(img, px(xv), top, px(xv), bottom, grid);
    draw_line(img, left, py(yv), right, py(yv), grid);
    const auto xl = tick_label(xv), yl = tick_label(yv);
    draw_text(img, px(xv) - 2 * static_cast<int>(xl.size()), bottom + 5, xl, black);
    draw_text(img, left - 4 - 4 * static_cast<int>(yl.size()), py(yv) - 2, yl, black);
  }
  draw_line(img, left, top, left, bottom, black);
  draw_line(img, left, bottom, right, bottom, black);
  draw_text(img, left, 6, options.title, black, 2);
  draw_text(img, (left + right) / 2 - 2 * static_cast<int>(options.x_label.size()), bottom + 16, options.x_label, black);
  draw_text(img, 4, top - 12, options.y_label, black);
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto colour = kPalette[s % std::size(kPalette)];
    const auto& se = series[s];
    for (std::size_t i = 0; i < se.x.size(); ++i) {
      if (!std::isfinite(se.y[i])) continue;
      const int x = px(se.x[i]), y = py(se.y[i]);
      for (int d = -2; d <= 2; ++d) {
        img.set(x + d, y, colour);
        img.set(x, y + d, colour);
      }
      // Gaps (non-finite values) break the polyline.
      if (i + 1 < se.x.size() && std::isfinite(se.y[i + 1])) draw_line(img, x, y, px(se.x[i + 1]), py(se.y[i + 1]), colour);
    }
    const int ly = top + 4 + 12 * static_cast<int>(s);
    draw_line(img, right + 8, ly + 2, right + 20, ly + 2, colour);
    draw_text(img, right + 24, ly, se.label, black);
  }
  return img;
}

}  // namespace kpop::io
