#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nasp::cli {

// In-memory RGB raster with the origin at the top-left corner.
class Canvas {
 public:
  Canvas(int width, int height, std::uint8_t r = 255, std::uint8_t g = 255, std::uint8_t b = 255);

  int width() const { return width_; }
  int height() const { return height_; }

  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  void fill_rect(int x, int y, int w, int h, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  void line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g, std::uint8_t b);
  // 3x5 bitmap glyphs (digits, latin letters folded to upper case, basic
  // punctuation); unknown characters render as blanks. scale >= 1.
  void text(int x, int y, const std::string& s, int scale, std::uint8_t r, std::uint8_t g,
            std::uint8_t b);
  static int text_width(const std::string& s, int scale);

  const std::vector<std::uint8_t>& pixels() const { return px_; }

 private:
  int width_ = 0, height_ = 0;
  std::vector<std::uint8_t> px_;  // RGB, row-major
};

// Minimal PNG writer: 8-bit RGB, no interlace, one zlib-compressed IDAT.
void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb);
void save_png(const std::string& path, const Canvas& canvas);

struct Series {
  std::string name;
  std::vector<double> values;
};

// Polyline chart of one or more equally indexed series, with axes, y ticks,
// and a legend. Non-finite values interrupt the line.
void line_chart(const std::string& path, const std::string& title,
                const std::vector<Series>& series, const std::string& x_label = "",
                int width = 720, int height = 400);

// Grouped vertical bars: one group per label, one bar per series within the
// group. Bars rise from zero (or sink to it when values are negative).
void bar_chart(const std::string& path, const std::string& title,
               const std::vector<std::string>& group_labels, const std::vector<Series>& series,
               int width = 720, int height = 400);

}  // namespace nasp::cli
