#include "nasp/cli/plot.hpp"

#include <zlib.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

namespace nasp::cli {

namespace {

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("plot: " + msg); }

// 3x5 glyphs, rows top to bottom, 3 bits per row (MSB left).
std::uint16_t glyph(char c) {
  switch (std::toupper(static_cast<unsigned char>(c))) {
    case '0': return 0b111101101101111;
    case '1': return 0b010110010010111;
    case '2': return 0b111001111100111;
    case '3': return 0b111001111001111;
    case '4': return 0b101101111001001;
    case '5': return 0b111100111001111;
    case '6': return 0b111100111101111;
    case '7': return 0b111001001010010;
    case '8': return 0b111101111101111;
    case '9': return 0b111101111001111;
    case 'A': return 0b010101111101101;
    case 'B': return 0b110101110101110;
    case 'C': return 0b011100100100011;
    case 'D': return 0b110101101101110;
    case 'E': return 0b111100110100111;
    case 'F': return 0b111100110100100;
    case 'G': return 0b011100101101011;
    case 'H': return 0b101101111101101;
    case 'I': return 0b111010010010111;
    case 'J': return 0b001001001101010;
    case 'K': return 0b101110100110101;
    case 'L': return 0b100100100100111;
    case 'M': return 0b101111111101101;
    case 'N': return 0b110101101101101;
    case 'O': return 0b010101101101010;
    case 'P': return 0b110101110100100;
    case 'Q': return 0b010101101011001;
    case 'R': return 0b110101110110101;
    case 'S': return 0b011100010001110;
    case 'T': return 0b111010010010010;
    case 'U': return 0b101101101101111;
    case 'V': return 0b101101101101010;
    case 'W': return 0b101101111111101;
    case 'X': return 0b101101010101101;
    case 'Y': return 0b101101010010010;
    case 'Z': return 0b111001010100111;
    case '.': return 0b000000000000010;
    case ',': return 0b000000000010100;
    case '-': return 0b000000111000000;
    case '+': return 0b000010111010000;
    case '_': return 0b000000000000111;
    case '/': return 0b001001010100100;
    case ':': return 0b000010000010000;
    case '=': return 0b000111000111000;
    case '%': return 0b101001010100101;
    case '(': return 0b001010010010001;
    case ')': return 0b100010010010100;
    default: return 0;
  }
}

void push_u32_be(std::string& out, std::uint32_t v) {
  out.push_back(static_cast<char>((v >> 24) & 0xff));
  out.push_back(static_cast<char>((v >> 16) & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
  out.push_back(static_cast<char>(v & 0xff));
}

void push_chunk(std::string& out, const char type[5], const std::string& data) {
  push_u32_be(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  const auto crc =
      crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()));
  push_u32_be(out, static_cast<std::uint32_t>(crc));
}

std::string format_tick(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.4g", v);
  return buf;
}

const std::uint8_t kPalette[6][3] = {{31, 119, 180}, {214, 94, 23},  {44, 140, 44},
                                     {160, 40, 40},  {120, 80, 170}, {90, 90, 90}};

struct Frame {
  int x0, y0, x1, y1;  // plot rectangle, y0 above y1
  double lo, hi;       // value range mapped onto [y1, y0]

  int ty(double v) const {
    const double t = (v - lo) / (hi - lo);
    return y1 - static_cast<int>(std::lround(t * (y1 - y0)));
  }
};

Frame draw_frame(Canvas& c, const std::string& title, double lo, double hi) {
  if (!(hi > lo)) {
    const double pad = (std::abs(lo) > 0 ? std::abs(lo) : 1.0) * 0.5;
    lo -= pad;
    hi += pad;
  }
  const double span = hi - lo;
  lo -= 0.05 * span;
  hi += 0.05 * span;
  Frame f{64, 28, c.width() - 16, c.height() - 36, lo, hi};
  c.text((c.width() - Canvas::text_width(title, 2)) / 2, 8, title, 2, 20, 20, 20);
  c.line(f.x0, f.y0, f.x0, f.y1, 60, 60, 60);
  c.line(f.x0, f.y1, f.x1, f.y1, 60, 60, 60);
  for (int k = 0; k <= 4; ++k) {
    const double v = lo + (hi - lo) * k / 4.0;
    const int y = f.ty(v);
    c.line(f.x0 + 1, y, f.x1, y, 225, 225, 225);
    c.line(f.x0 - 3, y, f.x0, y, 60, 60, 60);
    const std::string label = format_tick(v);
    c.text(f.x0 - 6 - Canvas::text_width(label, 1), y - 2, label, 1, 60, 60, 60);
  }
  return f;
}

void draw_legend(Canvas& c, const Frame& f, const std::vector<Series>& series) {
  if (series.size() < 2) return;
  int y = f.y0 + 4;
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto* col = kPalette[s % 6];
    const int x = f.x1 - 16 - Canvas::text_width(series[s].name, 1) - 14;
    c.fill_rect(x, y, 10, 6, col[0], col[1], col[2]);
    c.text(x + 14, y, series[s].name, 1, 20, 20, 20);
    y += 12;
  }
}

}  // namespace

Canvas::Canvas(int width, int height, std::uint8_t r, std::uint8_t g, std::uint8_t b)
    : width_(width), height_(height), px_(static_cast<std::size_t>(width) * height * 3) {
  if (width <= 0 || height <= 0) fail("canvas dimensions must be positive");
  for (std::size_t i = 0; i < px_.size(); i += 3) {
    px_[i] = r;
    px_[i + 1] = g;
    px_[i + 2] = b;
  }
}

void Canvas::set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
  if (x < 0 || y < 0 || x >= width_ || y >= height_) return;
  const std::size_t i = (static_cast<std::size_t>(y) * width_ + x) * 3;
  px_[i] = r;
  px_[i + 1] = g;
  px_[i + 2] = b;
}

void Canvas::fill_rect(int x, int y, int w, int h, std::uint8_t r, std::uint8_t g,
                       std::uint8_t b) {
  for (int j = y; j < y + h; ++j)
    for (int i = x; i < x + w; ++i) set(i, j, r, g, b);
}

void Canvas::line(int x0, int y0, int x1, int y1, std::uint8_t r, std::uint8_t g,
                  std::uint8_t b) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, r, g, b);
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

void Canvas::text(int x, int y, const std::string& s, int scale, std::uint8_t r, std::uint8_t g,
                  std::uint8_t b) {
  for (char ch : s) {
    if (ch != ' ') {
      const std::uint16_t bits = glyph(ch);
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col)
          if (bits >> (14 - row * 3 - col) & 1)
            fill_rect(x + col * scale, y + row * scale, scale, scale, r, g, b);
    }
    x += 4 * scale;
  }
}

int Canvas::text_width(const std::string& s, int scale) {
  return static_cast<int>(s.size()) * 4 * scale - (s.empty() ? 0 : scale);
}

void write_png_rgb(const std::string& path, int width, int height,
                   const std::vector<std::uint8_t>& rgb) {
  if (width <= 0 || height <= 0) fail("image dimensions must be positive");
  if (rgb.size() != static_cast<std::size_t>(width) * height * 3)
    fail("pixel buffer does not match dimensions");

  std::string raw;
  raw.reserve(static_cast<std::size_t>(height) * (1 + 3 * width));
  for (int y = 0; y < height; ++y) {
    raw.push_back('\0');  // filter type 0 per scanline
    raw.append(reinterpret_cast<const char*>(&rgb[static_cast<std::size_t>(y) * width * 3]),
               static_cast<std::size_t>(width) * 3);
  }
  uLongf zlen = compressBound(static_cast<uLong>(raw.size()));
  std::string zdata(zlen, '\0');
  if (compress2(reinterpret_cast<Bytef*>(zdata.data()), &zlen,
                reinterpret_cast<const Bytef*>(raw.data()), static_cast<uLong>(raw.size()),
                9) != Z_OK)
    fail("zlib compression failed");
  zdata.resize(zlen);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  push_u32_be(ihdr, static_cast<std::uint32_t>(width));
  push_u32_be(ihdr, static_cast<std::uint32_t>(height));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // color type: truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // interlace
  push_chunk(out, "IHDR", ihdr);
  push_chunk(out, "IDAT", zdata);
  push_chunk(out, "IEND", "");

  std::ofstream f(path, std::ios::binary);
  if (!f) fail("cannot open " + path);
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) fail("short write to " + path);
}

void save_png(const std::string& path, const Canvas& canvas) {
  write_png_rgb(path, canvas.width(), canvas.height(), canvas.pixels());
}

void line_chart(const std::string& path, const std::string& title,
                const std::vector<Series>& series, const std::string& x_label, int width,
                int height) {
  if (series.empty()) fail("line chart needs at least one series");
  double lo = std::numeric_limits<double>::infinity(), hi = -lo;
  std::size_t n = 0;
  for (const auto& s : series) {
    n = std::max(n, s.values.size());
    for (double v : s.values)
      if (std::isfinite(v)) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
  }
  if (n == 0 || !std::isfinite(lo)) fail("line chart needs finite data");

  Canvas c(width, height);
  const Frame f = draw_frame(c, title, lo, hi);
  const auto tx = [&](std::size_t i) {
    return n <= 1 ? (f.x0 + f.x1) / 2
                  : f.x0 + static_cast<int>(std::lround(static_cast<double>(i) * (f.x1 - f.x0) /
                                                        static_cast<double>(n - 1)));
  };
  for (std::size_t s = 0; s < series.size(); ++s) {
    const auto* col = kPalette[s % 6];
    const auto& v = series[s].values;
    for (std::size_t i = 0; i + 1 < v.size(); ++i)
      if (std::isfinite(v[i]) && std::isfinite(v[i + 1]))
        c.line(tx(i), f.ty(v[i]), tx(i + 1), f.ty(v[i + 1]), col[0], col[1], col[2]);
    if (v.size() == 1 && std::isfinite(v[0]))
      c.fill_rect(tx(0) - 1, f.ty(v[0]) - 1, 3, 3, col[0], col[1], col[2]);
  }
  draw_legend(c, f, series);
  if (!x_label.empty())
    c.text((f.x0 + f.x1 - Canvas::text_width(x_label, 1)) / 2, height - 12, x_label, 1, 60, 60,
           60);
  save_png(path, c);
}

void bar_chart(const std::string& path, const std::string& title,
               const std::vector<std::string>& group_labels, const std::vector<Series>& series,
               int width, int height) {
  if (series.empty() || group_labels.empty()) fail("bar chart needs labels and series");
  for (const auto& s : series)
    if (s.values.size() != group_labels.size())
      fail("series '" + s.name + "' does not match the group labels");
  double lo = 0.0, hi = 0.0;
  for (const auto& s : series)
    for (double v : s.values) {
      if (!std::isfinite(v)) fail("bar chart needs finite data");
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }

  Canvas c(width, height);
  const Frame f = draw_frame(c, title, lo, hi);
  const int n_groups = static_cast<int>(group_labels.size());
  const int n_series = static_cast<int>(series.size());
  const double group_w = static_cast<double>(f.x1 - f.x0) / n_groups;
  const double bar_w = std::max(2.0, group_w * 0.7 / n_series);
  const int y_zero = f.ty(0.0);
  for (int g = 0; g < n_groups; ++g) {
    const double gx = f.x0 + group_w * (g + 0.5) - bar_w * n_series / 2.0;
    for (int s = 0; s < n_series; ++s) {
      const auto* col = kPalette[s % 6];
      const int x = static_cast<int>(std::lround(gx + s * bar_w));
      const int y = f.ty(series[static_cast<std::size_t>(s)].values[static_cast<std::size_t>(g)]);
      c.fill_rect(x, std::min(y, y_zero), static_cast<int>(bar_w) - 1,
                  std::max(1, std::abs(y_zero - y)), col[0], col[1], col[2]);
    }
    std::string label = group_labels[static_cast<std::size_t>(g)];
    const int max_chars = std::max(2, static_cast<int>(group_w) / 4 - 1);
    if (static_cast<int>(label.size()) > max_chars)
      label = label.substr(0, static_cast<std::size_t>(max_chars - 1)) + ".";
    c.text(static_cast<int>(f.x0 + group_w * g + (group_w - Canvas::text_width(label, 1)) / 2),
           f.y1 + 6, label, 1, 40, 40, 40);
  }
  draw_legend(c, f, series);
  save_png(path, c);
}

}  // namespace nasp::cli
