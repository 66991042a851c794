// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cleandift/image_io.hpp"

namespace cleandift {

struct Series {
  std::string name;
  std::vector<double> x, y;
};

struct Chart {
  enum class Kind { line, bar };
  Kind kind = Kind::line;
  std::string title, xlabel, ylabel;
  std::vector<Series> series;         // line charts
  std::vector<std::string> bar_labels;  // bar charts: one bar per label
  std::vector<double> bar_values;
};

namespace detail {

inline constexpr std::array<std::array<unsigned char, 3>, 8> kPalette{{
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44}, {214, 39, 40},
    {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127}}};

inline std::string hex_color(std::size_t i) {
  const auto& c = kPalette[i % kPalette.size()];
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

inline std::string xml_escape(const std::string& s) {
  std::string o;
  for (char c : s) {
    switch (c) {
      case '<': o += "&lt;"; break;
      case '>': o += "&gt;"; break;
      case '&': o += "&amp;"; break;
      case '"': o += "&quot;"; break;
      default: o += c;
    }
  }
  return o;
}

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3g", v);
  return buf;
}

struct Range {
  double lo = std::numeric_limits<double>::infinity(), hi = -std::numeric_limits<double>::infinity();
  void add(double v) {
    if (!std::isfinite(v)) return;
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  void settle() {
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi - lo < 1e-12) {
      lo -= 0.5;
      hi += 0.5;
    }
  }
};

struct Frame {
  int W = 640, H = 400, left = 70, right = 170, top = 40, bottom = 50;
  Range xr, yr;
  double px(double x) const { return left + (x - xr.lo) / (xr.hi - xr.lo) * (W - left - right); }
  double py(double y) const { return H - bottom - (y - yr.lo) / (yr.hi - yr.lo) * (H - top - bottom); }
};

inline Frame frame_for(const Chart& c) {
  Frame f;
  if (c.kind == Chart::Kind::line) {
    for (const auto& s : c.series) {
      for (double v : s.x) f.xr.add(v);
      for (double v : s.y) f.yr.add(v);
    }
  } else {
    f.xr.add(0);
    f.xr.add(double(c.bar_values.size()));
    f.yr.add(0);
    for (double v : c.bar_values) f.yr.add(v);
    f.right = 20;
    f.bottom = 110;
  }
  f.xr.settle();
  f.yr.settle();
  return f;
}

// 3x5 glyphs for tick labels in raster output.
inline const unsigned char* glyph(char c) {
  static const unsigned char digits[10][5] = {
      {7, 5, 5, 5, 7}, {2, 6, 2, 2, 7}, {7, 1, 7, 4, 7}, {7, 1, 7, 1, 7}, {5, 5, 7, 1, 1},
      {7, 4, 7, 1, 7}, {7, 4, 7, 5, 7}, {7, 1, 1, 1, 1}, {7, 5, 7, 5, 7}, {7, 5, 7, 1, 7}};
  static const unsigned char dot[5] = {0, 0, 0, 0, 2}, minus[5] = {0, 0, 7, 0, 0},
                             e[5] = {0, 7, 7, 4, 7}, plus[5] = {0, 2, 7, 2, 0};
  if (c >= '0' && c <= '9') return digits[c - '0'];
  if (c == '.') return dot;
  if (c == '-') return minus;
  if (c == 'e') return e;
  if (c == '+') return plus;
  return nullptr;
}

class Canvas {
 public:
  Canvas(int w, int h) : r_{w, h, 3, std::vector<unsigned char>(std::size_t(w) * h * 3, 255)} {}
  void put(int x, int y, const std::array<unsigned char, 3>& c) {
    if (x < 0 || y < 0 || x >= r_.width || y >= r_.height) return;
    for (int k = 0; k < 3; ++k) r_.at(x, y, k) = c[std::size_t(k)];
  }
  void line(double x0, double y0, double x1, double y1, const std::array<unsigned char, 3>& c,
            int thick = 1) {
    const int n = int(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
    for (int i = 0; i <= n; ++i) {
      const double t = double(i) / n;
      const int x = int(std::lround(x0 + t * (x1 - x0))), y = int(std::lround(y0 + t * (y1 - y0)));
      for (int dy = -(thick / 2); dy <= thick / 2; ++dy)
        for (int dx = -(thick / 2); dx <= thick / 2; ++dx) put(x + dx, y + dy, c);
    }
  }
  void rect(int x0, int y0, int x1, int y1, const std::array<unsigned char, 3>& c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) put(x, y, c);
  }
  void text(int x, int y, const std::string& s, const std::array<unsigned char, 3>& c) {
    for (char ch : s) {
      if (const unsigned char* g = glyph(ch))
        for (int r = 0; r < 5; ++r)
          for (int b = 0; b < 3; ++b)
            if (g[r] & (4 >> b)) rect(x + 2 * b, y + 2 * r, x + 2 * b + 1, y + 2 * r + 1, c);
      x += 8;
    }
  }
  const Raster& raster() const { return r_; }

 private:
  Raster r_;
};

}  // namespace detail

inline std::string render_svg(const Chart& c) {
  using namespace detail;
  const Frame f = frame_for(c);
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << f.W << "\" height=\"" << f.H
    << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<text x=\"" << f.W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">"
    << xml_escape(c.title) << "</text>\n";
  const double x0 = f.left, x1 = f.W - f.right, y0 = f.top, y1 = f.H - f.bottom;
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.yr.lo + (f.yr.hi - f.yr.lo) * i / 4.0;
    o << "<line x1=\"" << x0 << "\" x2=\"" << x1 << "\" y1=\"" << f.py(yv) << "\" y2=\"" << f.py(yv)
      << "\" stroke=\"#ddd\"/>\n";
    o << "<text x=\"" << x0 - 6 << "\" y=\"" << f.py(yv) + 4 << "\" text-anchor=\"end\">" << fmt(yv)
      << "</text>\n";
  }
  o << "<line x1=\"" << x0 << "\" x2=\"" << x0 << "\" y1=\"" << y0 << "\" y2=\"" << y1
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << x0 << "\" x2=\"" << x1 << "\" y1=\"" << y1 << "\" y2=\"" << y1
    << "\" stroke=\"black\"/>\n";
  if (c.kind == Chart::Kind::line) {
    for (int i = 0; i <= 4; ++i) {
      const double xv = f.xr.lo + (f.xr.hi - f.xr.lo) * i / 4.0;
      o << "<text x=\"" << f.px(xv) << "\" y=\"" << y1 + 16 << "\" text-anchor=\"middle\">" << fmt(xv)
        << "</text>\n";
    }
    for (std::size_t s = 0; s < c.series.size(); ++s) {
      const auto& se = c.series[s];
      o << "<polyline fill=\"none\" stroke=\"" << hex_color(s) << "\" stroke-width=\"2\" points=\"";
      for (std::size_t i = 0; i < se.x.size(); ++i) o << f.px(se.x[i]) << "," << f.py(se.y[i]) << " ";
      o << "\"/>\n";
      for (std::size_t i = 0; i < se.x.size(); ++i)
        o << "<circle cx=\"" << f.px(se.x[i]) << "\" cy=\"" << f.py(se.y[i]) << "\" r=\"2.5\" fill=\""
          << hex_color(s) << "\"/>\n";
      const double ly = y0 + 16.0 * double(s);
      o << "<line x1=\"" << x1 + 10 << "\" x2=\"" << x1 + 28 << "\" y1=\"" << ly << "\" y2=\"" << ly
        << "\" stroke=\"" << hex_color(s) << "\" stroke-width=\"2\"/>\n";
      o << "<text x=\"" << x1 + 32 << "\" y=\"" << ly + 4 << "\">" << xml_escape(se.name) << "</text>\n";
    }
  } else {
    for (std::size_t i = 0; i < c.bar_values.size(); ++i) {
      const double bx0 = f.px(double(i) + 0.15), bx1 = f.px(double(i) + 0.85);
      const double by = f.py(c.bar_values[i]), bz = f.py(std::max(0.0, f.yr.lo));
      o << "<rect x=\"" << bx0 << "\" y=\"" << std::min(by, bz) << "\" width=\"" << bx1 - bx0
        << "\" height=\"" << std::abs(bz - by) << "\" fill=\"" << hex_color(i) << "\"/>\n";
      const double cx = (bx0 + bx1) / 2;
      o << "<text transform=\"translate(" << cx << "," << y1 + 8 << ") rotate(45)\">"
        << xml_escape(i < c.bar_labels.size() ? c.bar_labels[i] : "") << "</text>\n";
    }
  }
  o << "<text x=\"" << (x0 + x1) / 2 << "\" y=\"" << f.H - 8 << "\" text-anchor=\"middle\">"
    << xml_escape(c.xlabel) << "</text>\n";
  o << "<text transform=\"translate(16," << (y0 + y1) / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
    << xml_escape(c.ylabel) << "</text>\n";
  o << "</svg>\n";
  return o.str();
}

inline Raster render_raster(const Chart& c) {
  using namespace detail;
  const Frame f = frame_for(c);
  Canvas cv(f.W, f.H);
  const std::array<unsigned char, 3> black{0, 0, 0}, grid{221, 221, 221};
  const double x0 = f.left, x1 = f.W - f.right, y0 = f.top, y1 = f.H - f.bottom;
  for (int i = 0; i <= 4; ++i) {
    const double yv = f.yr.lo + (f.yr.hi - f.yr.lo) * i / 4.0;
    cv.line(x0, f.py(yv), x1, f.py(yv), grid);
    const std::string s = fmt(yv);
    cv.text(int(x0) - 6 - 8 * int(s.size()), int(f.py(yv)) - 5, s, black);
  }
  cv.line(x0, y0, x0, y1, black);
  cv.line(x0, y1, x1, y1, black);
  if (c.kind == Chart::Kind::line) {
    for (int i = 0; i <= 4; ++i) {
      const double xv = f.xr.lo + (f.xr.hi - f.xr.lo) * i / 4.0;
      const std::string s = fmt(xv);
      cv.text(int(f.px(xv)) - 4 * int(s.size()), int(y1) + 6, s, black);
    }
    for (std::size_t s = 0; s < c.series.size(); ++s) {
      const auto& se = c.series[s];
      const auto col = kPalette[s % kPalette.size()];
      for (std::size_t i = 1; i < se.x.size(); ++i)
        cv.line(f.px(se.x[i - 1]), f.py(se.y[i - 1]), f.px(se.x[i]), f.py(se.y[i]), col, 2);
      const double ly = y0 + 16.0 * double(s);
      cv.line(x1 + 10, ly, x1 + 28, ly, col, 3);
    }
  } else {
    for (std::size_t i = 0; i < c.bar_values.size(); ++i) {
      const auto col = kPalette[i % kPalette.size()];
      cv.rect(int(f.px(double(i) + 0.15)), int(f.py(c.bar_values[i])), int(f.px(double(i) + 0.85)),
              int(f.py(std::max(0.0, f.yr.lo))), col);
    }
  }
  return cv.raster();
}

/// Writes `<stem>.svg` and `<stem>.png`.
inline void write_chart(const std::filesystem::path& stem, const Chart& c) {
  std::filesystem::path svg = stem, png = stem;
  svg += ".svg";
  png += ".png";
  {
    std::ofstream out(svg);
    if (!out) throw std::runtime_error("cannot write " + svg.string());
    out << render_svg(c);
  }
  write_png(png, render_raster(c));
}

}  // namespace cleandift
