#include "tseg/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

#include "tseg/common.hpp"

namespace tseg::svg {
namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e",
                                    "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"};

std::string esc(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", v);
  return buf;
}

std::string tick_label(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", std::abs(v) < 1e-12 ? 0.0 : v);
  return buf;
}

// 1, 2 or 5 times a power of ten, giving about five ticks.
double tick_step(double span) {
  const double raw = span / 5.0;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0}) {
    if (m * mag >= raw) return m * mag;
  }
  return 10.0 * mag;
}

void fit_range(double& lo, double& hi, bool pad) {
  if (hi - lo < 1e-12) {
    lo -= 0.5;
    hi += 0.5;
  } else if (pad) {
    const double p = 0.05 * (hi - lo);
    lo -= p;
    hi += p;
  }
}

}  // namespace

std::string render(const LinePlot& plot) {
  double x_lo = plot.x_lo, x_hi = plot.x_hi, y_lo = plot.y_lo, y_hi = plot.y_hi;
  const bool auto_x = x_lo == x_hi;
  const bool auto_y = y_lo == y_hi;
  if (auto_x || auto_y) {
    double ax = std::numeric_limits<double>::infinity(), bx = -ax, ay = ax, by = -ax;
    for (const auto& s : plot.series) {
      for (const auto& [x, y] : s.points) {
        if (!std::isfinite(x) || !std::isfinite(y)) continue;
        ax = std::min(ax, x);
        bx = std::max(bx, x);
        ay = std::min(ay, y);
        by = std::max(by, y);
      }
    }
    for (double h : plot.h_lines) {
      ay = std::min(ay, h);
      by = std::max(by, h);
    }
    if (!std::isfinite(ax)) ax = bx = ay = by = 0.0;
    if (auto_x) {
      x_lo = ax;
      x_hi = bx;
      fit_range(x_lo, x_hi, false);
    }
    if (auto_y) {
      y_lo = ay;
      y_hi = by;
      fit_range(y_lo, y_hi, true);
    }
  }

  const double left = 70, right = 170, top = 40, bottom = 55;
  const double pw = plot.width - left - right;
  const double ph = plot.height - top - bottom;
  auto px = [&](double x) { return left + (x - x_lo) / (x_hi - x_lo) * pw; };
  auto py = [&](double y) { return top + (1.0 - (y - y_lo) / (y_hi - y_lo)) * ph; };

  std::string o;
  o += "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(plot.width) +
       "\" height=\"" + std::to_string(plot.height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o += "<text x=\"" + fmt(left + pw / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" +
       esc(plot.title) + "</text>\n";

  const double xs = tick_step(x_hi - x_lo);
  for (double t = std::ceil(x_lo / xs) * xs; t <= x_hi + 1e-9 * xs; t += xs) {
    o += "<line x1=\"" + fmt(px(t)) + "\" y1=\"" + fmt(top) + "\" x2=\"" + fmt(px(t)) + "\" y2=\"" +
         fmt(top + ph) + "\" stroke=\"#eee\"/>\n";
    o += "<text x=\"" + fmt(px(t)) + "\" y=\"" + fmt(top + ph + 16) +
         "\" text-anchor=\"middle\">" + tick_label(t) + "</text>\n";
  }
  const double ys = tick_step(y_hi - y_lo);
  for (double t = std::ceil(y_lo / ys) * ys; t <= y_hi + 1e-9 * ys; t += ys) {
    o += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(py(t)) + "\" x2=\"" + fmt(left + pw) +
         "\" y2=\"" + fmt(py(t)) + "\" stroke=\"#eee\"/>\n";
    o += "<text x=\"" + fmt(left - 6) + "\" y=\"" + fmt(py(t) + 4) + "\" text-anchor=\"end\">" +
         tick_label(t) + "</text>\n";
  }
  o += "<rect x=\"" + fmt(left) + "\" y=\"" + fmt(top) + "\" width=\"" + fmt(pw) + "\" height=\"" +
       fmt(ph) + "\" fill=\"none\" stroke=\"black\"/>\n";
  o += "<text x=\"" + fmt(left + pw / 2) + "\" y=\"" + fmt(plot.height - 12.0) +
       "\" text-anchor=\"middle\">" + esc(plot.x_label) + "</text>\n";
  o += "<text transform=\"translate(18 " + fmt(top + ph / 2) +
       ") rotate(-90)\" text-anchor=\"middle\">" + esc(plot.y_label) + "</text>\n";

  for (double h : plot.h_lines) {
    if (h < y_lo || h > y_hi) continue;
    o += "<line x1=\"" + fmt(left) + "\" y1=\"" + fmt(py(h)) + "\" x2=\"" + fmt(left + pw) +
         "\" y2=\"" + fmt(py(h)) + "\" stroke=\"black\" stroke-dasharray=\"2 3\"/>\n";
  }

  for (std::size_t i = 0; i < plot.series.size(); ++i) {
    const auto& s = plot.series[i];
    const char* color = kPalette[i % std::size(kPalette)];
    std::string pts;
    for (const auto& [x, y] : s.points) {
      if (!std::isfinite(x) || !std::isfinite(y)) continue;
      pts += fmt(px(x)) + "," + fmt(py(std::clamp(y, y_lo, y_hi))) + " ";
    }
    if (!pts.empty()) pts.pop_back();
    o += "<polyline fill=\"none\" stroke=\"" + std::string(color) + "\" stroke-width=\"1.8\"";
    if (s.dashed) o += " stroke-dasharray=\"6 4\"";
    o += " points=\"" + pts + "\"/>\n";
    if (s.markers) {
      for (const auto& [x, y] : s.points) {
        if (!std::isfinite(x) || !std::isfinite(y)) continue;
        o += "<circle cx=\"" + fmt(px(x)) + "\" cy=\"" + fmt(py(std::clamp(y, y_lo, y_hi))) +
             "\" r=\"2.5\" fill=\"" + color + "\"/>\n";
      }
    }
    const double ly = top + 10 + 18.0 * static_cast<double>(i);
    o += "<line x1=\"" + fmt(left + pw + 12) + "\" y1=\"" + fmt(ly) + "\" x2=\"" +
         fmt(left + pw + 32) + "\" y2=\"" + fmt(ly) + "\" stroke=\"" + color +
         "\" stroke-width=\"2\"/>\n";
    o += "<text x=\"" + fmt(left + pw + 38) + "\" y=\"" + fmt(ly + 4) + "\">" + esc(s.name) +
         "</text>\n";
  }
  o += "</svg>\n";
  return o;
}

void write(const std::string& path, const LinePlot& plot) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot write " + path);
  f << render(plot);
}

}  // namespace tseg::svg
