#pragma once

// Bare-bones SVG line charts for the experiment outputs.

#include <string>
#include <utility>
#include <vector>

namespace tseg::svg {

struct Series {
  std::string name;
  std::vector<std::pair<double, double>> points;
  bool markers = true;
  bool dashed = false;
};

struct LinePlot {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<Series> series;
  std::vector<double> h_lines;  // dotted reference lines, e.g. y = 0
  // Axis ranges; computed from the data when lo == hi.
  double x_lo = 0.0, x_hi = 0.0;
  double y_lo = 0.0, y_hi = 0.0;
  int width = 640;
  int height = 420;
};

std::string render(const LinePlot& plot);
void write(const std::string& path, const LinePlot& plot);

}  // namespace tseg::svg
