#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace kest {

struct PlotSeries {
  std::string name;
  std::vector<double> x;
  std::vector<double> y;
  std::vector<double> error;  // optional symmetric error bars
};

struct PlotSpec {
  std::string title;
  std::string x_label;
  std::string y_label;
  std::vector<PlotSeries> series;
};

/// Static SVG line chart (markers, optional error bars, legend).
std::string render_line_plot(const PlotSpec& plot);
void write_line_plot(const std::filesystem::path& path, const PlotSpec& plot);

}  // namespace kest
