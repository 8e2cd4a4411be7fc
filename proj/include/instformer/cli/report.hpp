#pragma once

#include <string>
#include <utility>
#include <vector>

namespace instformer::cli {

struct Series {
  std::string label;
  std::vector<std::pair<double, double>> points;  // x, y
};

// Minimal static SVG plots for the report command.
void write_line_chart_svg(const std::string& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series);
void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<std::pair<std::string, double>>& bars);

}  // namespace instformer::cli
