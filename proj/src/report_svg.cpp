#include "instformer/cli/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

#include "instformer/core/errors.hpp"

namespace instformer::cli {

namespace {

constexpr int kWidth = 520;
constexpr int kHeight = 340;
constexpr int kMargin = 52;

const char* kPalette[] = {"#2b6cb0", "#c05621", "#2f855a", "#9b2c2c", "#6b46c1", "#4a5568"};

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(4);
  ss << v;
  return ss.str();
}

void open_svg(std::ostream& out, const std::string& title) {
  out << "<svg xmlns='http://www.w3.org/2000/svg' width='" << kWidth << "' height='" << kHeight << "'>\n";
  out << "<rect width='100%' height='100%' fill='white'/>\n";
  out << "<text x='" << kWidth / 2 << "' y='20' text-anchor='middle' font-size='14' font-family='sans-serif'>"
      << title << "</text>\n";
}

}  // namespace

void write_line_chart_svg(const std::string& path, const std::string& title, const std::string& x_label,
                          const std::string& y_label, const std::vector<Series>& series) {
  std::ofstream out(path);
  if (!out) throw core::IoError("cannot write chart: " + path);

  double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
  bool first = true;
  for (const auto& s : series) {
    for (auto [x, y] : s.points) {
      if (first) {
        x0 = x1 = x;
        y0 = y1 = y;
        first = false;
      }
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 <= x0) x1 = x0 + 1;
  if (y1 <= y0) y1 = y0 + 1;
  y0 = std::min(y0, 0.0);

  auto px = [&](double x) { return kMargin + (x - x0) / (x1 - x0) * (kWidth - 2 * kMargin); };
  auto py = [&](double y) { return kHeight - kMargin - (y - y0) / (y1 - y0) * (kHeight - 2 * kMargin); };

  open_svg(out, title);
  out << "<line x1='" << kMargin << "' y1='" << kHeight - kMargin << "' x2='" << kWidth - kMargin << "' y2='"
      << kHeight - kMargin << "' stroke='black'/>\n";
  out << "<line x1='" << kMargin << "' y1='" << kMargin / 2 + 10 << "' x2='" << kMargin << "' y2='"
      << kHeight - kMargin << "' stroke='black'/>\n";
  for (int i = 0; i <= 4; ++i) {
    double xv = x0 + (x1 - x0) * i / 4.0;
    double yv = y0 + (y1 - y0) * i / 4.0;
    out << "<text x='" << px(xv) << "' y='" << kHeight - kMargin + 16
        << "' text-anchor='middle' font-size='10' font-family='sans-serif'>" << fmt(xv) << "</text>\n";
    out << "<text x='" << kMargin - 6 << "' y='" << py(yv) + 3
        << "' text-anchor='end' font-size='10' font-family='sans-serif'>" << fmt(yv) << "</text>\n";
  }
  out << "<text x='" << kWidth / 2 << "' y='" << kHeight - 8
      << "' text-anchor='middle' font-size='11' font-family='sans-serif'>" << x_label << "</text>\n";
  out << "<text x='14' y='" << kHeight / 2 << "' font-size='11' font-family='sans-serif' transform='rotate(-90 14 "
      << kHeight / 2 << ")' text-anchor='middle'>" << y_label << "</text>\n";

  int color = 0;
  for (const auto& s : series) {
    if (s.points.empty()) continue;
    out << "<polyline fill='none' stroke='" << kPalette[color % 6] << "' stroke-width='1.5' points='";
    for (auto [x, y] : s.points) out << px(x) << "," << py(y) << " ";
    out << "'/>\n";
    out << "<text x='" << kWidth - kMargin << "' y='" << kMargin / 2 + 14 * color
        << "' text-anchor='end' font-size='11' font-family='sans-serif' fill='" << kPalette[color % 6] << "'>"
        << s.label << "</text>\n";
    ++color;
  }
  out << "</svg>\n";
}

void write_bar_chart_svg(const std::string& path, const std::string& title,
                         const std::vector<std::pair<std::string, double>>& bars) {
  std::ofstream out(path);
  if (!out) throw core::IoError("cannot write chart: " + path);
  double top = 0.0;
  for (const auto& [label, v] : bars) top = std::max(top, v);
  if (top <= 0) top = 1.0;

  open_svg(out, title);
  const double plot_w = kWidth - 2 * kMargin;
  const double plot_h = kHeight - 2 * kMargin;
  const double slot = bars.empty() ? plot_w : plot_w / double(bars.size());
  out << "<line x1='" << kMargin << "' y1='" << kHeight - kMargin << "' x2='" << kWidth - kMargin << "' y2='"
      << kHeight - kMargin << "' stroke='black'/>\n";
  for (size_t i = 0; i < bars.size(); ++i) {
    double h = bars[i].second / top * plot_h;
    double x = kMargin + slot * double(i) + slot * 0.15;
    out << "<rect x='" << x << "' y='" << kHeight - kMargin - h << "' width='" << slot * 0.7 << "' height='" << h
        << "' fill='" << kPalette[i % 6] << "'/>\n";
    out << "<text x='" << x + slot * 0.35 << "' y='" << kHeight - kMargin + 14
        << "' text-anchor='middle' font-size='10' font-family='sans-serif'>" << bars[i].first << "</text>\n";
    out << "<text x='" << x + slot * 0.35 << "' y='" << kHeight - kMargin - h - 4
        << "' text-anchor='middle' font-size='10' font-family='sans-serif'>" << fmt(bars[i].second)
        << "</text>\n";
  }
  out << "</svg>\n";
}

}  // namespace instformer::cli
