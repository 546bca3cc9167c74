#pragma once
// Minimal SVG charts. Output depends only on the data: fixed precision, no
// timestamps, no generator metadata.

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace cptlab {

struct Series {
    std::string label;
    std::vector<double> y;  // one value per x; NaN leaves a gap
};

struct Panel {
    std::string title;
    std::string x_label;
    std::vector<double> x;
    std::vector<Series> series;
    std::optional<double> y_min, y_max;  // autoscaled when absent
};

/// Panels side by side, one shared legend.
std::string line_chart_svg(const std::string& title, std::span<const Panel> panels);

struct Heatmap {
    std::string title;
    std::vector<std::string> rows;
    std::vector<std::string> cols;
    std::vector<std::vector<double>> values;  // rows x cols
    double lo = 0.0, hi = 1.0;
    int split_after = -1;  // draw a rule below this row
};

std::string heatmap_svg(const Heatmap& h);

}  // namespace cptlab
