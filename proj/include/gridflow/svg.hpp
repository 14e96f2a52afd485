#pragma once

#include <filesystem>
#include <string>
#include <vector>

namespace gridflow::svg {

struct Series {
    std::string label;
    std::vector<double> x;
    std::vector<double> y;
    // Optional shaded band (same length as x), e.g. min/max over seeds.
    std::vector<double> lower;
    std::vector<double> upper;
};

struct Point {
    std::string label;
    double x = 0.0;
    double y = 0.0;
    bool highlight = false;
};

struct Axes {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
    bool log_y = false;
};

// Polyline chart; non-positive values are dropped on log axes.
std::string line_chart(const Axes& axes, const std::vector<Series>& series);
// Labelled scatter; highlighted points are filled.
std::string scatter(const Axes& axes, const std::vector<Point>& points);

void write(const std::filesystem::path& path, const std::string& document);

}  // namespace gridflow::svg
