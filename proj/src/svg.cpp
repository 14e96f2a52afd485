#include "gridflow/svg.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace gridflow::svg {

namespace {

constexpr double kWidth = 640, kHeight = 420;
constexpr double kLeft = 70, kRight = 150, kTop = 40, kBottom = 50;
const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.3g", v);
    return buf;
}

std::string escape(const std::string& text) {
    std::string out;
    for (char c : text) {
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

struct Scale {
    double lo = 0, hi = 1;
    bool log = false;
    double pixel_lo = 0, pixel_hi = 1;

    bool usable(double v) const { return std::isfinite(v) && (!log || v > 0); }
    double map(double v) const {
        const double t = log ? (std::log10(v) - std::log10(lo)) / (std::log10(hi) - std::log10(lo)) : (v - lo) / (hi - lo);
        return pixel_lo + t * (pixel_hi - pixel_lo);
    }
};

Scale fit(const std::vector<double>& values, bool log, double pixel_lo, double pixel_hi) {
    Scale s;
    s.log = log;
    s.pixel_lo = pixel_lo;
    s.pixel_hi = pixel_hi;
    double lo = std::numeric_limits<double>::infinity(), hi = -lo;
    for (double v : values) {
        if (!s.usable(v)) continue;
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (!std::isfinite(lo)) {
        lo = log ? 1.0 : 0.0;
        hi = log ? 10.0 : 1.0;
    }
    if (lo == hi) {
        if (log) {
            lo /= 2;
            hi *= 2;
        } else {
            lo -= 0.5 * std::max(1.0, std::fabs(lo));
            hi += 0.5 * std::max(1.0, std::fabs(hi));
        }
    } else if (!log) {
        const double pad = 0.05 * (hi - lo);
        lo -= pad;
        hi += pad;
    }
    s.lo = lo;
    s.hi = hi;
    return s;
}

void frame(std::ostringstream& out, const Axes& axes, const Scale& sx, const Scale& sy) {
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kWidth << "\" height=\"" << kHeight
        << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out << "<text x=\"" << num(kWidth / 2) << "\" y=\"22\" text-anchor=\"middle\" font-size=\"14\">" << escape(axes.title)
        << "</text>\n";
    const double x0 = kLeft, x1 = kWidth - kRight, y0 = kHeight - kBottom, y1 = kTop;
    out << "<rect x=\"" << x0 << "\" y=\"" << y1 << "\" width=\"" << x1 - x0 << "\" height=\"" << y0 - y1
        << "\" fill=\"none\" stroke=\"#444\"/>\n";
    for (int i = 0; i <= 4; ++i) {
        const double t = i / 4.0;
        const double xv = sx.log ? std::pow(10.0, std::log10(sx.lo) + t * (std::log10(sx.hi) - std::log10(sx.lo)))
                                 : sx.lo + t * (sx.hi - sx.lo);
        const double yv = sy.log ? std::pow(10.0, std::log10(sy.lo) + t * (std::log10(sy.hi) - std::log10(sy.lo)))
                                 : sy.lo + t * (sy.hi - sy.lo);
        out << "<text x=\"" << num(sx.map(xv)) << "\" y=\"" << num(y0 + 16) << "\" text-anchor=\"middle\">" << tick(xv)
            << "</text>\n";
        out << "<text x=\"" << num(x0 - 6) << "\" y=\"" << num(sy.map(yv) + 4) << "\" text-anchor=\"end\">" << tick(yv)
            << "</text>\n";
    }
    out << "<text x=\"" << num((x0 + x1) / 2) << "\" y=\"" << num(kHeight - 12) << "\" text-anchor=\"middle\">"
        << escape(axes.x_label) << "</text>\n";
    out << "<text x=\"16\" y=\"" << num((y0 + y1) / 2) << "\" text-anchor=\"middle\" transform=\"rotate(-90 16 "
        << num((y0 + y1) / 2) << ")\">" << escape(axes.y_label) << "</text>\n";
}

}  // namespace

std::string line_chart(const Axes& axes, const std::vector<Series>& series) {
    std::vector<double> xs, ys;
    for (const auto& s : series) {
        if (s.x.size() != s.y.size()) throw std::invalid_argument("svg: series '" + s.label + "' has mismatched x/y");
        xs.insert(xs.end(), s.x.begin(), s.x.end());
        ys.insert(ys.end(), s.y.begin(), s.y.end());
        ys.insert(ys.end(), s.lower.begin(), s.lower.end());
        ys.insert(ys.end(), s.upper.begin(), s.upper.end());
    }
    const auto sx = fit(xs, axes.log_x, kLeft, kWidth - kRight);
    const auto sy = fit(ys, axes.log_y, kHeight - kBottom, kTop);
    std::ostringstream out;
    frame(out, axes, sx, sy);
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        const char* color = kColors[k % std::size(kColors)];
        if (s.lower.size() == s.x.size() && s.upper.size() == s.x.size() && !s.x.empty()) {
            out << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
            for (std::size_t i = 0; i < s.x.size(); ++i) {
                if (sx.usable(s.x[i]) && sy.usable(s.upper[i])) out << num(sx.map(s.x[i])) << ',' << num(sy.map(s.upper[i])) << ' ';
            }
            for (std::size_t i = s.x.size(); i-- > 0;) {
                if (sx.usable(s.x[i]) && sy.usable(s.lower[i])) out << num(sx.map(s.x[i])) << ',' << num(sy.map(s.lower[i])) << ' ';
            }
            out << "\"/>\n";
        }
        out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            if (sx.usable(s.x[i]) && sy.usable(s.y[i])) out << num(sx.map(s.x[i])) << ',' << num(sy.map(s.y[i])) << ' ';
        }
        out << "\"/>\n";
        const double ly = kTop + 14.0 * static_cast<double>(k) + 8;
        out << "<line x1=\"" << num(kWidth - kRight + 10) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(kWidth - kRight + 28)
            << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "<text x=\"" << num(kWidth - kRight + 32) << "\" y=\"" << num(ly + 4) << "\">" << escape(s.label) << "</text>\n";
    }
    out << "</svg>\n";
    return out.str();
}

std::string scatter(const Axes& axes, const std::vector<Point>& points) {
    std::vector<double> xs, ys;
    for (const auto& p : points) {
        xs.push_back(p.x);
        ys.push_back(p.y);
    }
    const auto sx = fit(xs, axes.log_x, kLeft, kWidth - kRight);
    const auto sy = fit(ys, axes.log_y, kHeight - kBottom, kTop);
    std::ostringstream out;
    frame(out, axes, sx, sy);
    for (std::size_t k = 0; k < points.size(); ++k) {
        const auto& p = points[k];
        if (!sx.usable(p.x) || !sy.usable(p.y)) continue;
        const char* color = kColors[k % std::size(kColors)];
        out << "<circle cx=\"" << num(sx.map(p.x)) << "\" cy=\"" << num(sy.map(p.y)) << "\" r=\"5\" stroke=\"" << color
            << "\" fill=\"" << (p.highlight ? color : "white") << "\"/>\n";
        out << "<text x=\"" << num(sx.map(p.x) + 8) << "\" y=\"" << num(sy.map(p.y) - 6) << "\">" << escape(p.label)
            << "</text>\n";
    }
    out << "</svg>\n";
    return out.str();
}

void write(const std::filesystem::path& path, const std::string& document) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << document;
}

}  // namespace gridflow::svg
