#pragma once

// Line charts for loss logs and ROC/PR curves: SVG with labels, PNG without text.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <string>
#include <vector>

#include "onenip/image.hpp"

namespace onenip {

struct Series {
    std::string name;
    std::vector<double> x, y;
};

struct PlotSpec {
    std::string title, x_label, y_label;
    bool fixed_unit_range = false;  // both axes span [0, 1] (curves)
    bool log_y = false;
};

namespace detail {

inline constexpr std::array<std::array<float, 3>, 6> kPalette{{{0.12f, 0.47f, 0.71f},
                                                                {1.00f, 0.50f, 0.05f},
                                                                {0.17f, 0.63f, 0.17f},
                                                                {0.84f, 0.15f, 0.16f},
                                                                {0.58f, 0.40f, 0.74f},
                                                                {0.55f, 0.34f, 0.29f}}};

struct Bounds {
    double x0 = 0, x1 = 1, y0 = 0, y1 = 1;
};

inline double plot_y(double v, const PlotSpec& spec) { return spec.log_y ? std::log10(std::max(v, 1e-12)) : v; }

inline Bounds plot_bounds(const std::vector<Series>& series, const PlotSpec& spec) {
    Bounds b;
    if (spec.fixed_unit_range) return b;
    bool first = true;
    for (const auto& s : series)
        for (std::size_t i = 0; i < s.x.size(); ++i) {
            const double x = s.x[i], y = plot_y(s.y[i], spec);
            if (!std::isfinite(y)) continue;
            if (first) {
                b = {x, x, y, y};
                first = false;
            }
            b.x0 = std::min(b.x0, x);
            b.x1 = std::max(b.x1, x);
            b.y0 = std::min(b.y0, y);
            b.y1 = std::max(b.y1, y);
        }
    if (b.x1 <= b.x0) b.x1 = b.x0 + 1;
    if (b.y1 <= b.y0) b.y1 = b.y0 + 1;
    return b;
}

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

inline std::string hex(const std::array<float, 3>& c) {
    char buf[8];
    std::snprintf(buf, sizeof buf, "#%02x%02x%02x", static_cast<int>(c[0] * 255), static_cast<int>(c[1] * 255),
                  static_cast<int>(c[2] * 255));
    return buf;
}

}  // namespace detail

inline std::string svg_plot(const std::vector<Series>& series, const PlotSpec& spec, int width = 640, int height = 420) {
    const detail::Bounds b = detail::plot_bounds(series, spec);
    const double left = 70, right = width - 150, top = 40, bottom = height - 50;
    auto px = [&](double x) { return left + (x - b.x0) / (b.x1 - b.x0) * (right - left); };
    auto py = [&](double y) { return bottom - (detail::plot_y(y, spec) - b.y0) / (b.y1 - b.y0) * (bottom - top); };
    std::string out = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(width) + "\" height=\"" +
                      std::to_string(height) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    out += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    out += "<text x=\"" + detail::num(width / 2.0) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + spec.title + "</text>\n";
    out += "<rect x=\"" + detail::num(left) + "\" y=\"" + detail::num(top) + "\" width=\"" + detail::num(right - left) +
           "\" height=\"" + detail::num(bottom - top) + "\" fill=\"none\" stroke=\"black\"/>\n";
    const std::string ylo = spec.log_y ? "1e" + detail::num(b.y0) : detail::num(b.y0);
    const std::string yhi = spec.log_y ? "1e" + detail::num(b.y1) : detail::num(b.y1);
    out += "<text x=\"" + detail::num(left - 6) + "\" y=\"" + detail::num(bottom) + "\" text-anchor=\"end\">" + ylo + "</text>\n";
    out += "<text x=\"" + detail::num(left - 6) + "\" y=\"" + detail::num(top + 10) + "\" text-anchor=\"end\">" + yhi + "</text>\n";
    out += "<text x=\"" + detail::num(left) + "\" y=\"" + detail::num(bottom + 16) + "\" text-anchor=\"middle\">" + detail::num(b.x0) + "</text>\n";
    out += "<text x=\"" + detail::num(right) + "\" y=\"" + detail::num(bottom + 16) + "\" text-anchor=\"middle\">" + detail::num(b.x1) + "</text>\n";
    out += "<text x=\"" + detail::num((left + right) / 2) + "\" y=\"" + detail::num(height - 12.0) + "\" text-anchor=\"middle\">" +
           spec.x_label + "</text>\n";
    out += "<text transform=\"translate(16," + detail::num((top + bottom) / 2) + ") rotate(-90)\" text-anchor=\"middle\">" +
           spec.y_label + "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const std::string color = detail::hex(detail::kPalette[k % detail::kPalette.size()]);
        out += "<polyline fill=\"none\" stroke=\"" + color + "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[k].x.size(); ++i) {
            const double y = py(series[k].y[i]);
            if (std::isfinite(y)) out += detail::num(px(series[k].x[i])) + "," + detail::num(y) + " ";
        }
        out += "\"/>\n";
        const double ly = top + 14 + 18.0 * static_cast<double>(k);
        out += "<line x1=\"" + detail::num(right + 10) + "\" y1=\"" + detail::num(ly - 4) + "\" x2=\"" + detail::num(right + 30) +
               "\" y2=\"" + detail::num(ly - 4) + "\" stroke=\"" + color + "\" stroke-width=\"2\"/>\n";
        out += "<text x=\"" + detail::num(right + 36) + "\" y=\"" + detail::num(ly) + "\">" + series[k].name + "</text>\n";
    }
    out += "</svg>\n";
    return out;
}

// Same chart rasterized: frame, series polylines and legend swatches in series order.
inline Image png_plot(const std::vector<Series>& series, const PlotSpec& spec, std::size_t width = 640, std::size_t height = 420) {
    Image img(height, width, 1.f);
    const detail::Bounds b = detail::plot_bounds(series, spec);
    const double left = 40, right = static_cast<double>(width) - 60, top = 20, bottom = static_cast<double>(height) - 30;
    auto dot = [&](long x, long y, const std::array<float, 3>& c) {
        for (long dy = 0; dy < 2; ++dy)
            for (long dx = 0; dx < 2; ++dx) {
                const long yy = y + dy, xx = x + dx;
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(height) || xx >= static_cast<long>(width)) continue;
                for (std::size_t ch = 0; ch < 3; ++ch) img.at(static_cast<std::size_t>(yy), static_cast<std::size_t>(xx), ch) = c[ch];
            }
    };
    auto line = [&](double x0, double y0, double x1, double y1, const std::array<float, 3>& c) {
        const int steps = static_cast<int>(std::max(std::abs(x1 - x0), std::abs(y1 - y0))) + 1;
        for (int i = 0; i <= steps; ++i) {
            const double t = static_cast<double>(i) / steps;
            dot(std::lround(x0 + t * (x1 - x0)), std::lround(y0 + t * (y1 - y0)), c);
        }
    };
    const std::array<float, 3> black{0.f, 0.f, 0.f};
    line(left, top, right, top, black);
    line(left, bottom, right, bottom, black);
    line(left, top, left, bottom, black);
    line(right, top, right, bottom, black);
    auto px = [&](double x) { return left + (x - b.x0) / (b.x1 - b.x0) * (right - left); };
    auto py = [&](double y) { return bottom - (detail::plot_y(y, spec) - b.y0) / (b.y1 - b.y0) * (bottom - top); };
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& c = detail::kPalette[k % detail::kPalette.size()];
        for (std::size_t i = 1; i < series[k].x.size(); ++i) {
            const double y0 = py(series[k].y[i - 1]), y1 = py(series[k].y[i]);
            if (std::isfinite(y0) && std::isfinite(y1)) line(px(series[k].x[i - 1]), y0, px(series[k].x[i]), y1, c);
        }
        const double ly = top + 10 + 14.0 * static_cast<double>(k);
        for (int d = 0; d < 8; ++d) line(right + 12, ly + d, right + 40, ly + d, c);
    }
    return img;
}

}  // namespace onenip
