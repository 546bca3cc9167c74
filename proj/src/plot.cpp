#include "cptlab/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "cptlab/common.hpp"

namespace cptlab {

namespace {

constexpr const char* kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f", v);
    return buf;
}

std::string tick(double v) {
    char buf[32];
    const double a = std::fabs(v);
    if (a != 0.0 && (a >= 1e4 || a < 1e-2)) {
        std::snprintf(buf, sizeof buf, "%.1e", v);
    } else if (a >= 100) {
        std::snprintf(buf, sizeof buf, "%.0f", v);
    } else {
        std::snprintf(buf, sizeof buf, "%.2f", v);
    }
    return buf;
}

std::string escape(const std::string& s) {
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

std::string text(double x, double y, const std::string& s, const char* anchor = "middle", int size = 11) {
    return "<text x=\"" + px(x) + "\" y=\"" + px(y) + "\" font-size=\"" + std::to_string(size) +
           "\" text-anchor=\"" + anchor + "\">" + escape(s) + "</text>\n";
}

std::string header(double w, double h) {
    return "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(w) + "\" height=\"" + px(h) +
           "\" viewBox=\"0 0 " + px(w) + " " + px(h) + "\" font-family=\"sans-serif\">\n" +
           "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
}

}  // namespace

std::string line_chart_svg(const std::string& title, std::span<const Panel> panels) {
    if (panels.empty()) {
        throw ConfigError("line chart needs at least one panel");
    }
    const double pw = 300, ph = 220, ml = 50, mr = 15, mt = 40, mb = 40;
    std::vector<std::string> labels;
    for (const Panel& p : panels) {
        for (const Series& s : p.series) {
            if (std::find(labels.begin(), labels.end(), s.label) == labels.end()) {
                labels.push_back(s.label);
            }
        }
    }
    const double legend_h = 18.0 * static_cast<double>((labels.size() + 3) / 4) + 10;
    const double width = static_cast<double>(panels.size()) * (pw + ml + mr);
    const double height = mt + ph + mb + legend_h;
    std::ostringstream os;
    os << header(width, height);
    os << text(width / 2, 18, title, "middle", 14);

    for (std::size_t pi = 0; pi < panels.size(); ++pi) {
        const Panel& p = panels[pi];
        const double x0 = static_cast<double>(pi) * (pw + ml + mr) + ml;
        const double y0 = mt;
        double xmin = p.x.empty() ? 0.0 : *std::min_element(p.x.begin(), p.x.end());
        double xmax = p.x.empty() ? 1.0 : *std::max_element(p.x.begin(), p.x.end());
        if (xmax <= xmin) {
            xmax = xmin + 1;
        }
        double ymin = INFINITY, ymax = -INFINITY;
        for (const Series& s : p.series) {
            for (double v : s.y) {
                if (std::isfinite(v)) {
                    ymin = std::min(ymin, v);
                    ymax = std::max(ymax, v);
                }
            }
        }
        if (!std::isfinite(ymin)) {
            ymin = 0;
            ymax = 1;
        }
        if (p.y_min) {
            ymin = *p.y_min;
        }
        if (p.y_max) {
            ymax = *p.y_max;
        }
        if (ymax <= ymin) {
            ymax = ymin + 1;
        }
        const auto sx = [&](double v) { return x0 + (v - xmin) / (xmax - xmin) * pw; };
        const auto sy = [&](double v) { return y0 + ph - (v - ymin) / (ymax - ymin) * ph; };

        os << "<rect x=\"" << px(x0) << "\" y=\"" << px(y0) << "\" width=\"" << px(pw) << "\" height=\"" << px(ph)
           << "\" fill=\"none\" stroke=\"#333\"/>\n";
        os << text(x0 + pw / 2, y0 - 6, p.title, "middle", 12);
        for (int i = 0; i <= 4; ++i) {
            const double v = ymin + (ymax - ymin) * i / 4.0;
            os << "<line x1=\"" << px(x0) << "\" x2=\"" << px(x0 + pw) << "\" y1=\"" << px(sy(v)) << "\" y2=\""
               << px(sy(v)) << "\" stroke=\"#ddd\"/>\n";
            os << text(x0 - 4, sy(v) + 4, tick(v), "end", 10);
        }
        const int xticks = std::min<int>(static_cast<int>(p.x.size()), 6);
        for (int i = 0; i < xticks; ++i) {
            const double v = xticks == 1 ? xmin : xmin + (xmax - xmin) * i / (xticks - 1);
            os << text(sx(v), y0 + ph + 14, tick(std::round(v * 100) / 100), "middle", 10);
        }
        os << text(x0 + pw / 2, y0 + ph + 30, p.x_label, "middle", 11);

        for (const Series& s : p.series) {
            const auto li = std::find(labels.begin(), labels.end(), s.label) - labels.begin();
            const char* colour = kPalette[static_cast<std::size_t>(li) % std::size(kPalette)];
            std::string path;
            bool pen = false;
            for (std::size_t i = 0; i < s.y.size() && i < p.x.size(); ++i) {
                if (!std::isfinite(s.y[i])) {
                    pen = false;
                    continue;
                }
                path += (pen ? " L" : " M") + px(sx(p.x[i])) + " " + px(sy(s.y[i]));
                pen = true;
            }
            if (!path.empty()) {
                os << "<path d=\"" << path.substr(1) << "\" fill=\"none\" stroke=\"" << colour
                   << "\" stroke-width=\"1.5\"/>\n";
            }
        }
    }

    for (std::size_t i = 0; i < labels.size(); ++i) {
        const double lx = 20 + static_cast<double>(i % 4) * 220;
        const double ly = mt + ph + mb + 14 + 18.0 * static_cast<double>(i / 4);
        os << "<line x1=\"" << px(lx) << "\" x2=\"" << px(lx + 20) << "\" y1=\"" << px(ly - 4) << "\" y2=\""
           << px(ly - 4) << "\" stroke=\"" << kPalette[i % std::size(kPalette)] << "\" stroke-width=\"2\"/>\n";
        os << text(lx + 26, ly, labels[i], "start", 11);
    }
    os << "</svg>\n";
    return os.str();
}

std::string heatmap_svg(const Heatmap& h) {
    if (h.values.size() != h.rows.size()) {
        throw ConfigError("heatmap: row count mismatch");
    }
    const double cell = 22, ml = 150, mt = 40, mr = 70, mb = 30;
    const double width = ml + cell * static_cast<double>(h.cols.size()) + mr;
    const double height = mt + cell * static_cast<double>(h.rows.size()) + mb;
    const double span = h.hi > h.lo ? h.hi - h.lo : 1.0;
    const auto shade = [&](double v) {
        const double f = std::clamp((v - h.lo) / span, 0.0, 1.0);
        // white to dark blue
        const int r = static_cast<int>(std::lround(255 - f * (255 - 8)));
        const int g = static_cast<int>(std::lround(255 - f * (255 - 48)));
        const int b = static_cast<int>(std::lround(255 - f * (255 - 107)));
        char buf[16];
        std::snprintf(buf, sizeof buf, "#%02x%02x%02x", r, g, b);
        return std::string(buf);
    };

    std::ostringstream os;
    os << header(width, height);
    os << text(width / 2, 18, h.title, "middle", 14);
    for (std::size_t c = 0; c < h.cols.size(); ++c) {
        os << text(ml + cell * (static_cast<double>(c) + 0.5), mt - 6, h.cols[c], "middle", 10);
    }
    for (std::size_t r = 0; r < h.rows.size(); ++r) {
        const double y = mt + cell * static_cast<double>(r);
        os << text(ml - 6, y + cell * 0.65, h.rows[r], "end", 10);
        if (h.values[r].size() != h.cols.size()) {
            throw ConfigError("heatmap: column count mismatch");
        }
        for (std::size_t c = 0; c < h.cols.size(); ++c) {
            const double v = h.values[r][c];
            os << "<rect x=\"" << px(ml + cell * static_cast<double>(c)) << "\" y=\"" << px(y) << "\" width=\""
               << px(cell) << "\" height=\"" << px(cell) << "\" fill=\""
               << (std::isfinite(v) ? shade(v) : std::string("#eeeeee")) << "\"/>\n";
        }
    }
    if (h.split_after >= 0 && h.split_after + 1 < static_cast<int>(h.rows.size())) {
        const double y = mt + cell * (h.split_after + 1);
        os << "<line x1=\"" << px(ml) << "\" x2=\"" << px(ml + cell * static_cast<double>(h.cols.size()))
           << "\" y1=\"" << px(y) << "\" y2=\"" << px(y) << "\" stroke=\"#d62728\" stroke-width=\"2\"/>\n";
    }
    // colour bar
    const double bx = ml + cell * static_cast<double>(h.cols.size()) + 20;
    for (int i = 0; i < 10; ++i) {
        const double v = h.lo + span * (9 - i) / 9.0;
        os << "<rect x=\"" << px(bx) << "\" y=\"" << px(mt + i * 12.0) << "\" width=\"14\" height=\"12\" fill=\""
           << shade(v) << "\"/>\n";
    }
    os << text(bx + 18, mt + 9, tick(h.hi), "start", 9);
    os << text(bx + 18, mt + 117, tick(h.lo), "start", 9);
    os << "</svg>\n";
    return os.str();
}

}  // namespace cptlab
