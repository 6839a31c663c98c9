#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include "lsk/metrics.hpp"
#include "lsk/scene_io.hpp"
#include "lsk/train.hpp"

namespace lsk {

inline std::string costs_csv(const CostReport& rep) {
    std::string out = "layer,dense_params,nnz_params,flops\n";
    for (const auto& r : rep.rows)
        out += r.layer + "," + std::to_string(r.dense_params) + "," + std::to_string(r.nnz_params) + "," +
               std::to_string(r.flops) + "\n";
    return out;
}

inline std::string erf_csv(const ErfMap& erf) {
    std::string out = "x,y,z,magnitude\n";
    for (std::size_t i = 0; i < erf.coords.size(); ++i) {
        const auto& c = erf.coords[i];
        out += std::to_string(c.x) + "," + std::to_string(c.y) + "," + std::to_string(c.z) + "," +
               detail::format_exact(erf.magnitude[i]) + "\n";
    }
    return out;
}

/// class,iou,tp,fp,fn; iou is "nan" for absent classes. Last row is the mean.
inline std::string iou_csv(const MiouResult& r) {
    std::string out = "class,iou,tp,fp,fn\n";
    for (std::size_t k = 0; k < r.iou.size(); ++k)
        out += std::to_string(k) + "," + (r.present[k] ? detail::format_exact(r.iou[k]) : std::string("nan")) + "," +
               std::to_string(r.tp[k]) + "," + std::to_string(r.fp[k]) + "," + std::to_string(r.fn[k]) + "\n";
    out += "mean," + detail::format_exact(r.mean) + ",,,\n";
    return out;
}

inline std::string metrics_csv_header(std::size_t num_layers) {
    std::string out = "iteration,loss,base_loss,lr,sds_event,sort_event";
    for (std::size_t l = 0; l < num_layers; ++l) out += ",sparsity_l" + std::to_string(l);
    return out + "\n";
}

inline std::string metrics_csv_row(const IterationRecord& r) {
    std::string out = std::to_string(r.iteration) + "," + detail::format_exact(r.loss) + "," +
                      detail::format_exact(r.base_loss) + "," + detail::format_exact(r.lr) + "," +
                      (r.sds_event ? "1" : "0") + "," + (r.sort_event ? "1" : "0");
    for (double s : r.layer_sparsity) out += "," + detail::format_exact(s);
    return out + "\n";
}

namespace detail {

inline std::string fixed(double v, int digits = 2) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
    return buf;
}

inline std::string svg_escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        if (c == '<') out += "&lt;";
        else if (c == '>') out += "&gt;";
        else if (c == '&') out += "&amp;";
        else out += c;
    }
    return out;
}

/// Black -> red -> yellow -> white ramp for t in [0,1].
inline std::string heat_color(double t) {
    t = std::clamp(t, 0.0, 1.0);
    const int r = static_cast<int>(std::lround(255.0 * std::min(1.0, 3.0 * t)));
    const int g = static_cast<int>(std::lround(255.0 * std::clamp(3.0 * t - 1.0, 0.0, 1.0)));
    const int b = static_cast<int>(std::lround(255.0 * std::clamp(3.0 * t - 2.0, 0.0, 1.0)));
    char buf[8];
    std::snprintf(buf, sizeof(buf), "#%02x%02x%02x", r, g, b);
    return buf;
}

}  // namespace detail

/// Horizontal bars of dense vs nonzero parameters per layer.
inline std::string costs_svg(const CostReport& rep) {
    const int row_h = 22, label_w = 160, bar_w = 420, top = 30;
    const int height = top + row_h * static_cast<int>(rep.rows.size()) + 20;
    std::uint64_t max_dense = 1;
    for (const auto& r : rep.rows) max_dense = std::max(max_dense, r.dense_params);
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(label_w + bar_w + 140) +
                    "\" height=\"" + std::to_string(height) + "\" font-family=\"monospace\" font-size=\"11\">\n";
    s += "<text x=\"4\" y=\"16\">parameters per layer (grey dense, blue nonzero)</text>\n";
    for (std::size_t i = 0; i < rep.rows.size(); ++i) {
        const auto& r = rep.rows[i];
        const int y = top + row_h * static_cast<int>(i);
        const double wd = bar_w * static_cast<double>(r.dense_params) / static_cast<double>(max_dense);
        const double wn = bar_w * static_cast<double>(r.nnz_params) / static_cast<double>(max_dense);
        s += "<text x=\"4\" y=\"" + std::to_string(y + 14) + "\">" + detail::svg_escape(r.layer) + "</text>\n";
        s += "<rect x=\"" + std::to_string(label_w) + "\" y=\"" + std::to_string(y + 3) + "\" width=\"" +
             detail::fixed(wd) + "\" height=\"16\" fill=\"#cccccc\"/>\n";
        s += "<rect x=\"" + std::to_string(label_w) + "\" y=\"" + std::to_string(y + 3) + "\" width=\"" +
             detail::fixed(wn) + "\" height=\"16\" fill=\"#3b6fb6\"/>\n";
        s += "<text x=\"" + std::to_string(label_w + bar_w + 6) + "\" y=\"" + std::to_string(y + 14) + "\">" +
             std::to_string(r.nnz_params) + "/" + std::to_string(r.dense_params) + "</text>\n";
    }
    return s + "</svg>\n";
}

/// Heatmap of the z = center.z slice, normalized by the slice maximum.
inline std::string erf_svg(const ErfMap& erf) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < erf.coords.size(); ++i)
        if (erf.coords[i].z == erf.center.z) rows.push_back(i);
    std::int32_t x0 = erf.center.x, x1 = erf.center.x, y0 = erf.center.y, y1 = erf.center.y;
    double peak = 0.0;
    for (auto i : rows) {
        const auto& c = erf.coords[i];
        x0 = std::min(x0, c.x);
        x1 = std::max(x1, c.x);
        y0 = std::min(y0, c.y);
        y1 = std::max(y1, c.y);
        peak = std::max(peak, erf.magnitude[i]);
    }
    const int cell = 10, margin = 30;
    const int w = (x1 - x0 + 1) * cell + 2 * margin;
    const int h = (y1 - y0 + 1) * cell + 2 * margin;
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + std::to_string(w) + "\" height=\"" +
                    std::to_string(h) + "\" font-family=\"monospace\" font-size=\"11\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"#202020\"/>\n";
    s += "<text x=\"4\" y=\"16\" fill=\"#ffffff\">ERF z=" + std::to_string(erf.center.z) + " center=(" +
         std::to_string(erf.center.x) + "," + std::to_string(erf.center.y) + ") max=" + detail::format_exact(peak) +
         "</text>\n";
    for (auto i : rows) {
        const auto& c = erf.coords[i];
        const double t = peak > 0.0 ? std::sqrt(erf.magnitude[i] / peak) : 0.0;
        s += "<rect x=\"" + std::to_string(margin + (c.x - x0) * cell) + "\" y=\"" +
             std::to_string(margin + (y1 - c.y) * cell) + "\" width=\"" + std::to_string(cell) + "\" height=\"" +
             std::to_string(cell) + "\" fill=\"" + detail::heat_color(t) + "\"/>\n";
    }
    s += "<rect x=\"" + std::to_string(margin + (erf.center.x - x0) * cell) + "\" y=\"" +
         std::to_string(margin + (y1 - erf.center.y) * cell) + "\" width=\"" + std::to_string(cell) + "\" height=\"" +
         std::to_string(cell) + "\" fill=\"none\" stroke=\"#00ff00\"/>\n";
    return s + "</svg>\n";
}

inline void emit_costs(const CostReport& rep, const std::filesystem::path& csv, const std::filesystem::path& svg) {
    detail::write_file(csv, costs_csv(rep));
    detail::write_file(svg, costs_svg(rep));
}

inline void emit_erf(const ErfMap& erf, const std::filesystem::path& csv, const std::filesystem::path& svg) {
    detail::write_file(csv, erf_csv(erf));
    detail::write_file(svg, erf_svg(erf));
}

}  // namespace lsk
