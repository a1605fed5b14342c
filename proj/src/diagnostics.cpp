#include "sparsekd/diagnostics.hpp"

#include <algorithm>
#include <cmath>

namespace sparsekd {

Histogram make_histogram(const std::vector<double>& values, int bins) {
    if (values.empty()) throw Error("histogram: empty sample");
    auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    return make_histogram(values, bins, *lo_it, *hi_it);
}

Histogram make_histogram(const std::vector<double>& values, int bins, double lo, double hi) {
    if (values.empty()) throw Error("histogram: empty sample");
    if (bins < 1) throw ConfigError("histogram: bins must be >= 1, got " + std::to_string(bins));
    if (!(lo <= hi)) throw ConfigError("histogram: range lo > hi");
    Histogram h;
    if (lo == hi) {
        // Constant sample: one bin holding everything.
        h.edges = {lo - 0.5, lo + 0.5};
        h.counts = {1.0};
        return h;
    }
    h.edges.resize(static_cast<std::size_t>(bins) + 1);
    for (int i = 0; i <= bins; ++i) h.edges[static_cast<std::size_t>(i)] = lo + (hi - lo) * i / bins;
    h.counts.assign(static_cast<std::size_t>(bins), 0.0);
    const double inv = bins / (hi - lo);
    for (double v : values) {
        auto b = static_cast<std::int64_t>((v - lo) * inv);
        b = std::clamp<std::int64_t>(b, 0, bins - 1);
        h.counts[static_cast<std::size_t>(b)] += 1.0;
    }
    const double n = static_cast<double>(values.size());
    for (auto& c : h.counts) c /= n;
    return h;
}

double shift_score(const Histogram& p, const Histogram& q) {
    if (p.edges != q.edges)
        throw Error("shift score: histogram bin edges differ (" + std::to_string(p.edges.size()) + " vs " +
                    std::to_string(q.edges.size()) + " edges, or mismatched range)");
    double tv = 0.0;
    for (std::size_t i = 0; i < p.counts.size(); ++i) tv += std::abs(p.counts[i] - q.counts[i]);
    return 0.5 * tv;
}

std::vector<double> erosion_profile(ConvKind kind, const MaskMap& mask, std::int64_t depth) {
    if (depth < 1) throw ConfigError("erosion profile: depth must be >= 1, got " + std::to_string(depth));
    const std::int64_t h = mask.h, w = mask.w;
    std::vector<double> cur(static_cast<std::size_t>(h * w));
    for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t x = 0; x < w; ++x) cur[static_cast<std::size_t>(y * w + x)] = mask.at(y, x) ? 1.0 : 0.0;

    std::vector<double> profile;
    profile.reserve(static_cast<std::size_t>(depth));
    std::vector<double> next(cur.size());
    for (std::int64_t layer = 0; layer < depth; ++layer) {
        for (std::int64_t y = 0; y < h; ++y)
            for (std::int64_t x = 0; x < w; ++x) {
                double s = 0.0;
                for (std::int64_t dy = -1; dy <= 1; ++dy)
                    for (std::int64_t dx = -1; dx <= 1; ++dx) {
                        const std::int64_t yy = y + dy, xx = x + dx;
                        if (yy >= 0 && yy < h && xx >= 0 && xx < w) s += cur[static_cast<std::size_t>(yy * w + xx)];
                    }
                if (kind == ConvKind::Sparse && !mask.at(y, x)) s = 0.0;
                next[static_cast<std::size_t>(y * w + x)] = s;
            }
        std::int64_t nz = 0;
        for (double v : next)
            if (v != 0.0) ++nz;
        profile.push_back(static_cast<double>(nz) / static_cast<double>(h * w));
        std::swap(cur, next);
    }
    return profile;
}

}  // namespace sparsekd
