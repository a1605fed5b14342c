#include "sparsekd/masking.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace sparsekd {

std::int64_t MaskGrid::visible_count() const {
    return std::count(visible.begin(), visible.end(), std::uint8_t(1));
}

std::int64_t MaskMap::visible_count() const {
    return std::count(visible.begin(), visible.end(), std::uint8_t(1));
}

const MaskMap& MaskHierarchy::at_factor(std::int64_t f) const {
    auto it = maps.find(f);
    if (it == maps.end()) throw Error("MaskHierarchy: no map at factor " + std::to_string(f));
    return it->second;
}

std::uint64_t MaskHierarchy::checksum() const {
    std::uint64_t h = fnv1a64(base.visible.data(), base.visible.size());
    for (const auto& [f, m] : maps) {
        h ^= splitmix64(static_cast<std::uint64_t>(f) + h);
        h ^= fnv1a64(m.visible.data(), m.visible.size());
    }
    return h;
}

MaskGrid generate_mask(std::int64_t grid_h, std::int64_t grid_w, double ratio, std::uint64_t seed) {
    if (grid_h < 1 || grid_w < 1)
        throw ConfigError("generate_mask: grid dims must be >= 1, got " + std::to_string(grid_h) + "x" +
                          std::to_string(grid_w));
    if (!(ratio >= 0.0) || ratio > 1.0)
        throw ConfigError("generate_mask: ratio " + std::to_string(ratio) + " outside [0,1]");
    MaskGrid g;
    g.h = grid_h;
    g.w = grid_w;
    g.ratio = ratio;
    const std::int64_t cells = grid_h * grid_w;
    std::int64_t masked = std::llround(ratio * static_cast<double>(cells));
    // Keep one visible cell unless the caller asked for everything.
    if (ratio < 1.0 && masked >= cells) masked = cells - 1;
    g.visible.assign(static_cast<std::size_t>(cells), 1);

    std::vector<std::int64_t> order(static_cast<std::size_t>(cells));
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(splitmix64(seed));
    for (std::int64_t i = 0; i < masked; ++i) {
        std::uniform_int_distribution<std::int64_t> pick(i, cells - 1);
        std::swap(order[static_cast<std::size_t>(i)], order[static_cast<std::size_t>(pick(rng))]);
        g.visible[static_cast<std::size_t>(order[static_cast<std::size_t>(i)])] = 0;
    }
    return g;
}

MaskMap expand_map(const MaskGrid& grid, std::int64_t map_h, std::int64_t map_w) {
    if (map_h % grid.h != 0 || map_w % grid.w != 0)
        throw ShapeError("expand_map: map " + std::to_string(map_h) + "x" + std::to_string(map_w) +
                         " not an integer multiple of grid " + std::to_string(grid.h) + "x" + std::to_string(grid.w));
    const std::int64_t fh = map_h / grid.h, fw = map_w / grid.w;
    MaskMap m;
    m.h = map_h;
    m.w = map_w;
    m.visible.assign(static_cast<std::size_t>(map_h * map_w), 0);
    for (std::int64_t i = 0; i < map_h; ++i)
        for (std::int64_t j = 0; j < map_w; ++j)
            m.visible[static_cast<std::size_t>(i * map_w + j)] =
                grid.visible[static_cast<std::size_t>((i / fh) * grid.w + (j / fw))];
    return m;
}

MaskHierarchy expand_hierarchy(const MaskGrid& grid, const std::vector<std::int64_t>& factors) {
    MaskHierarchy h;
    h.base = grid;
    for (auto f : factors) {
        if (f < 1) throw ConfigError("expand_hierarchy: factor " + std::to_string(f) + " must be >= 1");
        h.maps.emplace(f, expand_map(grid, grid.h * f, grid.w * f));
    }
    return h;
}

MaskGrid full_visible_grid(std::int64_t h, std::int64_t w) {
    MaskGrid g;
    g.h = h;
    g.w = w;
    g.ratio = 0.0;
    g.visible.assign(static_cast<std::size_t>(h * w), 1);
    return g;
}

}  // namespace sparsekd
