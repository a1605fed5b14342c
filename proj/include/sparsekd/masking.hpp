#pragma once

#include <cstdint>
#include <map>
#include <vector>

#include "sparsekd/tensor.hpp"

// Patch masks at the coarsest grid and their nearest-neighbor expansion to
// every scale the models touch. Maps store 1 = visible, 0 = masked.

namespace sparsekd {

struct MaskGrid {
    std::int64_t h = 0, w = 0;
    std::vector<std::uint8_t> visible;  // h*w entries
    double ratio = 0.0;                 // intended masked fraction

    std::int64_t cells() const { return h * w; }
    std::int64_t visible_count() const;
    std::int64_t masked_count() const { return cells() - visible_count(); }
};

struct MaskMap {
    std::int64_t h = 0, w = 0;
    std::vector<std::uint8_t> visible;

    bool at(std::int64_t i, std::int64_t j) const { return visible[static_cast<std::size_t>(i * w + j)] != 0; }
    std::int64_t visible_count() const;
    bool all_visible() const { return visible_count() == h * w; }
};

// One map per expansion factor; factor 1 reproduces the grid itself.
struct MaskHierarchy {
    MaskGrid base;
    std::map<std::int64_t, MaskMap> maps;  // factor -> map

    const MaskMap& at_factor(std::int64_t f) const;
    std::uint64_t checksum() const;
};

// Exactly round(ratio*cells) cells masked, uniformly without replacement,
// except that at least one cell stays visible whenever ratio < 1.
MaskGrid generate_mask(std::int64_t grid_h, std::int64_t grid_w, double ratio, std::uint64_t seed);

// Nearest-neighbor expansion of the grid by an integral factor per axis.
MaskMap expand_map(const MaskGrid& grid, std::int64_t map_h, std::int64_t map_w);

MaskHierarchy expand_hierarchy(const MaskGrid& grid, const std::vector<std::int64_t>& factors);

// All-visible helpers for the dense/no-mask paths.
MaskGrid full_visible_grid(std::int64_t h, std::int64_t w);

// Zeroes masked pixels of a (C,H,W) or (N,C,H,W) image; plain value op, the
// input image is data, not a differentiable node.
template <class S>
TensorT<S> apply_mask_dense(const TensorT<S>& image, const MaskMap& map) {
    const bool batched = image.rank() == 4;
    if (!batched && image.rank() != 3)
        throw ShapeError("apply_mask_dense: expected (C,H,W) or (N,C,H,W), got " + shape_str(image.shape()));
    const std::int64_t h = image.dim(batched ? 2 : 1), w = image.dim(batched ? 3 : 2);
    if (h != map.h || w != map.w)
        throw ShapeError("apply_mask_dense: image " + std::to_string(h) + "x" + std::to_string(w) + " vs map " +
                         std::to_string(map.h) + "x" + std::to_string(map.w));
    auto out = TensorT<S>::zeros(image.shape());
    const std::int64_t planes = image.size() / (h * w);
    for (std::int64_t p = 0; p < planes; ++p)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j)
                out.values()[(p * h + i) * w + j] = map.at(i, j) ? image.values()[(p * h + i) * w + j] : S(0);
    return out;
}

// 0/1 serialization for reproducibility records.
template <class S>
TensorT<S> mask_to_tensor(const MaskMap& m) {
    auto t = TensorT<S>::zeros({m.h, m.w});
    for (std::int64_t i = 0; i < m.h * m.w; ++i) t.values()[i] = m.visible[static_cast<std::size_t>(i)] ? S(1) : S(0);
    return t;
}

}  // namespace sparsekd
