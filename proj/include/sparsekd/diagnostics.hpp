#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "sparsekd/masking.hpp"
#include "sparsekd/student.hpp"
#include "sparsekd/tensor.hpp"

// Quantitative checks for the two failure modes sparse convolution is meant
// to fix: activation-distribution shift under masking, and mask erosion
// under stacked dense convolutions.

namespace sparsekd {

struct Histogram {
    std::vector<double> edges;   // bins+1, strictly increasing
    std::vector<double> counts;  // normalized, sums to 1

    std::int64_t bins() const { return static_cast<std::int64_t>(counts.size()); }
};

// Uniform bins over the observed range. A constant sample degenerates to a
// single bin holding all the mass.
Histogram make_histogram(const std::vector<double>& values, int bins = 64);
// Same, with caller-fixed range so several histograms share bin edges.
// Out-of-range values land in the end bins.
Histogram make_histogram(const std::vector<double>& values, int bins, double lo, double hi);

// Total-variation distance, 0.5 * sum |p_i - q_i|, in [0,1].
double shift_score(const Histogram& p, const Histogram& q);

enum class ConvKind { Dense, Sparse };

// Pushes the mask's indicator image through `depth` stacked 3x3 all-ones
// convolutions (pad 1) and reports the nonzero fraction after each layer.
// Dense convolution dilates the visible set; the submanifold kind keeps it.
std::vector<double> erosion_profile(ConvKind kind, const MaskMap& mask, std::int64_t depth);

namespace detail {

template <class S>
void append_all(const TensorT<S>& t, std::vector<double>& out) {
    const S* p = t.data();
    for (std::int64_t i = 0; i < t.size(); ++i) out.push_back(static_cast<double>(p[i]));
}

template <class S>
void append_visible(const SparseFeatureMapT<S>& fm, std::vector<double>& out) {
    const std::int64_t n = fm.features.dim(0), c = fm.features.dim(1);
    const std::int64_t h = fm.features.dim(2), w = fm.features.dim(3);
    const S* p = fm.features.data();
    for (std::int64_t b = 0; b < n; ++b) {
        const auto& m = fm.masks[static_cast<std::size_t>(b)];
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t y = 0; y < h; ++y)
                for (std::int64_t x = 0; x < w; ++x)
                    if (m.at(y, x)) out.push_back(static_cast<double>(p[((b * c + ch) * h + y) * w + x]));
    }
}

// Restores batch-norm running estimates on destruction so diagnostics can
// run training-mode statistics without mutating the model.
template <class S>
class BufferGuard {
  public:
    explicit BufferGuard(StudentModelT<S>& model) : model_(model) {
        for (auto& [name, t] : model_.buffers()) saved_.emplace_back(t, t.values());
    }
    ~BufferGuard() {
        for (auto& [t, v] : saved_) t.values() = v;
    }
    BufferGuard(const BufferGuard&) = delete;
    BufferGuard& operator=(const BufferGuard&) = delete;

  private:
    StudentModelT<S>& model_;
    std::vector<std::pair<TensorT<S>, typename TensorT<S>::Array>> saved_;
};

}  // namespace detail

// Per-image mask hierarchies for a batch, seeded independently per item.
template <class S>
std::vector<MaskHierarchy> diagnostic_hierarchies(const StudentModelT<S>& model, std::int64_t n, double ratio,
                                                  std::uint64_t seed) {
    const auto& cfg = model.config();
    std::vector<MaskHierarchy> hier;
    hier.reserve(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        auto grid = generate_mask(cfg.grid(), cfg.grid(), ratio, mix_seed(seed, 0xd1a6, static_cast<std::uint64_t>(i)));
        hier.push_back(expand_hierarchy(grid, cfg.mask_factors()));
    }
    return hier;
}

// Final-stage activations for one forward arm. Sparse mode samples visible
// positions only; the dense modes sample every position. `train_bn` picks
// batch statistics (true) or the stored running estimates (false); running
// estimates are restored before returning either way.
template <class S>
std::vector<double> final_stage_activations(StudentModelT<S>& model, const TensorT<S>& images, ForwardMode mode,
                                            const std::vector<MaskHierarchy>& hier, bool train_bn = true) {
    NoGradGuard<S> ng;
    detail::BufferGuard<S> guard(model);
    std::vector<double> vals;
    switch (mode) {
        case ForwardMode::Sparse:
        case ForwardMode::NoUnet: {
            auto stages = model.encode(images, hier, train_bn);
            detail::append_visible(stages.back(), vals);
            break;
        }
        case ForwardMode::Dense: {
            auto stages = model.encode_dense(images, train_bn);
            detail::append_all(stages.back(), vals);
            break;
        }
        case ForwardMode::DenseMaskedInput: {
            const auto maps = StudentModelT<S>::maps_at(hier, 32);
            auto masked = TensorT<S>::zeros(images.shape());
            masked.values() = images.values();
            for (std::int64_t b = 0; b < images.dim(0); ++b) {
                auto one = TensorT<S>::zeros({images.dim(1), images.dim(2), images.dim(3)});
                const std::int64_t per = images.size() / images.dim(0);
                std::copy(images.data() + b * per, images.data() + (b + 1) * per, one.data());
                auto gated = apply_mask_dense(one, maps[static_cast<std::size_t>(b)]);
                std::copy(gated.data(), gated.data() + per, masked.data() + b * per);
            }
            auto stages = model.encode_dense(masked, train_bn);
            detail::append_all(stages.back(), vals);
            break;
        }
    }
    if (vals.empty()) throw Error("activation histogram: empty activation set");
    return vals;
}

// Histogram over final-stage activations. Pass hierarchies for the sparse
// arm (visible positions only); pass nullptr for the dense arm.
template <class S>
Histogram activation_histogram(StudentModelT<S>& model, const TensorT<S>& images,
                               const std::vector<MaskHierarchy>* hier, int bins = 64) {
    if (images.rank() != 4) throw ShapeError("activation_histogram: expected (N,C,H,W), got " + shape_str(images.shape()));
    if (images.dim(0) < 100)
        throw ConfigError("activation_histogram: need at least 100 images for a stable estimate, got " +
                          std::to_string(images.dim(0)));
    std::vector<double> vals;
    if (hier) {
        vals = final_stage_activations(model, images, ForwardMode::Sparse, *hier);
    } else {
        vals = final_stage_activations(model, images, ForwardMode::Dense, {});
    }
    return make_histogram(vals, bins);
}

struct ShiftReport {
    // Each arm is compared against its own unmasked run of the same weights,
    // on bin edges shared within the pair.
    Histogram sparse_unmasked;  // full-visibility forward, batch statistics
    Histogram sparse_masked;    // sparse forward, visible positions, visible-site statistics
    Histogram dense_unmasked;   // dense forward, stored normalization constants
    Histogram dense_masked;     // dense forward over zero-filled masked input, same constants
    double sparse_score = 0.0;  // TV(sparse_masked, sparse_unmasked)
    double dense_score = 0.0;   // TV(dense_masked, dense_unmasked)
};

namespace detail {

template <class S>
inline void pair_histograms(std::vector<double>& ref, std::vector<double>& arm, int bins, Histogram& h_ref,
                            Histogram& h_arm) {
    double lo = ref[0], hi = ref[0];
    for (const auto* v : {&ref, &arm})
        for (double x : *v) {
            lo = std::min(lo, x);
            hi = std::max(hi, x);
        }
    h_ref = make_histogram(ref, bins, lo, hi);
    h_arm = make_histogram(arm, bins, lo, hi);
}

}  // namespace detail

// Masked-vs-unmasked comparison for both arms. The sparse pair runs with
// batch statistics — normalizing over the active (visible) sites is part of
// the sparse stack, and with every site visible that forward coincides with
// the plain dense one. The masked-input dense baseline is a fixed network
// handed zero-filled images, so its pair is measured under the stored
// normalization constants it already has (no re-calibration on masked data).
template <class S>
ShiftReport shift_diagnostic(StudentModelT<S>& model, const TensorT<S>& images, double mask_ratio,
                             std::uint64_t seed, int bins = 64) {
    if (images.rank() != 4) throw ShapeError("shift_diagnostic: expected (N,C,H,W), got " + shape_str(images.shape()));
    if (images.dim(0) < 100)
        throw ConfigError("shift_diagnostic: need at least 100 images for a stable estimate, got " +
                          std::to_string(images.dim(0)));
    const auto hier = diagnostic_hierarchies(model, images.dim(0), mask_ratio, seed);
    auto sp_ref = final_stage_activations(model, images, ForwardMode::Dense, {}, /*train_bn=*/true);
    auto sp_arm = final_stage_activations(model, images, ForwardMode::Sparse, hier, /*train_bn=*/true);
    auto dn_ref = final_stage_activations(model, images, ForwardMode::Dense, {}, /*train_bn=*/false);
    auto dn_arm = final_stage_activations(model, images, ForwardMode::DenseMaskedInput, hier, /*train_bn=*/false);

    ShiftReport rep;
    detail::pair_histograms<S>(sp_ref, sp_arm, bins, rep.sparse_unmasked, rep.sparse_masked);
    detail::pair_histograms<S>(dn_ref, dn_arm, bins, rep.dense_unmasked, rep.dense_masked);
    rep.sparse_score = shift_score(rep.sparse_masked, rep.sparse_unmasked);
    rep.dense_score = shift_score(rep.dense_masked, rep.dense_unmasked);
    return rep;
}

}  // namespace sparsekd
