#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "sparsekd/conv.hpp"
#include "sparsekd/masking.hpp"
#include "sparsekd/ops.hpp"
#include "sparsekd/tensor.hpp"

// Submanifold sparse convolution, mask-aware normalization and densify.
// Canonical form: every masked position holds exactly 0 in every channel,
// and gradients never flow through masked positions in either direction.

namespace sparsekd {

template <class S>
struct SparseFeatureMapT {
    TensorT<S> features;         // (N, C, h, w)
    std::vector<MaskMap> masks;  // one per batch item
    std::int64_t scale = 1;      // downsampling factor relative to the input image

    std::int64_t batch() const { return features.dim(0); }
    std::int64_t channels() const { return features.dim(1); }

    void validate() const {
        if (features.rank() != 4)
            throw ShapeError("SparseFeatureMap: features must be (N,C,h,w), got " + shape_str(features.shape()));
        if (static_cast<std::int64_t>(masks.size()) != features.dim(0))
            throw ShapeError("SparseFeatureMap: " + std::to_string(masks.size()) + " masks for batch " +
                             std::to_string(features.dim(0)));
        for (const auto& m : masks)
            if (m.h != features.dim(2) || m.w != features.dim(3))
                throw ShapeError("SparseFeatureMap: mask " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                                 " vs features " + shape_str(features.shape()));
    }
};

struct PatternReport {
    std::int64_t leaked = 0;
    std::vector<std::array<std::int64_t, 4>> positions;  // (n, c, i, j), first few only
    bool pass() const { return leaked == 0; }
};

// Checks support(features) is contained in the visible set, exactly.
template <class S>
PatternReport check_pattern(const SparseFeatureMapT<S>& f, double tol = 0.0) {
    f.validate();
    PatternReport r;
    const std::int64_t n = f.features.dim(0), c = f.features.dim(1), h = f.features.dim(2), w = f.features.dim(3);
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < w; ++j) {
                    if (f.masks[static_cast<std::size_t>(b)].at(i, j)) continue;
                    const double v = static_cast<double>(f.features.values()[((b * c + ch) * h + i) * w + j]);
                    if (std::abs(v) > tol) {
                        ++r.leaked;
                        if (r.positions.size() < 16) r.positions.push_back({b, ch, i, j});
                    }
                }
    return r;
}

enum class SparseConvPath { Gather, DenseMasked };

// Convolution computed only at visible output positions, with masked input
// taps contributing zero. The gather path assembles columns for visible
// outputs only; the dense path convolves everything and re-masks (oracle).
template <class S>
SparseFeatureMapT<S> sparse_conv2d(const SparseFeatureMapT<S>& in, const TensorT<S>& w, const TensorT<S>& b,
                                   ConvSpec spec, const std::vector<MaskMap>& out_masks,
                                   SparseConvPath path = SparseConvPath::Gather) {
    in.validate();
    if (spec.stride != 1 && spec.stride != 2)
        throw ConfigError("sparse_conv2d: stride " + std::to_string(spec.stride) + " not in {1,2}");
    detail::check_rank("sparse_conv2d", w, 4);
    if (in.features.dim(1) != w.dim(1))
        throw ShapeError("sparse_conv2d: input channels " + std::to_string(in.features.dim(1)) +
                         " vs weight channels " + std::to_string(w.dim(1)));
    if (b.size() != w.dim(0))
        throw ShapeError("sparse_conv2d: bias size " + std::to_string(b.size()) + " vs out channels " +
                         std::to_string(w.dim(0)));
    const std::int64_t n = in.features.dim(0), cin = in.features.dim(1);
    const std::int64_t h = in.features.dim(2), wd = in.features.dim(3);
    const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    const std::int64_t wo = conv_out_dim(wd, kw, spec.stride, spec.pad);
    if (static_cast<std::int64_t>(out_masks.size()) != n)
        throw ShapeError("sparse_conv2d: " + std::to_string(out_masks.size()) + " output masks for batch " +
                         std::to_string(n));
    for (const auto& m : out_masks)
        if (m.h != ho || m.w != wo)
            throw ShapeError("sparse_conv2d: output mask " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                             " vs computed output " + std::to_string(ho) + "x" + std::to_string(wo));

    SparseFeatureMapT<S> out;
    out.masks = out_masks;
    out.scale = in.scale * spec.stride;
    out.features = TensorT<S>::zeros({n, cout, ho, wo});

    const std::int64_t krows = cin * kh * kw;
    auto W = detail::as_matrix<S>(w.values(), cout, krows);
    const auto in_masks = in.masks;  // captured for backward

    if (path == SparseConvPath::Gather) {
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cols;
        for (std::int64_t bi = 0; bi < n; ++bi) {
            std::vector<std::int64_t> vis;
            for (std::int64_t p = 0; p < ho * wo; ++p)
                if (out_masks[static_cast<std::size_t>(bi)].visible[static_cast<std::size_t>(p)]) vis.push_back(p);
            if (vis.empty()) continue;
            const std::int64_t nv = static_cast<std::int64_t>(vis.size());
            cols.resize(krows, nv);
            const S* img = in.features.data() + bi * cin * h * wd;
            const auto& im = in_masks[static_cast<std::size_t>(bi)];
            for (std::int64_t v = 0; v < nv; ++v) {
                const std::int64_t oi = vis[static_cast<std::size_t>(v)] / wo, oj = vis[static_cast<std::size_t>(v)] % wo;
                for (std::int64_t ki = 0; ki < kh; ++ki) {
                    const std::int64_t ii = oi * spec.stride + ki - spec.pad;
                    for (std::int64_t kj = 0; kj < kw; ++kj) {
                        const std::int64_t jj = oj * spec.stride + kj - spec.pad;
                        const bool ok = ii >= 0 && ii < h && jj >= 0 && jj < wd && im.at(ii, jj);
                        for (std::int64_t c = 0; c < cin; ++c)
                            cols((c * kh + ki) * kw + kj, v) = ok ? img[(c * h + ii) * wd + jj] : S(0);
                    }
                }
            }
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> y(cout, nv);
            y.noalias() = W * cols;
            y.colwise() += Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.data(), cout);
            S* dst = out.features.data() + bi * cout * ho * wo;
            for (std::int64_t c = 0; c < cout; ++c)
                for (std::int64_t v = 0; v < nv; ++v) dst[c * ho * wo + vis[static_cast<std::size_t>(v)]] = y(c, v);
        }
    } else {
        // Dense oracle: gate input, convolve everything, gate output.
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cols(krows, ho * wo);
        Eigen::Array<S, Eigen::Dynamic, 1> gated(cin * h * wd);
        for (std::int64_t bi = 0; bi < n; ++bi) {
            const S* img = in.features.data() + bi * cin * h * wd;
            const auto& im = in_masks[static_cast<std::size_t>(bi)];
            for (std::int64_t c = 0; c < cin; ++c)
                for (std::int64_t p = 0; p < h * wd; ++p)
                    gated[c * h * wd + p] = im.visible[static_cast<std::size_t>(p)] ? img[c * h * wd + p] : S(0);
            detail::im2col(gated.data(), cin, h, wd, kh, kw, spec.stride, spec.pad, ho, wo, cols.data());
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> y(cout, ho * wo);
            y.noalias() = W * cols;
            S* dst = out.features.data() + bi * cout * ho * wo;
            const auto& om = out_masks[static_cast<std::size_t>(bi)];
            for (std::int64_t c = 0; c < cout; ++c)
                for (std::int64_t p = 0; p < ho * wo; ++p)
                    dst[c * ho * wo + p] = om.visible[static_cast<std::size_t>(p)] ? y(c, p) + b.values()[c] : S(0);
        }
    }

    auto xi = in.features.impl(), wi = w.impl(), bi_ = b.impl();
    TapeT<S>::active().record(
        "sparse_conv2d", out.features, {&in.features, &w, &b},
        [=](const auto& g) {
            Eigen::Array<S, Eigen::Dynamic, 1> dw(wi->data.size()), dx, db(cout);
            dw.setZero();
            db.setZero();
            if (xi->requires_grad) dx = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(xi->data.size());
            auto W = detail::as_matrix<S>(wi->data, cout, krows);
            detail::MutMatMap<S> dW(dw.data(), cout, krows);
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cols, gvis, dcols;
            for (std::int64_t bidx = 0; bidx < n; ++bidx) {
                std::vector<std::int64_t> vis;
                for (std::int64_t p = 0; p < ho * wo; ++p)
                    if (out_masks[static_cast<std::size_t>(bidx)].visible[static_cast<std::size_t>(p)]) vis.push_back(p);
                if (vis.empty()) continue;
                const std::int64_t nv = static_cast<std::int64_t>(vis.size());
                const auto& im = in_masks[static_cast<std::size_t>(bidx)];
                // Gradient of the visible outputs only; masked outputs are constants.
                gvis.resize(cout, nv);
                const S* gsrc = g.data() + bidx * cout * ho * wo;
                for (std::int64_t c = 0; c < cout; ++c)
                    for (std::int64_t v = 0; v < nv; ++v)
                        gvis(c, v) = gsrc[c * ho * wo + vis[static_cast<std::size_t>(v)]];
                if (bi_->requires_grad) db += gvis.rowwise().sum().array();
                if (wi->requires_grad || xi->requires_grad) {
                    cols.resize(krows, nv);
                    const S* img = xi->data.data() + bidx * cin * h * wd;
                    for (std::int64_t v = 0; v < nv; ++v) {
                        const std::int64_t oi = vis[static_cast<std::size_t>(v)] / wo,
                                           oj = vis[static_cast<std::size_t>(v)] % wo;
                        for (std::int64_t ki = 0; ki < kh; ++ki) {
                            const std::int64_t ii = oi * spec.stride + ki - spec.pad;
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                const std::int64_t jj = oj * spec.stride + kj - spec.pad;
                                const bool ok = ii >= 0 && ii < h && jj >= 0 && jj < wd && im.at(ii, jj);
                                for (std::int64_t c = 0; c < cin; ++c)
                                    cols((c * kh + ki) * kw + kj, v) = ok ? img[(c * h + ii) * wd + jj] : S(0);
                            }
                        }
                    }
                    if (wi->requires_grad) dW.noalias() += gvis * cols.transpose();
                    if (xi->requires_grad) {
                        dcols.resize(krows, nv);
                        dcols.noalias() = W.transpose() * gvis;
                        S* dst = dx.data() + bidx * cin * h * wd;
                        for (std::int64_t v = 0; v < nv; ++v) {
                            const std::int64_t oi = vis[static_cast<std::size_t>(v)] / wo,
                                               oj = vis[static_cast<std::size_t>(v)] % wo;
                            for (std::int64_t ki = 0; ki < kh; ++ki) {
                                const std::int64_t ii = oi * spec.stride + ki - spec.pad;
                                for (std::int64_t kj = 0; kj < kw; ++kj) {
                                    const std::int64_t jj = oj * spec.stride + kj - spec.pad;
                                    if (ii < 0 || ii >= h || jj < 0 || jj >= wd || !im.at(ii, jj)) continue;
                                    for (std::int64_t c = 0; c < cin; ++c)
                                        dst[(c * h + ii) * wd + jj] += dcols((c * kh + ki) * kw + kj, v);
                                }
                            }
                        }
                    }
                }
            }
            if (xi->requires_grad) xi->accumulate(dx);
            if (wi->requires_grad) wi->accumulate(dw);
            if (bi_->requires_grad) bi_->accumulate(db);
        });
    return out;
}

// Batch normalization over visible positions; masks == nullptr means dense.
// Running stats are buffers mutated in train mode, never taped.
template <class S>
TensorT<S> batchnorm(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, TensorT<S>& run_mean,
                     TensorT<S>& run_var, bool training, const std::vector<MaskMap>* masks = nullptr,
                     double momentum = 0.1, double eps = 1e-5) {
    detail::check_rank("batchnorm", x, 4);
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (gamma.size() != c || beta.size() != c || run_mean.size() != c || run_var.size() != c)
        throw ShapeError("batchnorm: parameter size vs " + std::to_string(c) + " channels");
    if (masks && static_cast<std::int64_t>(masks->size()) != n)
        throw ShapeError("batchnorm: " + std::to_string(masks->size()) + " masks for batch " + std::to_string(n));

    // Visible-position count is channel-independent.
    std::int64_t count = 0;
    if (masks) {
        for (const auto& m : *masks) {
            if (m.h != h || m.w != w)
                throw ShapeError("batchnorm: mask " + std::to_string(m.h) + "x" + std::to_string(m.w) +
                                 " vs features " + shape_str(x.shape()));
            count += m.visible_count();
        }
    } else {
        count = n * h * w;
    }
    if (count == 0) throw NumericError("batchnorm: zero visible positions");

    Eigen::Array<double, Eigen::Dynamic, 1> mean(c), var(c);
    if (training) {
        mean.setZero();
        var.setZero();
        for (std::int64_t bi = 0; bi < n; ++bi)
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* src = x.data() + (bi * c + ch) * h * w;
                double acc = 0.0;
                if (masks) {
                    const auto& m = (*masks)[static_cast<std::size_t>(bi)];
                    for (std::int64_t p = 0; p < h * w; ++p)
                        if (m.visible[static_cast<std::size_t>(p)]) acc += static_cast<double>(src[p]);
                } else {
                    for (std::int64_t p = 0; p < h * w; ++p) acc += static_cast<double>(src[p]);
                }
                mean[ch] += acc;
            }
        mean /= static_cast<double>(count);
        for (std::int64_t bi = 0; bi < n; ++bi)
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* src = x.data() + (bi * c + ch) * h * w;
                double acc = 0.0;
                if (masks) {
                    const auto& m = (*masks)[static_cast<std::size_t>(bi)];
                    for (std::int64_t p = 0; p < h * w; ++p)
                        if (m.visible[static_cast<std::size_t>(p)]) {
                            const double d = static_cast<double>(src[p]) - mean[ch];
                            acc += d * d;
                        }
                } else {
                    for (std::int64_t p = 0; p < h * w; ++p) {
                        const double d = static_cast<double>(src[p]) - mean[ch];
                        acc += d * d;
                    }
                }
                var[ch] += acc;
            }
        var /= static_cast<double>(count);  // biased, used for normalization
        // Unbiased variance feeds the running estimate, per convention.
        const double unbias = count > 1 ? static_cast<double>(count) / static_cast<double>(count - 1) : 1.0;
        for (std::int64_t ch = 0; ch < c; ++ch) {
            run_mean.values()[ch] =
                static_cast<S>((1.0 - momentum) * static_cast<double>(run_mean.values()[ch]) + momentum * mean[ch]);
            run_var.values()[ch] = static_cast<S>((1.0 - momentum) * static_cast<double>(run_var.values()[ch]) +
                                                  momentum * var[ch] * unbias);
        }
    } else {
        for (std::int64_t ch = 0; ch < c; ++ch) {
            mean[ch] = static_cast<double>(run_mean.values()[ch]);
            var[ch] = static_cast<double>(run_var.values()[ch]);
        }
    }

    Eigen::Array<double, Eigen::Dynamic, 1> inv_std = (var + eps).sqrt().inverse();
    auto out = TensorT<S>::zeros(x.shape());
    for (std::int64_t bi = 0; bi < n; ++bi)
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const S* src = x.data() + (bi * c + ch) * h * w;
            S* dst = out.data() + (bi * c + ch) * h * w;
            const S gm = gamma.values()[ch], bt = beta.values()[ch];
            const double mu = mean[ch], is = inv_std[ch];
            if (masks) {
                const auto& m = (*masks)[static_cast<std::size_t>(bi)];
                for (std::int64_t p = 0; p < h * w; ++p)
                    if (m.visible[static_cast<std::size_t>(p)])
                        dst[p] = static_cast<S>((static_cast<double>(src[p]) - mu) * is) * gm + bt;
            } else {
                for (std::int64_t p = 0; p < h * w; ++p)
                    dst[p] = static_cast<S>((static_cast<double>(src[p]) - mu) * is) * gm + bt;
            }
        }

    auto xi = x.impl(), gi = gamma.impl(), bi_ = beta.impl();
    std::vector<MaskMap> mask_copy = masks ? *masks : std::vector<MaskMap>{};
    const bool has_masks = masks != nullptr;
    TapeT<S>::active().record(
        "batchnorm", out, {&x, &gamma, &beta},
        [=](const auto& g) {
            Eigen::Array<S, Eigen::Dynamic, 1> dgamma(c), dbeta(c), dx;
            dgamma.setZero();
            dbeta.setZero();
            if (xi->requires_grad) dx = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(xi->data.size());
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const double mu = mean[ch], is = inv_std[ch];
                // First pass: per-channel reductions over visible positions.
                double sum_gy = 0.0, sum_gy_xhat = 0.0;
                for (std::int64_t bi = 0; bi < n; ++bi) {
                    const S* src = xi->data.data() + (bi * c + ch) * h * w;
                    const S* gy = g.data() + (bi * c + ch) * h * w;
                    for (std::int64_t p = 0; p < h * w; ++p) {
                        if (has_masks && !mask_copy[static_cast<std::size_t>(bi)].visible[static_cast<std::size_t>(p)])
                            continue;
                        const double xhat = (static_cast<double>(src[p]) - mu) * is;
                        sum_gy += static_cast<double>(gy[p]);
                        sum_gy_xhat += static_cast<double>(gy[p]) * xhat;
                    }
                }
                dgamma[ch] = static_cast<S>(sum_gy_xhat);
                dbeta[ch] = static_cast<S>(sum_gy);
                if (!xi->requires_grad) continue;
                const double gmv = static_cast<double>(gi->data[ch]);
                for (std::int64_t bi = 0; bi < n; ++bi) {
                    const S* src = xi->data.data() + (bi * c + ch) * h * w;
                    const S* gy = g.data() + (bi * c + ch) * h * w;
                    S* dst = dx.data() + (bi * c + ch) * h * w;
                    for (std::int64_t p = 0; p < h * w; ++p) {
                        if (has_masks && !mask_copy[static_cast<std::size_t>(bi)].visible[static_cast<std::size_t>(p)])
                            continue;
                        const double xhat = (static_cast<double>(src[p]) - mu) * is;
                        double d;
                        if (training) {
                            d = gmv * is *
                                (static_cast<double>(gy[p]) - sum_gy / static_cast<double>(count) -
                                 xhat * sum_gy_xhat / static_cast<double>(count));
                        } else {
                            d = gmv * is * static_cast<double>(gy[p]);
                        }
                        dst[p] = static_cast<S>(d);
                    }
                }
            }
            if (xi->requires_grad) xi->accumulate(dx);
            if (gi->requires_grad) gi->accumulate(dgamma);
            if (bi_->requires_grad) bi_->accumulate(dbeta);
        });
    return out;
}

template <class S>
SparseFeatureMapT<S> sparse_batchnorm(const SparseFeatureMapT<S>& in, const TensorT<S>& gamma, const TensorT<S>& beta,
                                      TensorT<S>& run_mean, TensorT<S>& run_var, bool training, double momentum = 0.1,
                                      double eps = 1e-5) {
    in.validate();
    SparseFeatureMapT<S> out;
    out.masks = in.masks;
    out.scale = in.scale;
    out.features = batchnorm(in.features, gamma, beta, run_mean, run_var, training, &in.masks, momentum, eps);
    return out;
}

template <class S>
SparseFeatureMapT<S> sparse_relu(const SparseFeatureMapT<S>& in) {
    SparseFeatureMapT<S> out;
    out.masks = in.masks;
    out.scale = in.scale;
    out.features = relu(in.features);  // relu(0) = 0 keeps the canonical form
    return out;
}

template <class S>
SparseFeatureMapT<S> sparse_add(const SparseFeatureMapT<S>& a, const SparseFeatureMapT<S>& b) {
    SparseFeatureMapT<S> out;
    out.masks = a.masks;
    out.scale = a.scale;
    out.features = add(a.features, b.features);
    return out;
}

// Fills masked holes with a learnable per-channel embedding; gradient reaches
// the embedding from masked positions only.
template <class S>
TensorT<S> densify(const SparseFeatureMapT<S>& in, const TensorT<S>& emb) {
    in.validate();
    const std::int64_t n = in.features.dim(0), c = in.features.dim(1), h = in.features.dim(2), w = in.features.dim(3);
    if (emb.rank() != 1 || emb.size() != c)
        throw ShapeError("densify: embedding shape " + shape_str(emb.shape()) + " vs " + std::to_string(c) +
                         " channels");
    auto out = TensorT<S>::zeros(in.features.shape());
    const auto masks = in.masks;
    for (std::int64_t bi = 0; bi < n; ++bi) {
        const auto& m = masks[static_cast<std::size_t>(bi)];
        for (std::int64_t ch = 0; ch < c; ++ch) {
            const S* src = in.features.data() + (bi * c + ch) * h * w;
            S* dst = out.data() + (bi * c + ch) * h * w;
            const S ev = emb.values()[ch];
            for (std::int64_t p = 0; p < h * w; ++p)
                dst[p] = m.visible[static_cast<std::size_t>(p)] ? src[p] : ev;
        }
    }
    auto xi = in.features.impl(), ei = emb.impl();
    TapeT<S>::active().record("densify", out, {&in.features, &emb}, [=](const auto& g) {
        Eigen::Array<S, Eigen::Dynamic, 1> dx, de(c);
        de.setZero();
        if (xi->requires_grad) dx = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(xi->data.size());
        for (std::int64_t bi = 0; bi < n; ++bi) {
            const auto& m = masks[static_cast<std::size_t>(bi)];
            for (std::int64_t ch = 0; ch < c; ++ch) {
                const S* gy = g.data() + (bi * c + ch) * h * w;
                double acc = 0.0;
                for (std::int64_t p = 0; p < h * w; ++p) {
                    if (m.visible[static_cast<std::size_t>(p)]) {
                        if (xi->requires_grad) dx[(bi * c + ch) * h * w + p] = gy[p];
                    } else {
                        acc += static_cast<double>(gy[p]);
                    }
                }
                de[ch] += static_cast<S>(acc);
            }
        }
        if (xi->requires_grad) xi->accumulate(dx);
        if (ei->requires_grad) ei->accumulate(de);
    });
    return out;
}

}  // namespace sparsekd
