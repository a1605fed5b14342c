#pragma once

#include <cstdint>
#include <string>

#include "sparsekd/ops.hpp"
#include "sparsekd/tensor.hpp"

// Dense 2D convolution on NCHW tensors via im2col + GEMM. Weight layout is
// (Cout, Cin, kh, kw), bias (Cout).

namespace sparsekd {

struct ConvSpec {
    std::int64_t stride = 1;
    std::int64_t pad = 0;
};

inline std::int64_t conv_out_dim(std::int64_t in, std::int64_t k, std::int64_t stride, std::int64_t pad) {
    const std::int64_t span = in + 2 * pad - k;
    if (span < 0 || span % stride != 0)
        throw ShapeError("conv2d: input " + std::to_string(in) + " with kernel " + std::to_string(k) + " stride " +
                         std::to_string(stride) + " pad " + std::to_string(pad) + " has no integral output size");
    return span / stride + 1;
}

namespace detail {

// Fills cols (Cin*kh*kw rows, Ho*Wo columns) from one image (Cin,H,W).
template <class S>
void im2col(const S* img, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo, S* cols) {
    const std::int64_t ncols = ho * wo;
    for (std::int64_t c = 0; c < cin; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                S* dst = cols + ((c * kh + ki) * kw + kj) * ncols;
                for (std::int64_t oi = 0; oi < ho; ++oi) {
                    const std::int64_t ii = oi * stride + ki - pad;
                    for (std::int64_t oj = 0; oj < wo; ++oj) {
                        const std::int64_t jj = oj * stride + kj - pad;
                        dst[oi * wo + oj] = (ii >= 0 && ii < h && jj >= 0 && jj < w) ? img[(c * h + ii) * w + jj]
                                                                                     : S(0);
                    }
                }
            }
}

// Scatter-adds cols back into an image gradient; inverse of im2col.
template <class S>
void col2im(const S* cols, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh, std::int64_t kw,
            std::int64_t stride, std::int64_t pad, std::int64_t ho, std::int64_t wo, S* img) {
    const std::int64_t ncols = ho * wo;
    for (std::int64_t c = 0; c < cin; ++c)
        for (std::int64_t ki = 0; ki < kh; ++ki)
            for (std::int64_t kj = 0; kj < kw; ++kj) {
                const S* src = cols + ((c * kh + ki) * kw + kj) * ncols;
                for (std::int64_t oi = 0; oi < ho; ++oi) {
                    const std::int64_t ii = oi * stride + ki - pad;
                    if (ii < 0 || ii >= h) continue;
                    for (std::int64_t oj = 0; oj < wo; ++oj) {
                        const std::int64_t jj = oj * stride + kj - pad;
                        if (jj >= 0 && jj < w) img[(c * h + ii) * w + jj] += src[oi * wo + oj];
                    }
                }
            }
}

}  // namespace detail

template <class S>
TensorT<S> conv2d(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, ConvSpec spec = {}) {
    detail::check_rank("conv2d", x, 4);
    detail::check_rank("conv2d", w, 4);
    if (x.dim(1) != w.dim(1))
        throw ShapeError("conv2d: input channels " + std::to_string(x.dim(1)) + " vs weight channels " +
                         std::to_string(w.dim(1)));
    if (b.size() != w.dim(0))
        throw ShapeError("conv2d: bias size " + std::to_string(b.size()) + " vs out channels " +
                         std::to_string(w.dim(0)));
    const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    const std::int64_t wo = conv_out_dim(wd, kw, spec.stride, spec.pad);
    const std::int64_t krows = cin * kh * kw, ncols = ho * wo;

    auto out = TensorT<S>::zeros({n, cout, ho, wo});
    Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cols(krows, ncols);
    auto W = detail::as_matrix<S>(w.values(), cout, krows);
    auto bias = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, 1>>(b.data(), cout);
    for (std::int64_t i = 0; i < n; ++i) {
        detail::im2col(x.data() + i * cin * h * wd, cin, h, wd, kh, kw, spec.stride, spec.pad, ho, wo, cols.data());
        detail::MutMatMap<S> Y(out.data() + i * cout * ncols, cout, ncols);
        Y.noalias() = W * cols;
        Y.colwise() += bias;
    }

    auto xi = x.impl(), wi = w.impl(), bi = b.impl();
    TapeT<S>::active().record("conv2d", out, {&x, &w, &b}, [=](const auto& g) {
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> cols(krows, ncols);
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dcols(krows, ncols);
        Eigen::Array<S, Eigen::Dynamic, 1> dw(wi->data.size()), dx, db(cout);
        dw.setZero();
        db.setZero();
        if (xi->requires_grad) dx = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(xi->data.size());
        auto W = detail::as_matrix<S>(wi->data, cout, krows);
        detail::MutMatMap<S> dW(dw.data(), cout, krows);
        for (std::int64_t i = 0; i < n; ++i) {
            auto G = detail::as_matrix<S>(g, n * cout, ncols).middleRows(i * cout, cout);
            if (wi->requires_grad || xi->requires_grad)
                detail::im2col(xi->data.data() + i * cin * h * wd, cin, h, wd, kh, kw, spec.stride, spec.pad, ho, wo,
                               cols.data());
            if (wi->requires_grad) dW.noalias() += G * cols.transpose();
            if (bi->requires_grad) db += G.rowwise().sum().array();
            if (xi->requires_grad) {
                dcols.noalias() = W.transpose() * G;
                detail::col2im(dcols.data(), cin, h, wd, kh, kw, spec.stride, spec.pad, ho, wo,
                               dx.data() + i * cin * h * wd);
            }
        }
        if (xi->requires_grad) xi->accumulate(dx);
        if (wi->requires_grad) wi->accumulate(dw);
        if (bi->requires_grad) bi->accumulate(db);
    });
    return out;
}

// Direct triple-loop convolution; slow reference used by tests as an oracle.
template <class S>
TensorT<S> conv2d_naive(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b, ConvSpec spec = {}) {
    const std::int64_t n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
    const std::int64_t cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    const std::int64_t ho = conv_out_dim(h, kh, spec.stride, spec.pad);
    const std::int64_t wo = conv_out_dim(wd, kw, spec.stride, spec.pad);
    auto out = TensorT<S>::zeros({n, cout, ho, wo});
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t co = 0; co < cout; ++co)
            for (std::int64_t oi = 0; oi < ho; ++oi)
                for (std::int64_t oj = 0; oj < wo; ++oj) {
                    double acc = static_cast<double>(b.values()[co]);
                    for (std::int64_t ci = 0; ci < cin; ++ci)
                        for (std::int64_t ki = 0; ki < kh; ++ki)
                            for (std::int64_t kj = 0; kj < kw; ++kj) {
                                const std::int64_t ii = oi * spec.stride + ki - spec.pad;
                                const std::int64_t jj = oj * spec.stride + kj - spec.pad;
                                if (ii < 0 || ii >= h || jj < 0 || jj >= wd) continue;
                                acc += static_cast<double>(x.values()[((i * cin + ci) * h + ii) * wd + jj]) *
                                       static_cast<double>(w.values()[((co * cin + ci) * kh + ki) * kw + kj]);
                            }
                    out.values()[((i * cout + co) * ho + oi) * wo + oj] = static_cast<S>(acc);
                }
    return out;
}

}  // namespace sparsekd
