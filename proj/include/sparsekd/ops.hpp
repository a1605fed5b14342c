#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "sparsekd/tensor.hpp"

// Elementwise, reduction, matrix and normalization ops. Reductions accumulate
// in double even when the scalar type is float.

namespace sparsekd {

namespace detail {

template <class S>
void check_same_shape(const char* op, const TensorT<S>& a, const TensorT<S>& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class S>
void check_rank(const char* op, const TensorT<S>& a, int rank) {
    if (a.rank() != rank)
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got shape " +
                         shape_str(a.shape()));
}

}  // namespace detail

template <class S>
TensorT<S> add(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("add", a, b);
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values() + b.values();
    auto ai = a.impl(), bi = b.impl();
    TapeT<S>::active().record("add", out, {&a, &b}, [ai, bi](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g);
        if (bi->requires_grad) bi->accumulate(g);
    });
    return out;
}

template <class S>
TensorT<S> sub(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("sub", a, b);
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values() - b.values();
    auto ai = a.impl(), bi = b.impl();
    TapeT<S>::active().record("sub", out, {&a, &b}, [ai, bi](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g);
        if (bi->requires_grad) bi->accumulate(-g);
    });
    return out;
}

template <class S>
TensorT<S> mul(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("mul", a, b);
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values() * b.values();
    auto ai = a.impl(), bi = b.impl();
    TapeT<S>::active().record("mul", out, {&a, &b}, [ai, bi](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g * bi->data);
        if (bi->requires_grad) bi->accumulate(g * ai->data);
    });
    return out;
}

template <class S>
TensorT<S> div(const TensorT<S>& a, const TensorT<S>& b) {
    detail::check_same_shape("div", a, b);
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values() / b.values();
    auto ai = a.impl(), bi = b.impl();
    TapeT<S>::active().record("div", out, {&a, &b}, [ai, bi](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g / bi->data);
        if (bi->requires_grad) bi->accumulate(-g * ai->data / (bi->data * bi->data));
    });
    return out;
}

template <class S>
TensorT<S> scale(const TensorT<S>& a, double c) {
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values() * static_cast<S>(c);
    auto ai = a.impl();
    TapeT<S>::active().record("scale", out, {&a}, [ai, c](const auto& g) {
        if (ai->requires_grad) ai->accumulate((g * static_cast<S>(c)).eval());
    });
    return out;
}

template <class S>
TensorT<S> neg(const TensorT<S>& a) {
    return scale(a, -1.0);
}

template <class S>
TensorT<S> add_scalar(const TensorT<S>& a, double c) {
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values() + static_cast<S>(c);
    auto ai = a.impl();
    TapeT<S>::active().record("add_scalar", out, {&a}, [ai](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g);
    });
    return out;
}

template <class S>
TensorT<S> exp_op(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values().exp();
    auto ai = a.impl(), oi = out.impl();
    TapeT<S>::active().record("exp", out, {&a}, [ai, oi](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g * oi->data);
    });
    return out;
}

template <class S>
TensorT<S> sqrt_op(const TensorT<S>& a) {
    if ((a.values() <= S(0)).any()) throw NumericError("sqrt: non-positive input");
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values().sqrt();
    auto ai = a.impl(), oi = out.impl();
    TapeT<S>::active().record("sqrt", out, {&a}, [ai, oi](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g / (S(2) * oi->data));
    });
    return out;
}

template <class S>
TensorT<S> relu(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    out.values() = a.values().max(S(0));
    auto ai = a.impl();
    TapeT<S>::active().record("relu", out, {&a}, [ai](const auto& g) {
        if (ai->requires_grad) ai->accumulate((g * (ai->data > S(0)).template cast<S>()).eval());
    });
    return out;
}

template <class S>
TensorT<S> gelu(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros(a.shape());
    const auto n = a.size();
    for (std::int64_t i = 0; i < n; ++i) {
        const double x = static_cast<double>(a.values()[i]);
        out.values()[i] = static_cast<S>(0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))));
    }
    auto ai = a.impl();
    TapeT<S>::active().record("gelu", out, {&a}, [ai](const auto& g) {
        if (!ai->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(ai->data.size());
        for (std::int64_t i = 0; i < ai->data.size(); ++i) {
            const double x = static_cast<double>(ai->data[i]);
            const double cdf = 0.5 * (1.0 + std::erf(x / std::sqrt(2.0)));
            const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * M_PI);
            gx[i] = static_cast<S>(g[i] * (cdf + x * pdf));
        }
        ai->accumulate(gx);
    });
    return out;
}

namespace detail {

template <class S>
using MatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
template <class S>
using MutMatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <class S>
MatMap<S> as_matrix(const Eigen::Array<S, Eigen::Dynamic, 1>& a, std::int64_t r, std::int64_t c) {
    return MatMap<S>(a.data(), r, c);
}

}  // namespace detail

// C = op(A) * op(B) on rank-2 tensors; trans flags transpose the operand.
template <class S>
TensorT<S> matmul(const TensorT<S>& a, const TensorT<S>& b, bool trans_a = false, bool trans_b = false) {
    detail::check_rank("matmul", a, 2);
    detail::check_rank("matmul", b, 2);
    const std::int64_t m = trans_a ? a.dim(1) : a.dim(0);
    const std::int64_t ka = trans_a ? a.dim(0) : a.dim(1);
    const std::int64_t kb = trans_b ? b.dim(1) : b.dim(0);
    const std::int64_t n = trans_b ? b.dim(0) : b.dim(1);
    if (ka != kb)
        throw ShapeError("matmul: inner dims " + std::to_string(ka) + " vs " + std::to_string(kb) + " for shapes " +
                         shape_str(a.shape()) + (trans_a ? "^T" : "") + " x " + shape_str(b.shape()) +
                         (trans_b ? "^T" : ""));
    auto out = TensorT<S>::zeros({m, n});
    auto A = detail::as_matrix<S>(a.values(), a.dim(0), a.dim(1));
    auto B = detail::as_matrix<S>(b.values(), b.dim(0), b.dim(1));
    detail::MutMatMap<S> C(out.data(), m, n);
    if (!trans_a && !trans_b)
        C.noalias() = A * B;
    else if (!trans_a && trans_b)
        C.noalias() = A * B.transpose();
    else if (trans_a && !trans_b)
        C.noalias() = A.transpose() * B;
    else
        C.noalias() = A.transpose() * B.transpose();

    auto ai = a.impl(), bi = b.impl();
    TapeT<S>::active().record("matmul", out, {&a, &b}, [ai, bi, m, n, trans_a, trans_b](const auto& g) {
        auto A = detail::as_matrix<S>(ai->data, ai->shape[0], ai->shape[1]);
        auto B = detail::as_matrix<S>(bi->data, bi->shape[0], bi->shape[1]);
        auto G = detail::as_matrix<S>(g, m, n);
        if (ai->requires_grad) {
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dA(ai->shape[0], ai->shape[1]);
            if (!trans_a && !trans_b)
                dA.noalias() = G * B.transpose();
            else if (!trans_a && trans_b)
                dA.noalias() = G * B;
            else if (trans_a && !trans_b)
                dA.noalias() = B * G.transpose();
            else
                dA.noalias() = B.transpose() * G.transpose();
            ai->accumulate(Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(dA.data(), dA.size()));
        }
        if (bi->requires_grad) {
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dB(bi->shape[0], bi->shape[1]);
            if (!trans_a && !trans_b)
                dB.noalias() = A.transpose() * G;
            else if (!trans_a && trans_b)
                dB.noalias() = G.transpose() * A;
            else if (trans_a && !trans_b)
                dB.noalias() = A * G;
            else
                dB.noalias() = G.transpose() * A.transpose();
            bi->accumulate(Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(dB.data(), dB.size()));
        }
    });
    return out;
}

// y = x W^T + b with x:(N,in), W:(out,in), b:(out).
template <class S>
TensorT<S> linear(const TensorT<S>& x, const TensorT<S>& w, const TensorT<S>& b) {
    detail::check_rank("linear", x, 2);
    detail::check_rank("linear", w, 2);
    if (x.dim(1) != w.dim(1))
        throw ShapeError("linear: input dim " + std::to_string(x.dim(1)) + " vs weight dim " +
                         std::to_string(w.dim(1)));
    if (b.size() != w.dim(0))
        throw ShapeError("linear: bias size " + std::to_string(b.size()) + " vs out dim " + std::to_string(w.dim(0)));
    const std::int64_t n = x.dim(0), out_d = w.dim(0);
    auto out = TensorT<S>::zeros({n, out_d});
    auto X = detail::as_matrix<S>(x.values(), n, x.dim(1));
    auto W = detail::as_matrix<S>(w.values(), out_d, w.dim(1));
    detail::MutMatMap<S> Y(out.data(), n, out_d);
    Y.noalias() = X * W.transpose();
    Y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data(), out_d);

    auto xi = x.impl(), wi = w.impl(), bi = b.impl();
    TapeT<S>::active().record("linear", out, {&x, &w, &b}, [xi, wi, bi, n, out_d](const auto& g) {
        auto X = detail::as_matrix<S>(xi->data, n, xi->shape[1]);
        auto W = detail::as_matrix<S>(wi->data, out_d, wi->shape[1]);
        auto G = detail::as_matrix<S>(g, n, out_d);
        if (xi->requires_grad) {
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dX(n, xi->shape[1]);
            dX.noalias() = G * W;
            xi->accumulate(Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(dX.data(), dX.size()));
        }
        if (wi->requires_grad) {
            Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> dW(out_d, wi->shape[1]);
            dW.noalias() = G.transpose() * X;
            wi->accumulate(Eigen::Map<const Eigen::Array<S, Eigen::Dynamic, 1>>(dW.data(), dW.size()));
        }
        if (bi->requires_grad) {
            Eigen::Array<S, Eigen::Dynamic, 1> db = G.colwise().sum().transpose().array();
            bi->accumulate(db);
        }
    });
    return out;
}

template <class S>
TensorT<S> reshape(const TensorT<S>& a, Shape new_shape) {
    if (shape_numel(new_shape) != a.size())
        throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(new_shape));
    auto out = TensorT<S>::zeros(std::move(new_shape));
    out.values() = a.values();
    auto ai = a.impl();
    TapeT<S>::active().record("reshape", out, {&a}, [ai](const auto& g) {
        if (ai->requires_grad) ai->accumulate(g);
    });
    return out;
}

template <class S>
TensorT<S> sum_all(const TensorT<S>& a) {
    auto out = TensorT<S>::zeros({});
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.values()[i]);
    out.values()[0] = static_cast<S>(acc);
    auto ai = a.impl();
    TapeT<S>::active().record("sum_all", out, {&a}, [ai](const auto& g) {
        if (ai->requires_grad)
            ai->accumulate(Eigen::Array<S, Eigen::Dynamic, 1>::Constant(ai->data.size(), g[0]));
    });
    return out;
}

template <class S>
TensorT<S> mean_all(const TensorT<S>& a) {
    if (a.size() == 0) throw ShapeError("mean_all: empty tensor");
    auto out = TensorT<S>::zeros({});
    double acc = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a.values()[i]);
    out.values()[0] = static_cast<S>(acc / static_cast<double>(a.size()));
    auto ai = a.impl();
    TapeT<S>::active().record("mean_all", out, {&a}, [ai](const auto& g) {
        if (ai->requires_grad) {
            const S c = static_cast<S>(static_cast<double>(g[0]) / static_cast<double>(ai->data.size()));
            ai->accumulate(Eigen::Array<S, Eigen::Dynamic, 1>::Constant(ai->data.size(), c));
        }
    });
    return out;
}

// Row reductions and broadcasts on rank-2 tensors; results have shape (R,1).
template <class S>
TensorT<S> row_sum(const TensorT<S>& a) {
    detail::check_rank("row_sum", a, 2);
    const std::int64_t r = a.dim(0), c = a.dim(1);
    auto out = TensorT<S>::zeros({r, 1});
    for (std::int64_t i = 0; i < r; ++i) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < c; ++j) acc += static_cast<double>(a.values()[i * c + j]);
        out.values()[i] = static_cast<S>(acc);
    }
    auto ai = a.impl();
    TapeT<S>::active().record("row_sum", out, {&a}, [ai, r, c](const auto& g) {
        if (!ai->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(r * c);
        for (std::int64_t i = 0; i < r; ++i) gx.segment(i * c, c).setConstant(g[i]);
        ai->accumulate(gx);
    });
    return out;
}

template <class S>
TensorT<S> row_mean(const TensorT<S>& a) {
    auto s = row_sum(a);
    return scale(s, 1.0 / static_cast<double>(a.dim(1)));
}

// x - m broadcast over columns, x:(R,C), m:(R,1).
template <class S>
TensorT<S> sub_col(const TensorT<S>& x, const TensorT<S>& m) {
    detail::check_rank("sub_col", x, 2);
    if (m.rank() != 2 || m.dim(1) != 1 || m.dim(0) != x.dim(0))
        throw ShapeError("sub_col: column shape " + shape_str(m.shape()) + " does not broadcast over " +
                         shape_str(x.shape()));
    const std::int64_t r = x.dim(0), c = x.dim(1);
    auto out = TensorT<S>::zeros(x.shape());
    for (std::int64_t i = 0; i < r; ++i)
        out.values().segment(i * c, c) = x.values().segment(i * c, c) - m.values()[i];
    auto xi = x.impl(), mi = m.impl();
    TapeT<S>::active().record("sub_col", out, {&x, &m}, [xi, mi, r, c](const auto& g) {
        if (xi->requires_grad) xi->accumulate(g);
        if (mi->requires_grad) {
            Eigen::Array<S, Eigen::Dynamic, 1> gm(r);
            for (std::int64_t i = 0; i < r; ++i) {
                double acc = 0.0;
                for (std::int64_t j = 0; j < c; ++j) acc += static_cast<double>(g[i * c + j]);
                gm[i] = static_cast<S>(-acc);
            }
            mi->accumulate(gm);
        }
    });
    return out;
}

// Row-wise softmax with max-subtraction; x:(R,C).
template <class S>
TensorT<S> softmax_rows(const TensorT<S>& x) {
    detail::check_rank("softmax_rows", x, 2);
    const std::int64_t r = x.dim(0), c = x.dim(1);
    if (c == 0) throw ShapeError("softmax_rows: zero columns");
    auto out = TensorT<S>::zeros(x.shape());
    for (std::int64_t i = 0; i < r; ++i) {
        const auto row = x.values().segment(i * c, c);
        const S m = row.maxCoeff();
        double denom = 0.0;
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - m));
        for (std::int64_t j = 0; j < c; ++j)
            out.values()[i * c + j] = static_cast<S>(std::exp(static_cast<double>(row[j] - m)) / denom);
    }
    auto xi = x.impl(), oi = out.impl();
    TapeT<S>::active().record("softmax_rows", out, {&x}, [xi, oi, r, c](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(r * c);
        for (std::int64_t i = 0; i < r; ++i) {
            const auto y = oi->data.segment(i * c, c);
            const auto gy = g.segment(i * c, c);
            double dot = 0.0;
            for (std::int64_t j = 0; j < c; ++j) dot += static_cast<double>(y[j]) * static_cast<double>(gy[j]);
            gx.segment(i * c, c) = y * (gy - static_cast<S>(dot));
        }
        xi->accumulate(gx);
    });
    return out;
}

// Row-wise layer normalization with affine parameters, x:(R,C).
template <class S>
TensorT<S> layernorm_rows(const TensorT<S>& x, const TensorT<S>& gamma, const TensorT<S>& beta, double eps = 1e-5) {
    detail::check_rank("layernorm_rows", x, 2);
    const std::int64_t r = x.dim(0), c = x.dim(1);
    if (gamma.size() != c || beta.size() != c)
        throw ShapeError("layernorm_rows: affine size " + std::to_string(gamma.size()) + " vs feature dim " +
                         std::to_string(c));
    auto out = TensorT<S>::zeros(x.shape());
    Eigen::Array<S, Eigen::Dynamic, 1> inv_std(r), mean(r);
    for (std::int64_t i = 0; i < r; ++i) {
        const auto row = x.values().segment(i * c, c);
        double mu = 0.0;
        for (std::int64_t j = 0; j < c; ++j) mu += static_cast<double>(row[j]);
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::int64_t j = 0; j < c; ++j) {
            const double d = static_cast<double>(row[j]) - mu;
            var += d * d;
        }
        var /= static_cast<double>(c);
        mean[i] = static_cast<S>(mu);
        inv_std[i] = static_cast<S>(1.0 / std::sqrt(var + eps));
        out.values().segment(i * c, c) =
            (row - mean[i]) * inv_std[i] * gamma.values() + beta.values();
    }
    auto xi = x.impl(), gi = gamma.impl(), bi = beta.impl();
    TapeT<S>::active().record(
        "layernorm_rows", out, {&x, &gamma, &beta}, [xi, gi, bi, r, c, mean, inv_std](const auto& g) {
            Eigen::Array<S, Eigen::Dynamic, 1> gx(r * c), dgamma(c), dbeta(c);
            dgamma.setZero();
            dbeta.setZero();
            for (std::int64_t i = 0; i < r; ++i) {
                const auto row = xi->data.segment(i * c, c);
                const auto gy = g.segment(i * c, c);
                Eigen::Array<S, Eigen::Dynamic, 1> xhat = (row - mean[i]) * inv_std[i];
                dgamma += gy * xhat;
                dbeta += gy;
                if (xi->requires_grad) {
                    Eigen::Array<S, Eigen::Dynamic, 1> gh = gy * gi->data;
                    double mg = 0.0, mgx = 0.0;
                    for (std::int64_t j = 0; j < c; ++j) {
                        mg += static_cast<double>(gh[j]);
                        mgx += static_cast<double>(gh[j]) * static_cast<double>(xhat[j]);
                    }
                    mg /= static_cast<double>(c);
                    mgx /= static_cast<double>(c);
                    gx.segment(i * c, c) = inv_std[i] * (gh - static_cast<S>(mg) - xhat * static_cast<S>(mgx));
                }
            }
            if (xi->requires_grad) xi->accumulate(gx);
            if (gi->requires_grad) gi->accumulate(dgamma);
            if (bi->requires_grad) bi->accumulate(dbeta);
        });
    return out;
}

// L2-normalizes each row of a rank-2 tensor.
template <class S>
TensorT<S> l2_normalize_rows(const TensorT<S>& x) {
    detail::check_rank("l2_normalize_rows", x, 2);
    const std::int64_t r = x.dim(0), c = x.dim(1);
    auto out = TensorT<S>::zeros(x.shape());
    Eigen::Array<S, Eigen::Dynamic, 1> inv_norm(r);
    for (std::int64_t i = 0; i < r; ++i) {
        const auto row = x.values().segment(i * c, c);
        double nrm = 0.0;
        for (std::int64_t j = 0; j < c; ++j) nrm += static_cast<double>(row[j]) * static_cast<double>(row[j]);
        nrm = std::sqrt(nrm);
        if (nrm < 1e-12) throw NumericError("l2_normalize_rows: zero row " + std::to_string(i));
        inv_norm[i] = static_cast<S>(1.0 / nrm);
        out.values().segment(i * c, c) = row * inv_norm[i];
    }
    auto xi = x.impl(), oi = out.impl();
    TapeT<S>::active().record("l2_normalize_rows", out, {&x}, [xi, oi, r, c, inv_norm](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(r * c);
        for (std::int64_t i = 0; i < r; ++i) {
            const auto y = oi->data.segment(i * c, c);
            const auto gy = g.segment(i * c, c);
            double dot = 0.0;
            for (std::int64_t j = 0; j < c; ++j) dot += static_cast<double>(y[j]) * static_cast<double>(gy[j]);
            gx.segment(i * c, c) = (gy - y * static_cast<S>(dot)) * inv_norm[i];
        }
        xi->accumulate(gx);
    });
    return out;
}

// Mean over dim 1 of a rank-3 tensor (B,T,D) -> (B,D).
template <class S>
TensorT<S> mean_dim1(const TensorT<S>& x) {
    detail::check_rank("mean_dim1", x, 3);
    const std::int64_t b = x.dim(0), t = x.dim(1), d = x.dim(2);
    if (t == 0) throw ShapeError("mean_dim1: empty middle dim");
    auto out = TensorT<S>::zeros({b, d});
    for (std::int64_t i = 0; i < b; ++i)
        for (std::int64_t j = 0; j < d; ++j) {
            double acc = 0.0;
            for (std::int64_t k = 0; k < t; ++k) acc += static_cast<double>(x.values()[(i * t + k) * d + j]);
            out.values()[i * d + j] = static_cast<S>(acc / static_cast<double>(t));
        }
    auto xi = x.impl();
    TapeT<S>::active().record("mean_dim1", out, {&x}, [xi, b, t, d](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(b * t * d);
        for (std::int64_t i = 0; i < b; ++i)
            for (std::int64_t k = 0; k < t; ++k)
                gx.segment((i * t + k) * d, d) = g.segment(i * d, d) / static_cast<S>(t);
        xi->accumulate(gx);
    });
    return out;
}

// Spatial mean pool (N,C,H,W) -> (N,C).
template <class S>
TensorT<S> mean_pool_hw(const TensorT<S>& x) {
    detail::check_rank("mean_pool_hw", x, 4);
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    auto out = TensorT<S>::zeros({n, c});
    for (std::int64_t i = 0; i < n * c; ++i) {
        double acc = 0.0;
        for (std::int64_t p = 0; p < hw; ++p) acc += static_cast<double>(x.values()[i * hw + p]);
        out.values()[i] = static_cast<S>(acc / static_cast<double>(hw));
    }
    auto xi = x.impl();
    TapeT<S>::active().record("mean_pool_hw", out, {&x}, [xi, n, c, hw](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(n * c * hw);
        for (std::int64_t i = 0; i < n * c; ++i) gx.segment(i * hw, hw).setConstant(g[i] / static_cast<S>(hw));
        xi->accumulate(gx);
    });
    return out;
}

// Nearest-neighbor 2x upsample (N,C,H,W) -> (N,C,2H,2W).
template <class S>
TensorT<S> upsample_nearest2(const TensorT<S>& x) {
    detail::check_rank("upsample_nearest2", x, 4);
    const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    auto out = TensorT<S>::zeros({n, c, 2 * h, 2 * w});
    for (std::int64_t nc = 0; nc < n * c; ++nc)
        for (std::int64_t i = 0; i < h; ++i)
            for (std::int64_t j = 0; j < w; ++j) {
                const S v = x.values()[(nc * h + i) * w + j];
                const std::int64_t base = nc * 4 * h * w;
                out.values()[base + (2 * i) * 2 * w + 2 * j] = v;
                out.values()[base + (2 * i) * 2 * w + 2 * j + 1] = v;
                out.values()[base + (2 * i + 1) * 2 * w + 2 * j] = v;
                out.values()[base + (2 * i + 1) * 2 * w + 2 * j + 1] = v;
            }
    auto xi = x.impl();
    TapeT<S>::active().record("upsample_nearest2", out, {&x}, [xi, n, c, h, w](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(n * c * h * w);
        for (std::int64_t nc = 0; nc < n * c; ++nc)
            for (std::int64_t i = 0; i < h; ++i)
                for (std::int64_t j = 0; j < w; ++j) {
                    const std::int64_t base = nc * 4 * h * w;
                    gx[(nc * h + i) * w + j] = g[base + (2 * i) * 2 * w + 2 * j] + g[base + (2 * i) * 2 * w + 2 * j + 1] +
                                               g[base + (2 * i + 1) * 2 * w + 2 * j] +
                                               g[base + (2 * i + 1) * 2 * w + 2 * j + 1];
                }
        xi->accumulate(gx);
    });
    return out;
}

// (N,C,H,W) -> (N*H*W, C): one row per spatial token, batch-major.
template <class S>
TensorT<S> nchw_to_tokens(const TensorT<S>& x) {
    detail::check_rank("nchw_to_tokens", x, 4);
    const std::int64_t n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
    auto out = TensorT<S>::zeros({n * hw, c});
    for (std::int64_t b = 0; b < n; ++b)
        for (std::int64_t ch = 0; ch < c; ++ch)
            for (std::int64_t p = 0; p < hw; ++p)
                out.values()[(b * hw + p) * c + ch] = x.values()[(b * c + ch) * hw + p];
    auto xi = x.impl();
    TapeT<S>::active().record("nchw_to_tokens", out, {&x}, [xi, n, c, hw](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx(n * c * hw);
        for (std::int64_t b = 0; b < n; ++b)
            for (std::int64_t ch = 0; ch < c; ++ch)
                for (std::int64_t p = 0; p < hw; ++p) gx[(b * c + ch) * hw + p] = g[(b * hw + p) * c + ch];
        xi->accumulate(gx);
    });
    return out;
}

// Mean cross-entropy between logits (N,C) and integer labels.
template <class S>
TensorT<S> cross_entropy_mean(const TensorT<S>& logits, const std::vector<int>& labels) {
    detail::check_rank("cross_entropy_mean", logits, 2);
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    if (static_cast<std::int64_t>(labels.size()) != n)
        throw ShapeError("cross_entropy_mean: " + std::to_string(labels.size()) + " labels vs " + std::to_string(n) +
                         " rows");
    for (int y : labels)
        if (y < 0 || y >= c) throw DataError("cross_entropy_mean: label " + std::to_string(y) + " outside [0," +
                                             std::to_string(c) + ")");
    auto out = TensorT<S>::zeros({});
    // Save softmax probabilities for backward.
    Eigen::Array<S, Eigen::Dynamic, 1> probs(n * c);
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        const auto row = logits.values().segment(i * c, c);
        const S m = row.maxCoeff();
        double denom = 0.0;
        for (std::int64_t j = 0; j < c; ++j) denom += std::exp(static_cast<double>(row[j] - m));
        for (std::int64_t j = 0; j < c; ++j)
            probs[i * c + j] = static_cast<S>(std::exp(static_cast<double>(row[j] - m)) / denom);
        loss -= static_cast<double>(row[labels[static_cast<std::size_t>(i)]] - m) - std::log(denom);
    }
    out.values()[0] = static_cast<S>(loss / static_cast<double>(n));
    auto xi = logits.impl();
    TapeT<S>::active().record("cross_entropy_mean", out, {&logits}, [xi, probs, labels, n, c](const auto& g) {
        if (!xi->requires_grad) return;
        Eigen::Array<S, Eigen::Dynamic, 1> gx = probs;
        for (std::int64_t i = 0; i < n; ++i) gx[i * c + labels[static_cast<std::size_t>(i)]] -= S(1);
        xi->accumulate((gx * (g[0] / static_cast<S>(n))).eval());
    });
    return out;
}

}  // namespace sparsekd
