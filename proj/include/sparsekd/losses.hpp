#pragma once

#include <cmath>
#include <string>

#include "sparsekd/ops.hpp"
#include "sparsekd/tensor.hpp"

// Distillation objective: negative Pearson correlation between similarity
// distributions plus feature MSE. Teacher-side tensors are detached inside
// these functions, so gradients can only reach the student.

namespace sparsekd {

// -rho(P_T, P_S), averaged over batch rows for rank-2 inputs. P_T detached.
template <class S>
TensorT<S> pearson_loss(const TensorT<S>& p_t_in, const TensorT<S>& p_s_in) {
    auto p_t = p_t_in.detached_copy();
    auto p_s = p_s_in;
    if (p_t.shape() != p_s.shape())
        throw ShapeError("pearson_loss: shape mismatch " + shape_str(p_t.shape()) + " vs " + shape_str(p_s.shape()));
    if (p_t.rank() == 1) {
        p_t = reshape(p_t, {std::int64_t(1), p_t.size()});
        p_s = reshape(p_s, {std::int64_t(1), p_s.size()});
    }
    detail::check_rank("pearson_loss", p_t, 2);
    const std::int64_t k = p_t.dim(1);
    if (k < 2) throw ShapeError("pearson_loss: need length >= 2, got " + std::to_string(k));

    // Undefined correlation on (near-)constant rows is an error, not a NaN.
    for (std::int64_t r = 0; r < p_t.dim(0); ++r) {
        for (const auto* v : {&p_t, &p_s}) {
            double mu = 0.0;
            for (std::int64_t j = 0; j < k; ++j) mu += static_cast<double>(v->values()[r * k + j]);
            mu /= static_cast<double>(k);
            double var = 0.0;
            for (std::int64_t j = 0; j < k; ++j) {
                const double d = static_cast<double>(v->values()[r * k + j]) - mu;
                var += d * d;
            }
            var /= static_cast<double>(k);
            if (var <= 1e-12)
                throw NumericError("pearson_loss: " + std::string(v == &p_t ? "teacher" : "student") + " row " +
                                   std::to_string(r) + " is constant (variance " + std::to_string(var) + ")");
        }
    }

    auto ct = sub_col(p_t, row_mean(p_t));
    auto cs = sub_col(p_s, row_mean(p_s));
    auto num = row_sum(mul(ct, cs));
    auto den = sqrt_op(mul(row_sum(mul(ct, ct)), row_sum(mul(cs, cs))));
    return neg(mean_all(div(num, den)));
}

// Mean squared difference over every token entry; teacher tokens detached.
template <class S>
TensorT<S> feature_mse(const TensorT<S>& t_teacher, const TensorT<S>& t_student) {
    if (t_teacher.shape() != t_student.shape())
        throw ShapeError("feature_mse: shape mismatch " + shape_str(t_teacher.shape()) + " vs " +
                         shape_str(t_student.shape()));
    auto d = sub(t_student, t_teacher.detached_copy());
    return mean_all(mul(d, d));
}

template <class S>
struct LossBreakdownT {
    TensorT<S> total;  // scalar on the tape
    double l_sim = 0.0;
    double l_feat = 0.0;
    double total_value = 0.0;
    double w_sim = 1.0, w_feat = 1.0;
    bool sim_skipped = false;  // queue warm-up: the similarity term was not computed
};

// Weighted sum; pass undefined distributions (sim_ready=false) during queue
// warm-up to get the flagged feature-only objective.
template <class S>
LossBreakdownT<S> total_loss(const TensorT<S>& p_t, const TensorT<S>& p_s, const TensorT<S>& tok_t,
                             const TensorT<S>& tok_s, double w_sim, double w_feat, bool sim_ready) {
    LossBreakdownT<S> out;
    out.w_sim = w_sim;
    out.w_feat = w_feat;
    auto feat = feature_mse(tok_t, tok_s);
    out.l_feat = static_cast<double>(feat.item());
    if (sim_ready && w_sim != 0.0) {
        auto sim = pearson_loss(p_t, p_s);
        out.l_sim = static_cast<double>(sim.item());
        if (!(out.l_sim >= -1.0 - 1e-6 && out.l_sim <= 1.0 + 1e-6))
            throw NumericError("total_loss: similarity loss " + std::to_string(out.l_sim) + " outside [-1,1]");
        out.total = add(scale(sim, w_sim), scale(feat, w_feat));
    } else {
        out.sim_skipped = !sim_ready;
        out.total = scale(feat, w_feat);
    }
    out.total_value = static_cast<double>(out.total.item());
    if (!std::isfinite(out.total_value) || !std::isfinite(out.l_feat) || !std::isfinite(out.l_sim))
        throw NumericError("total_loss: non-finite loss (l_sim=" + std::to_string(out.l_sim) +
                           ", l_feat=" + std::to_string(out.l_feat) + ")");
    return out;
}

}  // namespace sparsekd
