#pragma once

#include <functional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "sparsekd/tensor.hpp"

// Central-difference validation of tape gradients. The function under test
// must be deterministic; we verify that by running it twice.

namespace sparsekd {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::vector<std::pair<std::string, double>> per_param;  // name -> max rel error
};

template <class S>
GradCheckReport grad_check(const std::function<TensorT<S>()>& fn,
                           const std::vector<std::pair<std::string, TensorT<S>>>& params, double epsilon = 1e-5,
                           std::int64_t subsample = 64, std::uint64_t seed = 17) {
    if (!(epsilon > 0.0) || epsilon > 1e-3)
        throw ConfigError("grad_check: epsilon " + std::to_string(epsilon) + " outside (0, 1e-3]");

    auto eval = [&]() -> S {
        NoGradGuard<S> ng;
        return fn().item();
    };

    // Determinism gate: two forward passes must agree bitwise.
    const S f1 = eval();
    const S f2 = eval();
    if (std::memcmp(&f1, &f2, sizeof(S)) != 0)
        throw NumericError("grad_check: function is not deterministic (two forward passes differ)");

    // Analytic gradients.
    auto& tape = TapeT<S>::active();
    tape.clear();
    for (auto& [name, p] : params) {
        const_cast<TensorT<S>&>(p).set_requires_grad(true);
        const_cast<TensorT<S>&>(p).zero_grad();
    }
    auto loss = fn();
    backward(loss);
    std::vector<Eigen::Array<S, Eigen::Dynamic, 1>> analytic;
    for (auto& [name, p] : params)
        analytic.push_back(p.has_grad() ? p.grad() : Eigen::Array<S, Eigen::Dynamic, 1>::Zero(p.size()).eval());
    tape.clear();

    GradCheckReport report;
    std::mt19937_64 rng(splitmix64(seed));
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        auto p = params[pi].second;  // handle copy: shares (and perturbs) the same storage
        const std::int64_t n = p.size();
        // Check every coordinate of small tensors, a random subsample otherwise.
        std::vector<std::int64_t> idx(static_cast<std::size_t>(n));
        for (std::int64_t i = 0; i < n; ++i) idx[static_cast<std::size_t>(i)] = i;
        std::int64_t take = n;
        if (n > subsample) {
            take = std::max<std::int64_t>(subsample, 32);
            for (std::int64_t i = 0; i < take; ++i) {
                std::uniform_int_distribution<std::int64_t> pick(i, n - 1);
                std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(pick(rng))]);
            }
        }
        double worst = 0.0;
        for (std::int64_t k = 0; k < take; ++k) {
            const std::int64_t i = idx[static_cast<std::size_t>(k)];
            const S saved = p.values()[i];
            p.values()[i] = saved + static_cast<S>(epsilon);
            const double fp = static_cast<double>(eval());
            p.values()[i] = saved - static_cast<S>(epsilon);
            const double fm = static_cast<double>(eval());
            p.values()[i] = saved;
            const double numeric = (fp - fm) / (2.0 * epsilon);
            const double a = static_cast<double>(analytic[pi][i]);
            const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
            worst = std::max(worst, rel);
        }
        report.per_param.emplace_back(params[pi].first, worst);
        report.max_rel_error = std::max(report.max_rel_error, worst);
    }
    return report;
}

}  // namespace sparsekd
