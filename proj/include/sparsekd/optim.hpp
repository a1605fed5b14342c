#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "sparsekd/tensor.hpp"

// Momentum-SGD with coupled weight decay and global gradient-norm clipping,
// plus an opt-in per-parameter trust-ratio scaling in the LAMB spirit.

namespace sparsekd {

struct OptimizerConfig {
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double clip_norm = 5.0;  // <= 0 disables clipping
    bool trust_ratio = false;
};

// Linear warm-up from 0 to base over warm-up steps, cosine decay to 0 after.
inline double lr_at(std::int64_t step, double base_lr, std::int64_t warmup_steps, std::int64_t total_steps) {
    if (step < 0) throw ConfigError("lr_at: negative step");
    if (total_steps <= 0) throw ConfigError("lr_at: total steps must be positive");
    if (step >= total_steps) return 0.0;
    if (warmup_steps > 0 && step < warmup_steps)
        return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    const double t = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

template <class S>
class OptimizerT {
   public:
    using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

    OptimizerT(std::vector<std::pair<std::string, TensorT<S>>> params, OptimizerConfig cfg)
        : params_(std::move(params)), cfg_(cfg) {
        for (auto& [name, p] : params_) velocity_.push_back(Array::Zero(p.size()));
    }

    // Scales all gradients so their global L2 norm is at most clip_norm.
    // Returns the pre-clip norm. Applied before the momentum update.
    double clip_gradients() {
        double sq = 0.0;
        for (auto& [name, p] : params_) {
            if (!p.has_grad()) throw Error("optimizer_step: missing gradient for parameter " + name);
            const auto& g = p.grad();
            for (std::int64_t i = 0; i < g.size(); ++i) {
                const double v = static_cast<double>(g[i]);
                sq += v * v;
            }
        }
        const double norm = std::sqrt(sq);
        if (!std::isfinite(norm)) throw NumericError("optimizer_step: non-finite gradient norm");
        if (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) {
            const S s = static_cast<S>(cfg_.clip_norm / norm);
            for (auto& [name, p] : params_) p.grad() *= s;
        }
        return norm;
    }

    void step(double lr) {
        clip_gradients();
        for (std::size_t k = 0; k < params_.size(); ++k) {
            auto& p = params_[k].second;
            Array g = p.grad() + static_cast<S>(cfg_.weight_decay) * p.values();
            velocity_[k] = static_cast<S>(cfg_.momentum) * velocity_[k] + g;
            double scale = lr;
            if (cfg_.trust_ratio) {
                const double pn = std::sqrt(static_cast<double>((p.values() * p.values()).sum()));
                const double un = std::sqrt(static_cast<double>((velocity_[k] * velocity_[k]).sum()));
                if (pn > 0.0 && un > 0.0) scale *= pn / un;
            }
            p.values() -= static_cast<S>(scale) * velocity_[k];
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.zero_grad();
    }

    const std::vector<std::pair<std::string, TensorT<S>>>& params() const { return params_; }
    std::vector<Array>& velocity() { return velocity_; }
    const OptimizerConfig& config() const { return cfg_; }

   private:
    std::vector<std::pair<std::string, TensorT<S>>> params_;
    OptimizerConfig cfg_;
    std::vector<Array> velocity_;
};

}  // namespace sparsekd
