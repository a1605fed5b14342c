#pragma once

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "sparsekd/dataset.hpp"
#include "sparsekd/ops.hpp"
#include "sparsekd/optim.hpp"
#include "sparsekd/student.hpp"

// Linear-probe evaluation: a two-layer MLP head (linear, ReLU, linear) on
// average-pooled dense-twin backbone features. The backbone stays frozen by
// default; --finetune trains it jointly.

namespace sparsekd {

struct ProbeConfig {
    std::int64_t epochs = 40;
    std::int64_t batch = 64;
    std::int64_t hidden = 128;
    double lr = 0.05;
    double momentum = 0.9;
    std::uint64_t seed = 1;
    bool finetune = false;
};

struct ProbeResult {
    double train_acc = 0.0;
    double val_acc = 0.0;
};

template <class S>
struct ProbeHeadT {
    TensorT<S> w1, b1, w2, b2;

    ProbeHeadT(std::int64_t feat, std::int64_t hidden, std::int64_t classes, std::uint64_t seed) {
        if (feat < 1 || hidden < 1) throw ConfigError("probe: feature/hidden dims must be positive");
        if (classes < 2) throw ConfigError("probe: need at least 2 classes, got " + std::to_string(classes));
        w1 = TensorT<S>::randn({hidden, feat}, mix_seed(seed, 0x9b0e, 0), 0.0,
                               std::sqrt(2.0 / static_cast<double>(feat)));
        b1 = TensorT<S>::zeros({hidden});
        w2 = TensorT<S>::randn({classes, hidden}, mix_seed(seed, 0x9b0e, 1), 0.0,
                               std::sqrt(1.0 / static_cast<double>(hidden)));
        b2 = TensorT<S>::zeros({classes});
        for (auto* t : {&w1, &b1, &w2, &b2}) t->set_requires_grad(true);
    }

    TensorT<S> logits(const TensorT<S>& x) const { return linear(relu(linear(x, w1, b1)), w2, b2); }

    std::vector<std::pair<std::string, TensorT<S>>> params() {
        return {{"probe.w1", w1}, {"probe.b1", b1}, {"probe.w2", w2}, {"probe.b2", b2}};
    }
};

namespace detail {

template <class S>
TensorT<S> gather_rows(const TensorT<S>& mat, const std::vector<std::int64_t>& rows) {
    const std::int64_t f = mat.dim(1);
    auto out = TensorT<S>::zeros({static_cast<std::int64_t>(rows.size()), f});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::int64_t j = 0; j < f; ++j)
            out.values()[static_cast<std::int64_t>(i) * f + j] = mat.values()[rows[i] * f + j];
    return out;
}

template <class S>
double top1_accuracy(const TensorT<S>& logits, const std::vector<int>& labels) {
    const std::int64_t n = logits.dim(0), c = logits.dim(1);
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < n; ++i) {
        std::int64_t best = 0;
        for (std::int64_t j = 1; j < c; ++j)
            if (logits.values()[i * c + j] > logits.values()[i * c + best]) best = j;
        if (best == labels[static_cast<std::size_t>(i)]) ++hits;
    }
    return n ? static_cast<double>(hits) / static_cast<double>(n) : 0.0;
}

}  // namespace detail

// Trains the head on fixed feature rows (first n_train rows are the train
// split, the next n_val the held-out split). The backbone never appears
// here, which is also what makes the one-hot oracle test possible.
template <class S>
ProbeResult train_probe(const TensorT<S>& features, const std::vector<int>& labels, std::int64_t n_train,
                        std::int64_t n_val, std::int64_t classes, const ProbeConfig& pc) {
    if (features.rank() != 2) throw ShapeError("probe: features must be (N,F), got " + shape_str(features.shape()));
    if (features.dim(0) != static_cast<std::int64_t>(labels.size()) || features.dim(0) != n_train + n_val)
        throw ShapeError("probe: " + std::to_string(features.dim(0)) + " feature rows vs " +
                         std::to_string(labels.size()) + " labels (" + std::to_string(n_train) + " train + " +
                         std::to_string(n_val) + " val)");
    for (int y : labels)
        if (y < 0 || y >= classes)
            throw DataError("probe: label " + std::to_string(y) + " outside [0," + std::to_string(classes) + ")");
    if (n_train < 1 || n_val < 1) throw ConfigError("probe: both splits must be non-empty");

    ProbeHeadT<S> head(features.dim(1), pc.hidden, classes, pc.seed);
    OptimizerConfig oc;
    oc.momentum = pc.momentum;
    oc.weight_decay = 0.0;
    OptimizerT<S> opt(head.params(), oc);

    auto& tape = TapeT<S>::active();
    const std::int64_t batch = std::min<std::int64_t>(pc.batch, n_train);
    const std::int64_t spe = n_train / batch;
    const std::int64_t total = spe * pc.epochs;
    std::vector<std::int64_t> order(static_cast<std::size_t>(n_train));
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < pc.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(splitmix64(mix_seed(pc.seed, 0x1abe, static_cast<std::uint64_t>(epoch))));
        std::shuffle(order.begin(), order.end(), rng);
        for (std::int64_t b = 0; b < spe; ++b, ++step) {
            std::vector<std::int64_t> idx(order.begin() + b * batch, order.begin() + (b + 1) * batch);
            std::vector<int> ylab;
            ylab.reserve(idx.size());
            for (auto i : idx) ylab.push_back(labels[static_cast<std::size_t>(i)]);
            tape.clear();
            auto x = detail::gather_rows(features, idx);
            auto loss = cross_entropy_mean(head.logits(x), ylab);
            opt.zero_grad();
            backward(loss);
            opt.step(lr_at(step, pc.lr, 0, total));
            tape.clear();
        }
    }

    ProbeResult res;
    {
        NoGradGuard<S> ng;
        std::vector<std::int64_t> tr(static_cast<std::size_t>(n_train)), va(static_cast<std::size_t>(n_val));
        std::iota(tr.begin(), tr.end(), 0);
        std::iota(va.begin(), va.end(), n_train);
        res.train_acc = detail::top1_accuracy(head.logits(detail::gather_rows(features, tr)),
                                              {labels.begin(), labels.begin() + n_train});
        res.val_acc = detail::top1_accuracy(head.logits(detail::gather_rows(features, va)),
                                            {labels.begin() + n_train, labels.end()});
    }
    return res;
}

// Pooled dense-twin features for every dataset row, extracted in chunks.
template <class S>
TensorT<S> probe_features(StudentModelT<S>& model, const Dataset& ds, std::int64_t chunk = 128) {
    const std::int64_t n = ds.count();
    if (n < 1) throw DataError("probe: empty dataset");
    TensorT<S> all;
    std::int64_t feat = 0;
    for (std::int64_t at = 0; at < n; at += chunk) {
        std::vector<std::int64_t> idx;
        for (std::int64_t i = at; i < std::min(n, at + chunk); ++i) idx.push_back(i);
        auto f = model.dense_feature(ds.template batch<S>(idx));
        if (!all.defined()) {
            feat = f.dim(1);
            all = TensorT<S>::zeros({n, feat});
        }
        std::copy(f.data(), f.data() + f.size(), all.data() + at * feat);
    }
    return all;
}

// Frozen-backbone probe (default) or joint fine-tune when pc.finetune.
template <class S>
ProbeResult linear_probe(StudentModelT<S>& model, const Dataset& ds, const ProbeConfig& pc) {
    if (ds.n_val < 1) throw DataError("probe: dataset has no validation split");
    if (!pc.finetune) {
        auto features = probe_features(model, ds);
        return train_probe(features, ds.labels, ds.n_train, ds.n_val, ds.classes, pc);
    }

    // Fine-tune: backbone (dense twin) and head train jointly.
    ProbeHeadT<S> head(model.config().widths[3], pc.hidden, ds.classes, pc.seed);
    auto params = model.params();
    for (auto& [name, p] : head.params()) params.emplace_back(name, p);
    OptimizerConfig oc;
    oc.momentum = pc.momentum;
    oc.weight_decay = 0.0;
    OptimizerT<S> opt(params, oc);
    model.set_requires_grad(true);

    auto& tape = TapeT<S>::active();
    const std::int64_t batch = std::min<std::int64_t>(pc.batch, ds.n_train);
    const std::int64_t spe = ds.n_train / batch;
    const std::int64_t total = spe * pc.epochs;
    std::int64_t step = 0;
    for (std::int64_t epoch = 0; epoch < pc.epochs; ++epoch) {
        auto order = epoch_order(ds, pc.seed, epoch);
        for (std::int64_t b = 0; b < spe; ++b, ++step) {
            std::vector<std::int64_t> idx(order.begin() + b * batch, order.begin() + (b + 1) * batch);
            tape.clear();
            auto x = ds.template batch<S>(idx);
            auto pooled = mean_pool_hw(model.encode_dense(x, /*training=*/true)[3]);
            auto loss = cross_entropy_mean(head.logits(pooled), ds.batch_labels(idx));
            opt.zero_grad();
            backward(loss);
            opt.step(lr_at(step, pc.lr, 0, total));
            tape.clear();
        }
    }

    ProbeResult res;
    {
        NoGradGuard<S> ng;
        auto eval_split = [&](const std::vector<std::int64_t>& idx) {
            std::int64_t hits = 0;
            for (std::size_t at = 0; at < idx.size(); at += 128) {
                std::vector<std::int64_t> part(idx.begin() + static_cast<std::ptrdiff_t>(at),
                                               idx.begin() + static_cast<std::ptrdiff_t>(std::min(idx.size(), at + 128)));
                auto pooled = mean_pool_hw(model.encode_dense(ds.template batch<S>(part), /*training=*/false)[3]);
                hits += static_cast<std::int64_t>(
                    detail::top1_accuracy(head.logits(pooled), ds.batch_labels(part)) *
                        static_cast<double>(part.size()) +
                    0.5);
            }
            return static_cast<double>(hits) / static_cast<double>(idx.size());
        };
        res.train_acc = eval_split(ds.train_indices());
        res.val_acc = eval_split(ds.val_indices());
    }
    return res;
}

}  // namespace sparsekd
