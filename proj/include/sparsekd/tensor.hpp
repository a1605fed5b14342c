#pragma once

#include <Eigen/Core>
#include <cmath>
#include <functional>
#include <memory>
#include <random>
#include <utility>

#include "sparsekd/common.hpp"

namespace sparsekd {

// Dense n-d tensor with reverse-mode autodiff, templated on scalar.
// float drives the training pipeline (32-bit state round-trips through the
// tensor file format exactly, which checkpoint resume relies on); double
// drives gradient checks and oracle comparisons. Storage is a flat row-major
// Eigen array; ops live in ops.hpp/conv.hpp as free functions that record
// backward closures on the active tape.

namespace detail {

template <class S>
struct TensorImpl {
    Shape shape;
    Eigen::Array<S, Eigen::Dynamic, 1> data;
    Eigen::Array<S, Eigen::Dynamic, 1> grad;  // size 0 until first accumulation
    bool requires_grad = false;

    std::int64_t size() const { return data.size(); }

    void accumulate(const Eigen::Array<S, Eigen::Dynamic, 1>& g) {
        if (g.size() != data.size())
            throw ShapeError("gradient size " + std::to_string(g.size()) + " does not match tensor size " +
                             std::to_string(data.size()));
        if (grad.size() == 0) grad = Eigen::Array<S, Eigen::Dynamic, 1>::Zero(data.size());
        grad += g;
    }
};

}  // namespace detail

template <class S>
class TensorT {
  public:
    using Scalar = S;
    using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
    using Impl = detail::TensorImpl<S>;

    TensorT() = default;

    static TensorT zeros(Shape shape) {
        TensorT t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = std::move(shape);
        t.impl_->data = Array::Zero(shape_numel(t.impl_->shape));
        return t;
    }

    static TensorT full(Shape shape, S value) {
        TensorT t = zeros(std::move(shape));
        t.impl_->data.setConstant(value);
        return t;
    }

    static TensorT scalar(S value) { return full({}, value); }

    static TensorT from(Shape shape, std::vector<S> values) {
        TensorT t;
        t.impl_ = std::make_shared<Impl>();
        const auto n = shape_numel(shape);
        if (static_cast<std::int64_t>(values.size()) != n)
            throw ShapeError("data length " + std::to_string(values.size()) + " does not match shape " +
                             shape_str(shape));
        t.impl_->shape = std::move(shape);
        t.impl_->data = Eigen::Map<const Array>(values.data(), n);
        return t;
    }

    static TensorT randn(Shape shape, std::uint64_t seed, double mean = 0.0, double stddev = 1.0) {
        TensorT t = zeros(std::move(shape));
        std::mt19937_64 rng(splitmix64(seed));
        std::normal_distribution<double> dist(mean, stddev);
        for (std::int64_t i = 0; i < t.size(); ++i) t.impl_->data[i] = static_cast<S>(dist(rng));
        return t;
    }

    static TensorT uniform(Shape shape, std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
        TensorT t = zeros(std::move(shape));
        std::mt19937_64 rng(splitmix64(seed));
        std::uniform_real_distribution<double> dist(lo, hi);
        for (std::int64_t i = 0; i < t.size(); ++i) t.impl_->data[i] = static_cast<S>(dist(rng));
        return t;
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    std::int64_t dim(int i) const { return impl_->shape.at(static_cast<std::size_t>(i)); }
    std::int64_t size() const { return impl_ ? impl_->data.size() : 0; }

    Array& values() { return impl_->data; }
    const Array& values() const { return impl_->data; }
    S* data() { return impl_->data.data(); }
    const S* data() const { return impl_->data.data(); }

    S item() const {
        if (size() != 1) throw ShapeError("item() on tensor of size " + std::to_string(size()));
        return impl_->data[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    TensorT& set_requires_grad(bool v) {
        impl_->requires_grad = v;
        return *this;
    }

    bool has_grad() const { return impl_->grad.size() != 0; }
    const Array& grad() const {
        if (!has_grad()) throw Error("tensor has no gradient");
        return impl_->grad;
    }
    Array& grad() {
        if (!has_grad()) throw Error("tensor has no gradient");
        return impl_->grad;
    }
    void zero_grad() { impl_->grad.resize(0); }
    void accumulate_grad(const Array& g) { impl_->accumulate(g); }

    // Deep copy; the copy never tracks gradients.
    TensorT detached_copy() const {
        TensorT t;
        t.impl_ = std::make_shared<Impl>();
        t.impl_->shape = impl_->shape;
        t.impl_->data = impl_->data;
        return t;
    }

    bool all_finite() const { return impl_->data.isFinite().all(); }

    std::shared_ptr<Impl> impl() const { return impl_; }

    static TensorT wrap(std::shared_ptr<Impl> impl) {
        TensorT t;
        t.impl_ = std::move(impl);
        return t;
    }

  private:
    std::shared_ptr<Impl> impl_;
};

// Recorded reverse-mode tape. Operations append entries in execution order,
// so inputs always precede their consumers; backward() replays entries in
// exact reverse order. One active tape per scalar type per thread.
template <class S>
class TapeT {
  public:
    struct Entry {
        const char* op;
        std::shared_ptr<detail::TensorImpl<S>> out;
        std::function<void(const Eigen::Array<S, Eigen::Dynamic, 1>&)> backward;
    };

    static TapeT& active() {
        thread_local TapeT tape;
        return tape;
    }

    bool enabled() const { return enabled_; }
    void set_enabled(bool v) { enabled_ = v; }

    std::size_t size() const { return entries_.size(); }
    void clear() { entries_.clear(); }
    const Entry& entry(std::size_t i) const { return entries_[i]; }

    // Records an op whose output depends on the given inputs. The output is
    // marked as requiring grad iff recording is enabled and any input does.
    template <class Fn>
    void record(const char* op, const TensorT<S>& out, std::initializer_list<const TensorT<S>*> inputs, Fn&& fn) {
        if (!enabled_) return;
        bool needs = false;
        for (const auto* in : inputs) needs = needs || (in->defined() && in->requires_grad());
        if (!needs) return;
        const_cast<TensorT<S>&>(out).set_requires_grad(true);
        entries_.push_back(Entry{op, out.impl(), std::forward<Fn>(fn)});
    }

    // Raw entry push for test doubles and custom ops.
    void push_raw(Entry e) { entries_.push_back(std::move(e)); }

  private:
    std::vector<Entry> entries_;
    bool enabled_ = true;
};

template <class S>
struct NoGradGuard {
    NoGradGuard() : prev_(TapeT<S>::active().enabled()) { TapeT<S>::active().set_enabled(false); }
    ~NoGradGuard() { TapeT<S>::active().set_enabled(prev_); }
    NoGradGuard(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

// Backpropagates from a scalar loss through every recorded entry, leaving
// accumulated gradients on all requires_grad leaves.
template <class S>
void backward(const TensorT<S>& loss) {
    if (loss.size() != 1) throw ShapeError("backward expects a scalar loss, got shape " + shape_str(loss.shape()));
    auto& tape = TapeT<S>::active();
    if (tape.size() == 0) throw Error("backward on an empty tape");
    loss.impl()->accumulate(Eigen::Array<S, Eigen::Dynamic, 1>::Constant(1, S(1)));
    for (std::size_t i = tape.size(); i-- > 0;) {
        const auto& e = tape.entry(i);
        if (e.out->grad.size() == 0) continue;  // no downstream use of this value
        e.backward(e.out->grad);
    }
}

using Tensor = TensorT<double>;

}  // namespace sparsekd
