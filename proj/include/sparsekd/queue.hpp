#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "sparsekd/ops.hpp"
#include "sparsekd/tensor.hpp"

// FIFO memory queue of unit-norm teacher instance embeddings, plus the
// temperature-softmax similarity distributions over its entries. The queue
// owns a step-phase flag so the teacher-first protocol (enqueue -> teacher
// similarity -> student similarity, student never enqueued) is asserted at
// run time, not just by convention.

namespace sparsekd {

enum class SimMode {
    Consistent,  // student numerator with student-based normalization (default)
    AsWritten    // printed formula: teacher-teacher denominator, sum-to-1 waived
};

template <class S>
struct SimilarityDistributionT {
    TensorT<S> probs;  // (count,) or (B, count)
    double tau = 0.0;
};

template <class S>
class MemoryQueueT {
   public:
    enum class Phase { Idle, Started, Enqueued, TeacherSim, StudentSim };

    MemoryQueueT(std::int64_t capacity, std::int64_t dim) : capacity_(capacity), dim_(dim) {
        if (capacity < 1) throw ConfigError("MemoryQueue: capacity must be >= 1, got " + std::to_string(capacity));
        if (dim < 1) throw ConfigError("MemoryQueue: dim must be >= 1, got " + std::to_string(dim));
        buffer_ = TensorT<S>::zeros({capacity, dim});
    }

    std::int64_t capacity() const { return capacity_; }
    std::int64_t dim() const { return dim_; }
    std::int64_t count() const { return count_; }
    std::int64_t total_enqueued() const { return total_enqueued_; }
    bool warm() const { return count_ == capacity_; }
    Phase phase() const { return phase_; }

    void begin_step() {
        if (phase_ == Phase::Started || phase_ == Phase::TeacherSim)
            throw ProtocolError("queue protocol: begin_step from phase " + phase_name(phase_) +
                                " (previous step incomplete)");
        phase_ = Phase::Started;
    }

    // Appends a (B, D) batch of unit-norm embeddings in row order, evicting
    // oldest entries once capacity is reached. Values are copied (detached).
    void enqueue_batch(const TensorT<S>& emb) {
        if (phase_ != Phase::Started && phase_ != Phase::Enqueued)
            throw ProtocolError("queue protocol: enqueue in phase " + phase_name(phase_) +
                                " (teacher embeddings enqueue before any similarity)");
        if (emb.rank() != 2 || emb.dim(1) != dim_)
            throw ShapeError("enqueue_batch: expected (B," + std::to_string(dim_) + "), got " +
                             shape_str(emb.shape()));
        for (std::int64_t r = 0; r < emb.dim(0); ++r) {
            double nrm = 0.0;
            for (std::int64_t j = 0; j < dim_; ++j) {
                const double v = static_cast<double>(emb.values()[r * dim_ + j]);
                nrm += v * v;
            }
            nrm = std::sqrt(nrm);
            if (std::abs(nrm - 1.0) > 1e-3)
                throw NumericError("enqueue_batch: row " + std::to_string(r) + " has norm " + std::to_string(nrm) +
                                   ", not unit");
            push_row(emb.data() + r * dim_);
        }
        phase_ = Phase::Enqueued;
    }

    // Softmax over dot(t, q_j)/tau for one (D,) embedding; no gradients.
    SimilarityDistributionT<S> teacher_similarity(const TensorT<S>& t, double tau) {
        require_phase_for_teacher();
        auto probs = similarity_values(t, tau);
        phase_ = Phase::TeacherSim;
        return {probs, tau};
    }

    // Batched teacher similarities: (B, D) -> (B, count) plain values.
    TensorT<S> teacher_similarity_batch(const TensorT<S>& t, double tau) {
        require_phase_for_teacher();
        if (t.rank() != 2 || t.dim(1) != dim_)
            throw ShapeError("teacher_similarity: expected (B," + std::to_string(dim_) + "), got " +
                             shape_str(t.shape()));
        check_nonempty(tau);
        NoGradGuard<S> ng;
        auto q = snapshot();
        auto probs = softmax_rows(scale(matmul(t, q, false, true), 1.0 / tau));
        phase_ = Phase::TeacherSim;
        return probs;
    }

    // Student similarities stay on the tape; gradient reaches s only. The
    // as-written mode divides the student numerator by the TEACHER softmax
    // denominator (the printed formula), so its rows need not sum to 1.
    TensorT<S> student_similarity_batch(const TensorT<S>& s, double tau, SimMode mode = SimMode::Consistent,
                                        const TensorT<S>& teacher_emb = {}) {
        if (phase_ != Phase::TeacherSim && phase_ != Phase::StudentSim)
            throw ProtocolError("queue protocol: student similarity in phase " + phase_name(phase_) +
                                " (teacher similarity comes first; student embeddings never enqueue)");
        if (s.rank() != 2 || s.dim(1) != dim_)
            throw ShapeError("student_similarity: expected (B," + std::to_string(dim_) + "), got " +
                             shape_str(s.shape()));
        check_nonempty(tau);
        auto q = snapshot();
        auto logits = scale(matmul(s, q, false, true), 1.0 / tau);
        TensorT<S> probs;
        if (mode == SimMode::Consistent) {
            probs = softmax_rows(logits);
        } else {
            if (!teacher_emb.defined() || teacher_emb.rank() != 2 || teacher_emb.dim(0) != s.dim(0) ||
                teacher_emb.dim(1) != dim_)
                throw ShapeError("student_similarity: as-written mode needs matching teacher embeddings");
            // log-sum-exp of the teacher logits per row, as a constant.
            auto lse = TensorT<S>::zeros({s.dim(0), 1});
            {
                NoGradGuard<S> ng;
                auto tl = scale(matmul(teacher_emb, q, false, true), 1.0 / tau);
                for (std::int64_t r = 0; r < tl.dim(0); ++r) {
                    const auto row = tl.values().segment(r * count_, count_);
                    const double m = static_cast<double>(row.maxCoeff());
                    double acc = 0.0;
                    for (std::int64_t j = 0; j < count_; ++j) acc += std::exp(static_cast<double>(row[j]) - m);
                    lse.values()[r] = static_cast<S>(m + std::log(acc));
                }
            }
            probs = exp_op(sub_col(logits, lse));
        }
        phase_ = Phase::StudentSim;
        return probs;
    }

    // Copy of the valid rows, oldest first: (count, D), detached constant.
    TensorT<S> snapshot() const {
        auto out = TensorT<S>::zeros({count_, dim_});
        std::memcpy(out.data(), buffer_.data(), sizeof(S) * static_cast<std::size_t>(count_ * dim_));
        return out;
    }

    // Checkpoint restore: replaces contents with rows in insertion order.
    void restore(const TensorT<S>& rows, std::int64_t total_enqueued) {
        if (rows.rank() != 2 || rows.dim(1) != dim_ || rows.dim(0) > capacity_)
            throw ShapeError("queue restore: shape " + shape_str(rows.shape()) + " vs capacity " +
                             std::to_string(capacity_) + " x dim " + std::to_string(dim_));
        count_ = rows.dim(0);
        total_enqueued_ = total_enqueued;
        std::memcpy(buffer_.data(), rows.data(), sizeof(S) * static_cast<std::size_t>(count_ * dim_));
        phase_ = Phase::Idle;
    }

    static std::string phase_name(Phase p) {
        switch (p) {
            case Phase::Idle: return "idle";
            case Phase::Started: return "started";
            case Phase::Enqueued: return "enqueued";
            case Phase::TeacherSim: return "teacher-sim";
            case Phase::StudentSim: return "student-sim";
        }
        return "?";
    }

   private:
    void require_phase_for_teacher() const {
        if (phase_ != Phase::Enqueued && phase_ != Phase::TeacherSim)
            throw ProtocolError("queue protocol: teacher similarity in phase " + phase_name(phase_) +
                                " (enqueue the teacher batch first)");
    }

    void check_nonempty(double tau) const {
        if (count_ == 0) throw Error("similarity: empty queue");
        if (!(tau > 0.0)) throw ConfigError("similarity: temperature " + std::to_string(tau) + " must be > 0");
    }

    SimilarityDistributionT<S> relaxed_similarity(const TensorT<S>& t, double tau) {
        return {similarity_values(t, tau), tau};
    }

    TensorT<S> similarity_values(const TensorT<S>& t, double tau) {
        if (t.rank() != 1 || t.size() != dim_)
            throw ShapeError("teacher_similarity: expected (" + std::to_string(dim_) + ",), got " +
                             shape_str(t.shape()));
        check_nonempty(tau);
        NoGradGuard<S> ng;
        auto q = snapshot();
        auto t2 = reshape(t, {std::int64_t(1), dim_});
        auto probs = softmax_rows(scale(matmul(t2, q, false, true), 1.0 / tau));
        return reshape(probs, {count_});
    }

    void push_row(const S* row) {
        if (count_ < capacity_) {
            std::memcpy(buffer_.data() + count_ * dim_, row, sizeof(S) * static_cast<std::size_t>(dim_));
            ++count_;
        } else {
            // Evict the oldest: shift everything one row toward the front.
            std::memmove(buffer_.data(), buffer_.data() + dim_,
                         sizeof(S) * static_cast<std::size_t>((capacity_ - 1) * dim_));
            std::memcpy(buffer_.data() + (capacity_ - 1) * dim_, row, sizeof(S) * static_cast<std::size_t>(dim_));
        }
        ++total_enqueued_;
    }

    std::int64_t capacity_, dim_;
    std::int64_t count_ = 0;
    std::int64_t total_enqueued_ = 0;
    TensorT<S> buffer_;  // (capacity, dim), rows 0..count-1 valid, oldest first
    Phase phase_ = Phase::Idle;
};

}  // namespace sparsekd
