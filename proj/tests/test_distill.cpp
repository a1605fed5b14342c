#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "sparsekd/dataset.hpp"
#include "sparsekd/gradcheck.hpp"
#include "sparsekd/losses.hpp"
#include "sparsekd/queue.hpp"
#include "sparsekd/trainer.hpp"

using namespace sparsekd;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() / ("skd_distill_" + std::to_string(std::random_device{}()));
        fs::create_directories(path);
    }
    ~TempDir() { std::error_code ec; fs::remove_all(path, ec); }
    std::string operator/(const std::string& name) const { return (path / name).string(); }
};

template <class S>
TensorT<S> unit_rows(std::initializer_list<std::initializer_list<S>> rows) {
    const std::int64_t r = static_cast<std::int64_t>(rows.size());
    const std::int64_t c = static_cast<std::int64_t>(rows.begin()->size());
    auto t = TensorT<S>::zeros({r, c});
    std::int64_t i = 0;
    for (const auto& row : rows)
        for (const auto v : row) t.values()[i++] = v;
    return t;
}

// Queue pre-filled with the given rows, left in the Enqueued phase.
template <class S>
MemoryQueueT<S> warm_queue(std::int64_t capacity, const TensorT<S>& rows) {
    MemoryQueueT<S> q(capacity, rows.dim(1));
    q.begin_step();
    q.enqueue_batch(rows);
    return q;
}

// Tiny distillation setup shared by the trainer tests: 16 train rows,
// narrow student, toy teacher with matching embedding width.
DistillConfig tiny_config(const std::string& data_dir, const std::string& out_dir) {
    DistillConfig c;
    c.seed = 1;
    c.epochs = 5;
    c.warmup_epochs = 1;
    c.batch = 8;
    c.out_dir = out_dir;
    c.data_dir = data_dir;
    c.image_size = 64;
    c.widths = {4, 6, 8, 10};
    c.blocks = 1;
    c.head_dim = 12;
    c.teacher_dim = 12;
    c.teacher_depth = 1;
    c.teacher_heads = 1;
    c.queue_capacity = 8;
    c.tau = 0.1;
    c.lr = 0.05;
    return c;
}

}  // namespace

TEST_CASE("memory queue: FIFO eviction, fill state, insertion order") {
    auto rows = unit_rows<float>({{1, 0}, {0, 1}, {-1, 0}, {0, -1}});
    auto q = warm_queue<float>(3, rows);

    CHECK(q.capacity() == 3);
    CHECK(q.count() == 3);
    CHECK(q.warm());
    CHECK(q.total_enqueued() == 4);

    // Oldest row evicted; survivors keep insertion order.
    auto snap = q.snapshot();
    REQUIRE(snap.shape() == Shape{3, 2});
    const float want[6] = {0, 1, -1, 0, 0, -1};
    for (std::int64_t i = 0; i < 6; ++i) CHECK(snap.values()[i] == want[i]);

    MemoryQueueT<float> part(5, 2);
    part.begin_step();
    part.enqueue_batch(unit_rows<float>({{1, 0}, {0, 1}}));
    CHECK(part.count() == 2);
    CHECK_FALSE(part.warm());
    CHECK(part.snapshot().shape() == Shape{2, 2});

    // Larger batch through a roomy queue: rows land in batch order.
    MemoryQueueT<float> big(8, 2);
    auto batch = TensorT<float>::zeros({4, 2});
    for (std::int64_t i = 0; i < 4; ++i) {
        batch.values()[i * 2] = std::cos(0.3f * static_cast<float>(i));
        batch.values()[i * 2 + 1] = std::sin(0.3f * static_cast<float>(i));
    }
    big.begin_step();
    big.enqueue_batch(batch);
    auto bs = big.snapshot();
    for (std::int64_t i = 0; i < 8; ++i) CHECK(bs.values()[i] == batch.values()[i]);

    CHECK_THROWS_AS(MemoryQueueT<float>(0, 2), ConfigError);
    CHECK_THROWS_AS(MemoryQueueT<float>(4, 0), ConfigError);
}

TEST_CASE("memory queue: unit-norm and shape enforcement on enqueue") {
    MemoryQueueT<float> q(4, 2);
    q.begin_step();
    CHECK_THROWS_AS(q.enqueue_batch(unit_rows<float>({{0.5f, 0.0f}})), NumericError);
    CHECK_THROWS_AS(q.enqueue_batch(TensorT<float>::zeros({2, 3})), ShapeError);
    CHECK_THROWS_AS(q.enqueue_batch(TensorT<float>::zeros({4})), ShapeError);
    CHECK(q.count() == 0);  // nothing got in
}

TEST_CASE("teacher similarity: uniform, two-entry softmax, self-max, guards") {
    // Identical queue entries leave nothing to distinguish: uniform.
    auto same = unit_rows<float>({{1, 0}, {1, 0}, {1, 0}, {1, 0}});
    auto q = warm_queue<float>(4, same);
    auto t = TensorT<float>::from({2}, {1.0f, 0.0f});
    auto sim = q.teacher_similarity(t, 0.1);
    REQUIRE(sim.probs.shape() == Shape{4});
    CHECK(sim.tau == 0.1);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(sim.probs.values()[i] == doctest::Approx(0.25f).epsilon(1e-6));

    // Queue {t, v} with v orthogonal to t at tau=1: softmax([1,0]).
    auto q2 = warm_queue<float>(2, unit_rows<float>({{1, 0}, {0, 1}}));
    auto sim2 = q2.teacher_similarity(t, 1.0);
    CHECK(sim2.probs.values()[0] == doctest::Approx(0.73106f).epsilon(1e-4));
    CHECK(sim2.probs.values()[1] == doctest::Approx(0.26894f).epsilon(1e-4));

    // An embedding that sits in the queue likes itself best.
    auto ent = l2_normalize_rows(TensorT<float>::randn({6, 8}, 77));
    auto q3 = warm_queue<float>(6, ent);
    for (std::int64_t i = 0; i < 6; ++i) {
        auto probe = TensorT<float>::zeros({8});
        std::copy(ent.data() + i * 8, ent.data() + (i + 1) * 8, probe.data());
        auto s = q3.teacher_similarity(probe, 0.5);
        std::int64_t argmax = 0;
        for (std::int64_t j = 1; j < 6; ++j)
            if (s.probs.values()[j] > s.probs.values()[argmax]) argmax = j;
        CHECK(argmax == i);
    }

    // Empty queue and non-positive temperature are hard errors.
    MemoryQueueT<float> empty(4, 2);
    empty.begin_step();
    empty.enqueue_batch(TensorT<float>::zeros({0, 2}));  // no rows: still "enqueued"
    CHECK_THROWS_AS((void)empty.teacher_similarity(t, 0.1), Error);
    CHECK_THROWS_AS((void)q2.teacher_similarity(t, 0.0), ConfigError);
    CHECK_THROWS_AS((void)q2.teacher_similarity(t, -1.0), ConfigError);
    CHECK_THROWS_AS((void)q2.teacher_similarity(TensorT<float>::from({3}, {1, 0, 0}), 1.0), ShapeError);
}

TEST_CASE("student similarity: consistent mode matches teacher on equal inputs") {
    auto ent = l2_normalize_rows(TensorT<float>::randn({5, 6}, 81));
    auto q = warm_queue<float>(5, ent);
    auto emb = l2_normalize_rows(TensorT<float>::randn({3, 6}, 82));

    auto p_t = q.teacher_similarity_batch(emb, 0.2);
    auto p_s = q.student_similarity_batch(emb, 0.2, SimMode::Consistent);
    REQUIRE(p_t.shape() == Shape{3, 5});
    REQUIRE(p_s.shape() == Shape{3, 5});
    for (std::int64_t i = 0; i < 15; ++i) CHECK(p_s.values()[i] == doctest::Approx(p_t.values()[i]).epsilon(1e-6));

    // Rows sum to one in consistent mode.
    for (std::int64_t r = 0; r < 3; ++r) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < 5; ++j) acc += static_cast<double>(p_s.values()[r * 5 + j]);
        CHECK(acc == doctest::Approx(1.0).epsilon(1e-6));
    }

    // A student orthogonal to every queue entry scores uniformly.
    auto q2 = warm_queue<float>(2, unit_rows<float>({{1, 0, 0, 0}, {0, 1, 0, 0}}));
    (void)q2.teacher_similarity_batch(unit_rows<float>({{0, 0, 1, 0}}), 0.3);
    auto u = q2.student_similarity_batch(unit_rows<float>({{0, 0, 1, 0}}), 0.3);
    CHECK(u.values()[0] == doctest::Approx(0.5f).epsilon(1e-6));
    CHECK(u.values()[1] == doctest::Approx(0.5f).epsilon(1e-6));
}

TEST_CASE("similarity oracle: both modes against hand-rolled softmax, 64-bit") {
    auto ent = l2_normalize_rows(TensorT<double>::randn({3, 4}, 83));
    auto q = warm_queue<double>(3, ent);
    auto t_emb = l2_normalize_rows(TensorT<double>::randn({2, 4}, 84));
    auto s_emb = l2_normalize_rows(TensorT<double>::randn({2, 4}, 85));
    const double tau = 0.5;

    auto dot = [&](const TensorT<double>& m, std::int64_t r, std::int64_t e) {
        double acc = 0.0;
        for (std::int64_t j = 0; j < 4; ++j)
            acc += m.values()[r * 4 + j] * ent.values()[e * 4 + j];
        return acc;
    };

    auto p_t = q.teacher_similarity_batch(t_emb, tau);
    auto p_c = q.student_similarity_batch(s_emb, tau, SimMode::Consistent);
    auto p_w = q.student_similarity_batch(s_emb, tau, SimMode::AsWritten, t_emb);

    for (std::int64_t r = 0; r < 2; ++r) {
        double zs = 0.0, zt = 0.0;
        for (std::int64_t e = 0; e < 3; ++e) {
            zs += std::exp(dot(s_emb, r, e) / tau);
            zt += std::exp(dot(t_emb, r, e) / tau);
        }
        double row_sum_w = 0.0;
        for (std::int64_t e = 0; e < 3; ++e) {
            CHECK(p_t.values()[r * 3 + e] == doctest::Approx(std::exp(dot(t_emb, r, e) / tau) / zt).epsilon(1e-10));
            CHECK(p_c.values()[r * 3 + e] == doctest::Approx(std::exp(dot(s_emb, r, e) / tau) / zs).epsilon(1e-10));
            // As-written: student numerator over the TEACHER normalizer.
            CHECK(p_w.values()[r * 3 + e] == doctest::Approx(std::exp(dot(s_emb, r, e) / tau) / zt).epsilon(1e-10));
            row_sum_w += p_w.values()[r * 3 + e];
        }
        CHECK(std::abs(row_sum_w - 1.0) > 1e-6);  // not a normalized distribution
    }

    // As-written needs the teacher embeddings to build its denominator.
    CHECK_THROWS_AS((void)q.student_similarity_batch(s_emb, tau, SimMode::AsWritten), ShapeError);
    CHECK_THROWS_AS((void)q.student_similarity_batch(s_emb, tau, SimMode::AsWritten,
                                                     l2_normalize_rows(TensorT<double>::randn({1, 4}, 86))),
                    ShapeError);
}

TEST_CASE("queue protocol: out-of-order calls are rejected with ProtocolError") {
    MemoryQueueT<float> q(4, 2);
    auto batch = unit_rows<float>({{1, 0}});
    auto t1 = TensorT<float>::from({2}, {1.0f, 0.0f});

    CHECK(q.phase() == MemoryQueueT<float>::Phase::Idle);
    CHECK_THROWS_AS(q.enqueue_batch(batch), ProtocolError);
    CHECK_THROWS_AS((void)q.student_similarity_batch(batch, 0.1), ProtocolError);

    q.begin_step();
    CHECK(q.phase() == MemoryQueueT<float>::Phase::Started);
    CHECK_THROWS_AS((void)q.teacher_similarity(t1, 0.1), ProtocolError);  // nothing enqueued yet
    CHECK_THROWS_AS(q.begin_step(), ProtocolError);                       // step already open

    q.enqueue_batch(batch);
    CHECK(q.phase() == MemoryQueueT<float>::Phase::Enqueued);
    CHECK_THROWS_AS((void)q.student_similarity_batch(batch, 0.1), ProtocolError);  // teacher first
    q.enqueue_batch(batch);  // topping up before any similarity is fine

    (void)q.teacher_similarity(t1, 0.1);
    CHECK(q.phase() == MemoryQueueT<float>::Phase::TeacherSim);
    CHECK_THROWS_AS(q.begin_step(), ProtocolError);  // similarity pair incomplete
    CHECK_THROWS_AS(q.enqueue_batch(batch), ProtocolError);
    (void)q.teacher_similarity(t1, 0.1);  // extra teacher queries allowed

    (void)q.student_similarity_batch(batch, 0.1);
    CHECK(q.phase() == MemoryQueueT<float>::Phase::StudentSim);
    (void)q.student_similarity_batch(batch, 0.1);  // extra student queries allowed
    CHECK_THROWS_AS(q.enqueue_batch(batch), ProtocolError);

    q.begin_step();  // full cycle done: a new step may open
    CHECK(q.phase() == MemoryQueueT<float>::Phase::Started);

    // Restore resets the phase machinery along with the contents.
    q.restore(unit_rows<float>({{0, 1}}), 7);
    CHECK(q.phase() == MemoryQueueT<float>::Phase::Idle);
    CHECK(q.count() == 1);
    CHECK(q.total_enqueued() == 7);
    CHECK_THROWS_AS(q.restore(TensorT<float>::zeros({9, 2}), 0), ShapeError);
}

TEST_CASE("pearson loss: hand values, oracle, invariances, guards") {
    auto p = TensorT<float>::from({3}, {0.5f, 0.3f, 0.2f});
    auto self = pearson_loss(p, p);
    CHECK(self.item() == doctest::Approx(-1.0f).epsilon(1e-6));

    // Perfectly anti-correlated distributions maximize the loss at +1.
    auto anti = pearson_loss(p, TensorT<float>::from({3}, {0.2f, 0.4f, 0.5f}));
    CHECK(anti.item() == doctest::Approx(1.0f).epsilon(1e-5));

    // Random 16-entry rows against a from-scratch correlation in double.
    auto a = TensorT<double>::randn({16}, 87, 0.0, 1.0);
    auto b = TensorT<double>::randn({16}, 88, 0.0, 1.0);
    double ma = 0.0, mb = 0.0;
    for (int i = 0; i < 16; ++i) { ma += a.values()[i]; mb += b.values()[i]; }
    ma /= 16.0;
    mb /= 16.0;
    double num = 0.0, va = 0.0, vb = 0.0;
    for (int i = 0; i < 16; ++i) {
        num += (a.values()[i] - ma) * (b.values()[i] - mb);
        va += (a.values()[i] - ma) * (a.values()[i] - ma);
        vb += (b.values()[i] - mb) * (b.values()[i] - mb);
    }
    const double want = -num / std::sqrt(va * vb);
    CHECK(pearson_loss(a, b).item() == doctest::Approx(want).epsilon(1e-10));

    // Correlation ignores positive affine maps of the student row and flips
    // sign under negative ones.
    auto scaled = add_scalar(scale(b, 3.7), 0.21);
    CHECK(pearson_loss(a, scaled).item() == doctest::Approx(want).epsilon(1e-9));
    auto flipped = add_scalar(scale(b, -2.0), 0.5);
    CHECK(pearson_loss(a, flipped).item() == doctest::Approx(-want).epsilon(1e-9));

    // Constant rows have no defined correlation.
    auto flat = TensorT<float>::full({4}, 0.25f);
    auto var4 = TensorT<float>::from({4}, {0.4f, 0.3f, 0.2f, 0.1f});
    CHECK_THROWS_AS((void)pearson_loss(flat, var4), NumericError);
    CHECK_THROWS_AS((void)pearson_loss(var4, flat), NumericError);
    CHECK_THROWS_AS((void)pearson_loss(var4, TensorT<float>::from({3}, {1, 2, 3})), ShapeError);
    CHECK_THROWS_AS((void)pearson_loss(TensorT<float>::from({1}, {1.0f}), TensorT<float>::from({1}, {1.0f})),
                    ShapeError);

    // Batched rows average their per-row correlations: rows (p,p) and
    // (p,anti-p) give (-1 + 1)/2 = 0.
    auto pt2 = TensorT<float>::from({2, 3}, {0.5f, 0.3f, 0.2f, 0.5f, 0.3f, 0.2f});
    auto ps2 = TensorT<float>::from({2, 3}, {0.5f, 0.3f, 0.2f, 0.2f, 0.4f, 0.5f});
    CHECK(pearson_loss(pt2, ps2).item() == doctest::Approx(0.0f).epsilon(1e-5));
}

TEST_CASE("pearson loss: analytic gradient matches finite differences") {
    auto p_t = TensorT<double>::randn({2, 8}, 89, 0.0, 1.0);
    auto x = TensorT<double>::randn({2, 8}, 90, 0.0, 1.0);
    auto rep = grad_check<double>([&]() { return pearson_loss(p_t, x); }, {{"x", x}});
    CHECK(rep.max_rel_error < 1e-4);
}

TEST_CASE("losses: gradients reach the student side only") {
    auto& tape = TapeT<float>::active();
    tape.clear();
    auto w_t = TensorT<float>::randn({2, 6}, 91).set_requires_grad(true);
    auto w_s = TensorT<float>::randn({2, 6}, 92).set_requires_grad(true);
    auto loss = pearson_loss(softmax_rows(w_t), softmax_rows(w_s));
    backward(loss);
    REQUIRE(w_s.has_grad());
    bool any = false;
    for (std::int64_t i = 0; i < 12; ++i)
        if (w_s.grad()[i] != 0.0f) any = true;
    CHECK(any);
    if (w_t.has_grad())
        for (std::int64_t i = 0; i < 12; ++i) CHECK(w_t.grad()[i] == 0.0f);
    tape.clear();

    w_t.zero_grad();
    w_s.zero_grad();
    auto mse = feature_mse(w_t, w_s);
    backward(mse);
    REQUIRE(w_s.has_grad());
    any = false;
    for (std::int64_t i = 0; i < 12; ++i)
        if (w_s.grad()[i] != 0.0f) any = true;
    CHECK(any);
    if (w_t.has_grad())
        for (std::int64_t i = 0; i < 12; ++i) CHECK(w_t.grad()[i] == 0.0f);
    tape.clear();
}

TEST_CASE("feature mse: zero on equality, constant offset, small oracle") {
    auto t = TensorT<float>::randn({4, 3}, 93);
    CHECK(feature_mse(t, t).item() == 0.0f);

    auto z = TensorT<float>::zeros({5, 2});
    auto c = TensorT<float>::full({5, 2}, 0.7f);
    CHECK(feature_mse(z, c).item() == doctest::Approx(0.49f).epsilon(1e-6));

    auto a = TensorT<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = TensorT<double>::from({2, 3}, {1.5, 2, 2, 4, 7, 6});
    // diffs: .5, 0, -1, 0, 2, 0 -> mean of squares = 5.25/6
    CHECK(feature_mse(a, b).item() == doctest::Approx(5.25 / 6.0).epsilon(1e-12));

    CHECK_THROWS_AS((void)feature_mse(a, TensorT<double>::zeros({3, 2})), ShapeError);
}

TEST_CASE("total loss: weighting, warm-up skip, and non-finite detection") {
    auto p = TensorT<float>::from({3}, {0.5f, 0.3f, 0.2f});
    auto tok_t = TensorT<float>::zeros({2, 3});
    auto tok_s = TensorT<float>::full({2, 3}, 0.3f);

    // l_sim = -1 (self-correlation), l_feat = 0.09.
    auto lb = total_loss(p, p, tok_t, tok_s, 1.0, 1.0, true);
    CHECK(lb.l_sim == doctest::Approx(-1.0).epsilon(1e-6));
    CHECK(lb.l_feat == doctest::Approx(0.09).epsilon(1e-6));
    CHECK(lb.total_value == doctest::Approx(-0.91).epsilon(1e-5));
    CHECK(lb.total.item() == doctest::Approx(-0.91f).epsilon(1e-5));
    CHECK_FALSE(lb.sim_skipped);

    auto lw = total_loss(p, p, tok_t, tok_s, 2.0, 0.5, true);
    CHECK(lw.total_value == doctest::Approx(-2.0 + 0.045).epsilon(1e-5));

    // Warm-up: no distributions yet; the flag records the skipped term.
    TensorT<float> undef;
    auto warm = total_loss(undef, undef, tok_t, tok_s, 1.0, 1.0, false);
    CHECK(warm.sim_skipped);
    CHECK(warm.l_sim == 0.0);
    CHECK(warm.total_value == doctest::Approx(0.09).epsilon(1e-6));

    // Feature-only arm: w_sim = 0 never looks at the distributions.
    auto feat_only = total_loss(undef, undef, tok_t, tok_s, 0.0, 1.0, true);
    CHECK_FALSE(feat_only.sim_skipped);
    CHECK(feat_only.total_value == doctest::Approx(0.09).epsilon(1e-6));

    auto bad = TensorT<float>::full({2, 3}, std::numeric_limits<float>::quiet_NaN());
    CHECK_THROWS_AS((void)total_loss(p, p, tok_t, bad, 1.0, 1.0, true), NumericError);
}

TEST_CASE("trainer: rejects mismatched dataset and undersized split") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    REQUIRE(ds.n_train == 16);

    auto cfg = tiny_config(tmp / "data", tmp / "out");
    cfg.batch = 32;  // more than the 16 train rows
    cfg.queue_capacity = 32;
    CHECK_THROWS_AS(Trainer(cfg, ds), DataError);

    auto cfg2 = tiny_config(tmp / "data", tmp / "out");
    cfg2.image_size = 128;  // dataset was written at 64
    CHECK_THROWS_AS(Trainer(cfg2, ds), DataError);
}

TEST_CASE("trainer: two runs with one config produce identical step records") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");

    Trainer a(cfg, ds);
    Trainer b(cfg, ds);
    for (int i = 0; i < 10; ++i) {
        auto ra = a.run_step();
        auto rb = b.run_step();
        CHECK(ra.step == rb.step);
        CHECK(ra.lr == rb.lr);
        CHECK(ra.l_sim == rb.l_sim);
        CHECK(ra.l_feat == rb.l_feat);
        CHECK(ra.total == rb.total);
        CHECK(ra.queue_fill == rb.queue_fill);
        CHECK(ra.sim_skipped == rb.sim_skipped);
    }
    auto pa = a.student().params();
    auto pb = b.student().params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t k = 0; k < pa.size(); ++k)
        for (std::int64_t i = 0; i < pa[k].second.size(); ++i)
            CHECK(pa[k].second.values()[i] == pb[k].second.values()[i]);
}

TEST_CASE("trainer: queue warm-up skips the similarity term, then engages") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");
    cfg.queue_capacity = 16;  // two batches to fill

    Trainer t(cfg, ds);
    auto r0 = t.run_step();
    CHECK(r0.sim_skipped);
    CHECK(r0.l_sim == 0.0);
    CHECK(r0.queue_fill == 8);
    auto r1 = t.run_step();
    CHECK_FALSE(r1.sim_skipped);
    CHECK(r1.l_sim != 0.0);
    CHECK(r1.queue_fill == 16);
    CHECK(t.queue().total_enqueued() == 16);
}

TEST_CASE("trainer: zero loss weights and zero decay leave parameters untouched") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");
    cfg.w_sim = 0.0;
    cfg.w_feat = 0.0;
    cfg.weight_decay = 0.0;

    Trainer t(cfg, ds);
    std::vector<std::vector<float>> before;
    for (auto& [n, p] : t.student().params()) {
        before.emplace_back(p.data(), p.data() + p.size());
    }
    (void)t.run_step();
    (void)t.run_step();
    std::size_t k = 0;
    for (auto& [n, p] : t.student().params()) {
        for (std::int64_t i = 0; i < p.size(); ++i) CHECK(p.values()[i] == before[k][static_cast<std::size_t>(i)]);
        ++k;
    }
}

TEST_CASE("trainer: feature loss trends down on a fixed batch") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");
    cfg.epochs = 20;  // room in the lr schedule for 30 repeats
    cfg.w_sim = 0.0;
    cfg.mask_ratio = 0.0;
    cfg.aug_crop = cfg.aug_flip = cfg.aug_jitter = false;

    Trainer t(cfg, ds);
    const std::vector<std::int64_t> fixed = {0, 1, 2, 3, 4, 5, 6, 7};
    std::vector<double> feats;
    for (int i = 0; i < 30; ++i) feats.push_back(t.distill_step(fixed).l_feat);
    auto window = [&](int from) {
        double acc = 0.0;
        for (int i = from; i < from + 10; ++i) acc += feats[static_cast<std::size_t>(i)];
        return acc / 10.0;
    };
    CHECK(window(10) < window(0));
    CHECK(window(20) < window(10));
}

TEST_CASE("trainer: checkpoint resume replays the uninterrupted run bitwise") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");

    Trainer a(cfg, ds);
    for (int i = 0; i < 6; ++i) (void)a.run_step();
    a.save_checkpoint(tmp / "ck");

    Trainer b(cfg, ds);
    b.load_checkpoint(tmp / "ck");
    CHECK(b.next_step() == 6);
    CHECK(b.queue().count() == a.queue().count());
    CHECK(b.queue().total_enqueued() == a.queue().total_enqueued());

    for (int i = 0; i < 4; ++i) {
        auto ra = a.run_step();
        auto rb = b.run_step();
        CHECK(ra.step == rb.step);
        CHECK(ra.lr == rb.lr);
        CHECK(ra.l_sim == rb.l_sim);
        CHECK(ra.l_feat == rb.l_feat);
        CHECK(ra.total == rb.total);
        CHECK(ra.queue_fill == rb.queue_fill);
    }
    auto pa = a.student().params();
    auto pb = b.student().params();
    for (std::size_t k = 0; k < pa.size(); ++k)
        for (std::int64_t i = 0; i < pa[k].second.size(); ++i)
            CHECK(pa[k].second.values()[i] == pb[k].second.values()[i]);
    auto qa = a.queue().snapshot();
    auto qb = b.queue().snapshot();
    for (std::int64_t i = 0; i < qa.size(); ++i) CHECK(qa.values()[i] == qb.values()[i]);
}

TEST_CASE("trainer: resume guards catch config drift and mangled manifests") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");

    Trainer a(cfg, ds);
    for (int i = 0; i < 2; ++i) (void)a.run_step();
    a.save_checkpoint(tmp / "ck");

    // Changed hyperparameter: the error says which one.
    auto drifted = cfg;
    drifted.tau = 0.2;
    Trainer c(drifted, ds);
    try {
        c.load_checkpoint(tmp / "ck");
        FAIL("expected a config mismatch");
    } catch (const DataError& e) {
        CHECK(std::string(e.what()).find("queue.tau") != std::string::npos);
    }

    Trainer d(cfg, ds);
    CHECK_THROWS_AS(d.load_checkpoint(tmp / "nothing-here"), DataError);

    std::ofstream(tmp / "ck/manifest.json") << "{ not json";
    CHECK_THROWS_AS(d.load_checkpoint(tmp / "ck"), DataError);
}

TEST_CASE("trainer: numeric blow-up aborts with the failing step in the message") {
    TempDir tmp;
    generate_dataset(tmp / "data", 24, 2, 64, 8, 3, false);
    auto ds = load_dataset(tmp / "data");
    auto cfg = tiny_config(tmp / "data", tmp / "out");

    Trainer t(cfg, ds);
    auto params = t.student().params();
    params[0].second.values()[0] = std::numeric_limits<float>::quiet_NaN();
    try {
        (void)t.run_step();
        FAIL("expected a numeric abort");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("aborting at step 0") != std::string::npos);
    }
}
