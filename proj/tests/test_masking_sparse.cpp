#include <doctest.h>

#include <cmath>
#include <set>

#include "sparsekd/gradcheck.hpp"
#include "sparsekd/masking.hpp"
#include "sparsekd/ops.hpp"
#include "sparsekd/sparse.hpp"

using namespace sparsekd;

namespace {

MaskMap map_from(std::initializer_list<std::uint8_t> cells, std::int64_t h, std::int64_t w) {
    MaskMap m;
    m.h = h;
    m.w = w;
    m.visible.assign(cells);
    return m;
}

SparseFeatureMapT<float> make_sparse(const TensorT<float>& features, const MaskMap& map) {
    SparseFeatureMapT<float> f;
    // Canonical form: zero out the masked positions before wrapping.
    f.features = apply_mask_dense(features, map);
    f.masks.assign(static_cast<std::size_t>(features.dim(0)), map);
    f.scale = 1;
    f.validate();
    return f;
}

}  // namespace

TEST_CASE("generate_mask: exact counts, determinism, bounds") {
    auto m0 = generate_mask(2, 2, 0.0, 1);
    CHECK(m0.visible_count() == 4);
    CHECK(m0.masked_count() == 0);

    auto m1 = generate_mask(2, 2, 0.5, 1);
    CHECK(m1.masked_count() == 2);

    auto m2 = generate_mask(4, 4, 0.6, 99);
    CHECK(m2.masked_count() == 10);  // round(0.6 * 16)
    auto m2b = generate_mask(4, 4, 0.6, 99);
    CHECK(m2.visible == m2b.visible);
    auto m2c = generate_mask(4, 4, 0.6, 100);
    CHECK(m2.visible != m2c.visible);  // astronomically unlikely to collide

    // ratio 1 masks everything; just below, one cell must survive.
    CHECK(generate_mask(2, 2, 1.0, 3).visible_count() == 0);
    CHECK(generate_mask(2, 2, 0.99, 3).visible_count() == 1);

    CHECK_THROWS_AS((void)generate_mask(2, 2, -0.1, 1), Error);
    CHECK_THROWS_AS((void)generate_mask(2, 2, 1.1, 1), Error);
    CHECK_THROWS_AS((void)generate_mask(0, 2, 0.5, 1), Error);
}

TEST_CASE("generate_mask: masked fraction within 1/cells of the request") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed)
        for (double ratio : {0.1, 0.25, 0.5, 0.6, 0.75, 0.9}) {
            auto m = generate_mask(5, 7, ratio, seed);
            const double frac = static_cast<double>(m.masked_count()) / static_cast<double>(m.cells());
            CHECK(std::abs(frac - ratio) < 1.0 / static_cast<double>(m.cells()));
        }
}

TEST_CASE("expand_hierarchy: block-constant maps and area-exact counts") {
    MaskGrid g;
    g.h = 2;
    g.w = 2;
    g.visible = {1, 0, 1, 1};  // one masked cell
    g.ratio = 0.25;

    // 2x2 -> 4x4: each cell becomes a 2x2 block.
    auto m4 = expand_map(g, 4, 4);
    for (std::int64_t i = 0; i < 4; ++i)
        for (std::int64_t j = 0; j < 4; ++j) CHECK(m4.at(i, j) == (g.visible[static_cast<std::size_t>((i / 2) * 2 + j / 2)] != 0));

    // Identity scale reproduces the grid.
    auto m1 = expand_map(g, 2, 2);
    for (std::int64_t i = 0; i < 4; ++i) CHECK((m1.visible[static_cast<std::size_t>(i)] != 0) == (g.visible[static_cast<std::size_t>(i)] != 0));

    // Map sizes 16,8,4,2 per side (factors 8,4,2,1 on a 2x2 grid): visible
    // counts scale exactly with area, 3/4 of each map.
    auto hier = expand_hierarchy(g, {8, 4, 2, 1});
    CHECK(hier.at_factor(8).h == 16);
    CHECK(hier.at_factor(8).visible_count() == 192);
    CHECK(hier.at_factor(4).visible_count() == 48);
    CHECK(hier.at_factor(2).visible_count() == 12);
    CHECK(hier.at_factor(1).visible_count() == 3);

    CHECK_THROWS_AS((void)expand_map(g, 3, 3), Error);       // non-integral factor
    CHECK_THROWS_AS((void)hier.at_factor(5), Error);         // absent scale
    CHECK(hier.checksum() == expand_hierarchy(g, {8, 4, 2, 1}).checksum());
}

TEST_CASE("apply_mask_dense: identity, zero, and counting") {
    auto img = TensorT<float>::full({1, 4, 4}, 1.0f);
    auto all = map_from({1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1}, 4, 4);
    auto none = map_from({0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0}, 4, 4);
    auto half = map_from({1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 0, 0}, 4, 4);

    auto a = apply_mask_dense(img, all);
    for (std::int64_t i = 0; i < 16; ++i) CHECK(a.values()[i] == 1.0f);
    auto z = apply_mask_dense(img, none);
    for (std::int64_t i = 0; i < 16; ++i) CHECK(z.values()[i] == 0.0f);
    auto h = apply_mask_dense(img, half);
    CHECK(h.values().sum() == doctest::Approx(8.0f));

    auto wrong = map_from({1, 0, 0, 1}, 2, 2);
    CHECK_THROWS_AS((void)apply_mask_dense(img, wrong), ShapeError);
}

TEST_CASE("sparse_conv2d: all-visible equals dense, both paths") {
    auto x = TensorT<float>::randn({2, 3, 6, 6}, 21);
    auto w = TensorT<float>::randn({4, 3, 3, 3}, 22, 0.0, 0.3);
    auto b = TensorT<float>::randn({4}, 23);
    MaskMap all;
    all.h = all.w = 6;
    all.visible.assign(36, 1);

    auto sp = make_sparse(x, all);
    auto dense = conv2d(x, w, b, {1, 1});
    for (auto path : {SparseConvPath::Gather, SparseConvPath::DenseMasked}) {
        auto out = sparse_conv2d(sp, w, b, {1, 1}, sp.masks, path);
        REQUIRE(out.features.shape() == dense.shape());
        for (std::int64_t i = 0; i < dense.size(); ++i)
            CHECK(std::abs(out.features.values()[i] - dense.values()[i]) < 1e-6f);
    }
}

TEST_CASE("sparse_conv2d: all-masked gives zero output and zero kernel gradient") {
    auto& tape = TapeT<float>::active();
    tape.clear();
    auto x = TensorT<float>::randn({1, 2, 4, 4}, 31);
    auto w = TensorT<float>::randn({2, 2, 3, 3}, 32).set_requires_grad(true);
    auto b = TensorT<float>::zeros({2}).set_requires_grad(true);
    MaskMap none;
    none.h = none.w = 4;
    none.visible.assign(16, 0);

    auto sp = make_sparse(x, none);
    auto out = sparse_conv2d(sp, w, b, {1, 1}, sp.masks);
    for (std::int64_t i = 0; i < out.features.size(); ++i) CHECK(out.features.values()[i] == 0.0f);

    backward(sum_all(out.features));
    REQUIRE(w.has_grad());
    for (std::int64_t i = 0; i < w.size(); ++i) CHECK(w.grad()[i] == 0.0f);
    tape.clear();
}

TEST_CASE("sparse_conv2d: checkerboard mask against a nested-loop oracle") {
    const std::int64_t h = 4, w4 = 4, k = 3, pad = 1;
    auto x = TensorT<float>::randn({1, 1, h, w4}, 41);
    auto w = TensorT<float>::full({1, 1, k, k}, 1.0f);
    auto b = TensorT<float>::zeros({1});
    MaskMap checker;
    checker.h = h;
    checker.w = w4;
    checker.visible.resize(16);
    for (std::int64_t i = 0; i < h; ++i)
        for (std::int64_t j = 0; j < w4; ++j) checker.visible[static_cast<std::size_t>(i * w4 + j)] = (i + j) % 2 == 0;

    auto sp = make_sparse(x, checker);
    auto out = sparse_conv2d(sp, w, b, {1, pad}, sp.masks);

    // Oracle: plain correlation where masked inputs contribute zero and
    // masked outputs are forced to zero.
    for (std::int64_t oi = 0; oi < h; ++oi)
        for (std::int64_t oj = 0; oj < w4; ++oj) {
            double want = 0.0;
            if (checker.at(oi, oj)) {
                for (std::int64_t ki = 0; ki < k; ++ki)
                    for (std::int64_t kj = 0; kj < k; ++kj) {
                        const std::int64_t ii = oi + ki - pad, jj = oj + kj - pad;
                        if (ii < 0 || ii >= h || jj < 0 || jj >= w4) continue;
                        if (!checker.at(ii, jj)) continue;
                        want += static_cast<double>(x.values()[ii * w4 + jj]);
                    }
            }
            CHECK(out.features.values()[oi * w4 + oj] == doctest::Approx(want).epsilon(1e-5));
        }
}

TEST_CASE("sparse_conv2d: gather path matches the dense-masked oracle on random masks") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        auto x = TensorT<float>::randn({2, 3, 8, 8}, seed * 10);
        auto w = TensorT<float>::randn({5, 3, 3, 3}, seed * 10 + 1, 0.0, 0.4);
        auto b = TensorT<float>::randn({5}, seed * 10 + 2);
        auto grid = generate_mask(8, 8, 0.5, seed);
        auto map = expand_map(grid, 8, 8);

        auto sp = make_sparse(x, map);
        auto a = sparse_conv2d(sp, w, b, {1, 1}, sp.masks, SparseConvPath::Gather);
        auto o = sparse_conv2d(sp, w, b, {1, 1}, sp.masks, SparseConvPath::DenseMasked);
        for (std::int64_t i = 0; i < a.features.size(); ++i)
            CHECK(std::abs(a.features.values()[i] - o.features.values()[i]) < 1e-5f);
    }
}

TEST_CASE("sparse_conv2d: stride and shape validation") {
    auto x = TensorT<float>::randn({1, 2, 4, 4}, 3);
    auto w = TensorT<float>::randn({2, 2, 3, 3}, 4);
    auto b = TensorT<float>::zeros({2});
    MaskMap all;
    all.h = all.w = 4;
    all.visible.assign(16, 1);
    auto sp = make_sparse(x, all);

    CHECK_THROWS_AS((void)sparse_conv2d(sp, w, b, {3, 1}, sp.masks), ConfigError);

    auto wbad = TensorT<float>::randn({2, 5, 3, 3}, 5);  // channel mismatch
    CHECK_THROWS_AS((void)sparse_conv2d(sp, wbad, b, {1, 1}, sp.masks), ShapeError);

    auto bbad = TensorT<float>::zeros({3});
    CHECK_THROWS_AS((void)sparse_conv2d(sp, w, bbad, {1, 1}, sp.masks), ShapeError);

    // Output mask at the wrong scale.
    MaskMap small;
    small.h = small.w = 2;
    small.visible.assign(4, 1);
    CHECK_THROWS_AS((void)sparse_conv2d(sp, w, b, {1, 1}, {small}, SparseConvPath::Gather), ShapeError);

    // Non-integral output extent: 4x4 input, 3x3 kernel, stride 2, pad 1.
    CHECK_THROWS_AS((void)sparse_conv2d(sp, w, b, {2, 1}, {small}), ShapeError);
}

TEST_CASE("sparse_batchnorm: visible-site statistics, hand example {1,3}") {
    // Two visible sites holding 1 and 3: mean 2, var 1 -> normalized to ±1.
    auto x = TensorT<float>::zeros({1, 1, 2, 2});
    x.values()[0] = 1.0f;  // (0,0) visible
    x.values()[1] = 3.0f;  // (0,1) visible
    x.values()[2] = 9.0f;  // masked, must be ignored and zeroed
    x.values()[3] = 9.0f;
    auto map = map_from({1, 1, 0, 0}, 2, 2);

    SparseFeatureMapT<float> sp;
    sp.features = apply_mask_dense(x, map);
    sp.masks = {map};
    sp.scale = 1;

    auto gamma = TensorT<float>::full({1}, 1.0f);
    auto beta = TensorT<float>::zeros({1});
    auto rm = TensorT<float>::zeros({1});
    auto rv = TensorT<float>::full({1}, 1.0f);
    auto out = sparse_batchnorm(sp, gamma, beta, rm, rv, /*training=*/true);

    const double eps = 1e-5;
    const double want = 1.0 / std::sqrt(1.0 + eps);
    CHECK(out.features.values()[0] == doctest::Approx(-want).epsilon(1e-5));
    CHECK(out.features.values()[1] == doctest::Approx(+want).epsilon(1e-5));
    CHECK(out.features.values()[2] == 0.0f);
    CHECK(out.features.values()[3] == 0.0f);
    // Running stats absorb the visible-site statistics (momentum 0.1).
    CHECK(rm.values()[0] == doctest::Approx(0.2f).epsilon(1e-5));
}

TEST_CASE("sparse_batchnorm: all-visible equals dense batchnorm, zero-visible errors") {
    auto x = TensorT<float>::randn({2, 3, 4, 4}, 8);
    MaskMap all;
    all.h = all.w = 4;
    all.visible.assign(16, 1);
    auto sp = make_sparse(x, all);

    auto gamma = TensorT<float>::randn({3}, 9, 1.0, 0.1);
    auto beta = TensorT<float>::randn({3}, 10, 0.0, 0.1);
    auto rm1 = TensorT<float>::zeros({3}), rv1 = TensorT<float>::full({3}, 1.0f);
    auto rm2 = TensorT<float>::zeros({3}), rv2 = TensorT<float>::full({3}, 1.0f);

    auto a = sparse_batchnorm(sp, gamma, beta, rm1, rv1, true);
    auto d = batchnorm(x, gamma, beta, rm2, rv2, true);
    for (std::int64_t i = 0; i < d.size(); ++i) CHECK(std::abs(a.features.values()[i] - d.values()[i]) < 1e-5f);
    for (std::int64_t c = 0; c < 3; ++c) {
        CHECK(rm1.values()[c] == doctest::Approx(rm2.values()[c]).epsilon(1e-6));
        CHECK(rv1.values()[c] == doctest::Approx(rv2.values()[c]).epsilon(1e-6));
    }

    MaskMap none;
    none.h = none.w = 4;
    none.visible.assign(16, 0);
    auto spz = make_sparse(x, none);
    auto rm3 = TensorT<float>::zeros({3}), rv3 = TensorT<float>::full({3}, 1.0f);
    CHECK_THROWS_AS((void)sparse_batchnorm(spz, gamma, beta, rm3, rv3, true), NumericError);
}

TEST_CASE("densify: identity, broadcast and single-hole substitution") {
    auto& tape = TapeT<float>::active();
    tape.clear();

    auto x = TensorT<float>::randn({1, 1, 2, 2}, 12);
    auto emb = TensorT<float>::from({1}, {5.0f}).set_requires_grad(true);

    // All visible: features pass through, embedding gets zero gradient.
    auto all = map_from({1, 1, 1, 1}, 2, 2);
    auto spa = make_sparse(x, all);
    auto da = densify(spa, emb);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(da.values()[i] == spa.features.values()[i]);
    backward(sum_all(da));
    REQUIRE(emb.has_grad());
    CHECK(emb.grad()[0] == 0.0f);
    tape.clear();
    emb.zero_grad();

    // All masked: embedding broadcast everywhere; gradient counts positions.
    auto none = map_from({0, 0, 0, 0}, 2, 2);
    auto spn = make_sparse(x, none);
    auto dn = densify(spn, emb);
    for (std::int64_t i = 0; i < 4; ++i) CHECK(dn.values()[i] == 5.0f);
    backward(sum_all(dn));
    CHECK(emb.grad()[0] == doctest::Approx(4.0f));
    tape.clear();
    emb.zero_grad();

    // One hole: that cell reads the embedding, the rest pass through.
    auto one = map_from({1, 0, 1, 1}, 2, 2);
    auto spo = make_sparse(x, one);
    auto d1 = densify(spo, emb);
    CHECK(d1.values()[0] == spo.features.values()[0]);
    CHECK(d1.values()[1] == 5.0f);
    CHECK(d1.values()[2] == spo.features.values()[2]);
    CHECK(d1.values()[3] == spo.features.values()[3]);
    backward(sum_all(d1));
    CHECK(emb.grad()[0] == doctest::Approx(1.0f));
    tape.clear();

    auto emb2 = TensorT<float>::zeros({3});  // channel mismatch
    CHECK_THROWS_AS((void)densify(spo, emb2), ShapeError);
}

TEST_CASE("densify and sparse_conv2d pass grad_check (64-bit)") {
    auto x = TensorT<double>::randn({1, 2, 4, 4}, 51);
    auto w = TensorT<double>::randn({3, 2, 3, 3}, 52, 0.0, 0.4);
    auto b = TensorT<double>::randn({3}, 53);
    auto emb = TensorT<double>::randn({2}, 54);
    auto grid = generate_mask(4, 4, 0.5, 55);
    auto map = expand_map(grid, 4, 4);

    SparseFeatureMapT<double> sp;
    sp.features = apply_mask_dense(x, map);
    sp.masks = {map};
    sp.scale = 1;

    auto conv_fn = [&]() {
        SparseFeatureMapT<double> in;
        in.features = apply_mask_dense(x, map);
        in.masks = {map};
        in.scale = 1;
        auto out = sparse_conv2d(in, w, b, {1, 1}, in.masks);
        return mean_all(mul(out.features, out.features));
    };
    auto rep1 = grad_check<double>(conv_fn, {{"w", w}, {"b", b}});
    CHECK(rep1.max_rel_error < 1e-4);

    auto densify_fn = [&]() {
        SparseFeatureMapT<double> in;
        in.features = apply_mask_dense(x, map);
        in.masks = {map};
        in.scale = 1;
        auto d = densify(in, emb);
        return mean_all(mul(d, d));
    };
    auto rep2 = grad_check<double>(densify_fn, {{"emb", emb}});
    CHECK(rep2.max_rel_error < 1e-4);
}

TEST_CASE("check_pattern: sparse ops keep the support, dense conv leaks") {
    auto x = TensorT<float>::randn({1, 2, 8, 8}, 61);
    auto w = TensorT<float>::randn({2, 2, 3, 3}, 62, 0.0, 0.5);
    auto b = TensorT<float>::randn({2}, 63);
    auto grid = generate_mask(8, 8, 0.5, 64);
    auto map = expand_map(grid, 8, 8);
    auto sp = make_sparse(x, map);

    // Sparse op: support contained in the visible set, exactly.
    auto out = sparse_conv2d(sp, w, b, {1, 1}, sp.masks);
    CHECK(check_pattern(out).pass());

    // Same weights through a dense conv: values bleed across the boundary.
    SparseFeatureMapT<float> leaky;
    leaky.features = conv2d(sp.features, w, b, {1, 1});
    leaky.masks = sp.masks;
    leaky.scale = 1;
    auto rep = check_pattern(leaky);
    CHECK(rep.leaked > 0);
    CHECK_FALSE(rep.pass());
    CHECK(!rep.positions.empty());

    // All-visible mask: both kinds trivially preserve the (full) support.
    MaskMap all;
    all.h = all.w = 8;
    all.visible.assign(64, 1);
    auto spa = make_sparse(x, all);
    auto outa = sparse_conv2d(spa, w, b, {1, 1}, spa.masks);
    CHECK(check_pattern(outa).pass());
    SparseFeatureMapT<float> densea;
    densea.features = conv2d(spa.features, w, b, {1, 1});
    densea.masks = spa.masks;
    densea.scale = 1;
    CHECK(check_pattern(densea).pass());
}

TEST_CASE("sparse_relu and sparse_add preserve canonical form") {
    auto x = TensorT<float>::randn({1, 2, 4, 4}, 71);
    auto grid = generate_mask(4, 4, 0.5, 72);
    auto map = expand_map(grid, 4, 4);
    auto a = make_sparse(x, map);
    auto b = make_sparse(TensorT<float>::randn({1, 2, 4, 4}, 73), map);

    auto r = sparse_relu(a);
    CHECK(check_pattern(r).pass());
    for (std::int64_t i = 0; i < r.features.size(); ++i) CHECK(r.features.values()[i] >= 0.0f);

    auto s = sparse_add(a, b);
    CHECK(check_pattern(s).pass());
    for (std::int64_t i = 0; i < s.features.size(); ++i)
        CHECK(s.features.values()[i] == doctest::Approx(a.features.values()[i] + b.features.values()[i]));
}
