// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "core/graph.hpp"
#include "testutil.hpp"

using namespace kvcat;
using test::finite_difference;
using test::max_rel_err;
using test::random_tensor;

TEST_CASE("matmul values") {
    Graph g;
    auto a = g.constant(Tensor::identity(2));
    auto b = g.constant(Tensor::from_rows({{1, 2}, {3, 4}}));
    auto c = g.matmul(a, b);
    CHECK(tensor_equal(g.value(c), Tensor::from_rows({{1, 2}, {3, 4}})));

    auto r = g.constant(Tensor::from_rows({{1, 2}}));
    auto col = g.constant(Tensor::from_rows({{3}, {4}}));
    auto s = g.matmul(r, col);
    CHECK(g.value(s).at(0, 0) == doctest::Approx(11.0));

    CHECK_THROWS_AS(g.matmul(r, r), ShapeError);
}

TEST_CASE("matmul gradient matches finite differences and hand values") {
    Graph g;
    auto a = g.leaf(Tensor::identity(2));
    auto b = g.leaf(Tensor::from_rows({{2, 0}, {0, 2}}));
    auto loss = g.sum(g.matmul(a, b));
    g.backward(loss);
    CHECK(tensor_equal(g.grad(a), Tensor::from_rows({{2, 2}, {2, 2}})));

    Rng rng(11);
    for (bool ta : {false, true}) {
        for (bool tb : {false, true}) {
            Tensor av = random_tensor(rng, ta ? std::vector<int64_t>{4, 3} : std::vector<int64_t>{3, 4});
            Tensor bv = random_tensor(rng, tb ? std::vector<int64_t>{5, 4} : std::vector<int64_t>{4, 5});
            Graph g2;
            auto an = g2.leaf(av);
            auto bn = g2.leaf(bv);
            auto l = g2.sum(g2.matmul(an, bn, ta, tb));
            g2.backward(l);
            auto fa = finite_difference(
                [&](const Tensor& x) {
                    Graph h;
                    return h.value(h.sum(h.matmul(h.constant(x), h.constant(bv), ta, tb))).at(0);
                },
                av);
            auto fb = finite_difference(
                [&](const Tensor& x) {
                    Graph h;
                    return h.value(h.sum(h.matmul(h.constant(av), h.constant(x), ta, tb))).at(0);
                },
                bv);
            CHECK(max_rel_err(g2.grad(an), fa) < 1e-6);
            CHECK(max_rel_err(g2.grad(bn), fb) < 1e-6);
        }
    }
}

TEST_CASE("masked_row_softmax values") {
    Graph g;
    auto x = g.constant(Tensor::from_rows({{0, 0}}));
    Tensor mask = Tensor::full({1, 2}, 1.0);
    auto p = g.masked_row_softmax(x, mask, 1.0);
    CHECK(g.value(p).at(0, 0) == doctest::Approx(0.5));
    CHECK(g.value(p).at(0, 1) == doctest::Approx(0.5));

    auto x2 = g.constant(Tensor::from_rows({{std::log(2.0), 0.0}}));
    auto p2 = g.masked_row_softmax(x2, mask, 1.0);
    CHECK(g.value(p2).at(0, 0) == doctest::Approx(2.0 / 3.0));
    CHECK(g.value(p2).at(0, 1) == doctest::Approx(1.0 / 3.0));

    Tensor single({1, 2});
    single.at(0, 0) = 1.0;
    auto x3 = g.constant(Tensor::from_rows({{5, 9}}));
    auto p3 = g.masked_row_softmax(x3, single, 1.0);
    CHECK(g.value(p3).at(0, 0) == 1.0);
    CHECK(g.value(p3).at(0, 1) == 0.0);

    Tensor empty({1, 2});
    CHECK_THROWS_AS(g.masked_row_softmax(x3, empty, 1.0), ValueError);
}

TEST_CASE("masked_row_softmax rows sum to one and masked entries are exact zeros") {
    Rng rng(3);
    Tensor x = random_tensor(rng, {5, 7}, 3.0);
    Tensor mask({5, 7});
    for (int64_t i = 0; i < 5; ++i) {
        mask.at(i, i) = 1.0;  // guarantee one live slot per row
        for (int64_t j = 0; j < 7; ++j)
            if (rng.uniform() < 0.5) mask.at(i, j) = 1.0;
    }
    Graph g;
    auto p = g.masked_row_softmax(g.constant(x), mask, 0.7);
    const Tensor& v = g.value(p);
    for (int64_t i = 0; i < 5; ++i) {
        double s = 0.0;
        for (int64_t j = 0; j < 7; ++j) {
            if (mask.at(i, j) == 0.0) CHECK(v.at(i, j) == 0.0);
            CHECK(v.at(i, j) >= 0.0);
            s += v.at(i, j);
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("masked_row_softmax gradient vs finite differences") {
    Rng rng(5);
    Tensor x = random_tensor(rng, {3, 4});
    Tensor mask = Tensor::full({3, 4}, 1.0);
    mask.at(0, 2) = 0.0;
    mask.at(2, 0) = 0.0;
    Tensor weights = random_tensor(rng, {3, 4});
    auto run = [&](const Tensor& in) {
        Graph h;
        auto p = h.masked_row_softmax(h.constant(in), mask, 1.3);
        return h.value(h.sum(h.mul(p, h.constant(weights)))).at(0);
    };
    Graph g;
    auto xn = g.leaf(x);
    auto p = g.masked_row_softmax(xn, mask, 1.3);
    auto loss = g.sum(g.mul(p, g.constant(weights)));
    g.backward(loss);
    CHECK(max_rel_err(g.grad(xn), finite_difference(run, x)) < 1e-6);
}

TEST_CASE("rms_norm values and gradient") {
    Graph g;
    auto x = g.constant(Tensor::from_rows({{2.5, 2.5, 2.5}}));
    auto gain = g.constant(Tensor::full({3}, 1.0));
    auto y = g.rms_norm(x, gain, 0.0);
    for (int64_t j = 0; j < 3; ++j) CHECK(g.value(y).at(0, j) == doctest::Approx(1.0));

    auto x2 = g.constant(Tensor::from_rows({{3.0, 4.0}}));
    auto gain2 = g.constant(Tensor::full({2}, 1.0));
    auto y2 = g.rms_norm(x2, gain2, 0.0);
    CHECK(g.value(y2).at(0, 0) == doctest::Approx(0.84853).epsilon(1e-5));
    CHECK(g.value(y2).at(0, 1) == doctest::Approx(1.13137).epsilon(1e-5));

    Rng rng(17);
    Tensor xv = random_tensor(rng, {4, 6});
    Tensor gv = random_tensor(rng, {6});
    Tensor wv = random_tensor(rng, {4, 6});
    Graph g3;
    auto xn = g3.leaf(xv);
    auto gn = g3.leaf(gv);
    auto out = g3.rms_norm(xn, gn, 1e-5);
    auto loss = g3.sum(g3.mul(out, g3.constant(wv)));
    g3.backward(loss);
    auto fx = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            auto o = h.rms_norm(h.constant(t), h.constant(gv), 1e-5);
            return h.value(h.sum(h.mul(o, h.constant(wv)))).at(0);
        },
        xv);
    auto fg = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            auto o = h.rms_norm(h.constant(xv), h.constant(t), 1e-5);
            return h.value(h.sum(h.mul(o, h.constant(wv)))).at(0);
        },
        gv);
    CHECK(max_rel_err(g3.grad(xn), fx) < 1e-6);
    CHECK(max_rel_err(g3.grad(gn), fg) < 1e-6);
}

TEST_CASE("pointwise op values") {
    Graph g;
    Tensor z = Tensor::from_rows({{0.0, 1.0, -1.0}});
    auto e = g.elu_plus_one(g.constant(z));
    CHECK(g.value(e).at(0, 0) == 1.0);
    CHECK(g.value(e).at(0, 1) == 2.0);
    CHECK(g.value(e).at(0, 2) == doctest::Approx(std::exp(-1.0)));

    auto tbl = g.constant(Tensor::identity(3));
    auto got = g.gather_rows(tbl, {2});
    CHECK(tensor_equal(g.value(got), Tensor::from_rows({{0, 0, 1}})));
    CHECK_THROWS_AS(g.gather_rows(tbl, {3}), IndexError);

    // gelu(0)=0, gelu(large)~large, gelu(-large)~0
    auto ge = g.gelu(g.constant(Tensor::from_rows({{0.0, 10.0, -10.0}})));
    CHECK(g.value(ge).at(0, 0) == 0.0);
    CHECK(g.value(ge).at(0, 1) == doctest::Approx(10.0));
    CHECK(g.value(ge).at(0, 2) == doctest::Approx(0.0).epsilon(1e-6));
}

TEST_CASE("smooth pointwise and reduction gradients vs finite differences") {
    Rng rng(23);
    Tensor x = random_tensor(rng, {3, 5});
    Tensor w = random_tensor(rng, {3, 5});

    auto check_op = [&](auto&& apply) {
        Graph g;
        auto xn = g.leaf(x);
        auto loss = g.sum(g.mul(apply(g, xn), g.constant(w)));
        g.backward(loss);
        auto fd = finite_difference(
            [&](const Tensor& t) {
                Graph h;
                auto c = h.constant(t);
                return h.value(h.sum(h.mul(apply(h, c), h.constant(w)))).at(0);
            },
            x);
        CHECK(max_rel_err(g.grad(xn), fd) < 1e-6);
    };
    check_op([](Graph& g, Graph::NodeId n) { return g.gelu(n); });
    check_op([](Graph& g, Graph::NodeId n) { return g.elu_plus_one(n); });
    check_op([](Graph& g, Graph::NodeId n) { return g.normalize_rows(n); });
    check_op([](Graph& g, Graph::NodeId n) { return g.affine(n, 1.7, -0.3); });

    // row_sum / row_div / row_dot
    Tensor d = random_tensor(rng, {3});
    for (int64_t i = 0; i < 3; ++i) d.at(i) = std::abs(d.at(i)) + 0.5;
    {
        Graph g;
        auto xn = g.leaf(x);
        auto dn = g.leaf(d);
        auto out = g.row_div(xn, dn, 1e-6);
        auto loss = g.sum(g.mul(out, g.constant(w)));
        g.backward(loss);
        auto fx = finite_difference(
            [&](const Tensor& t) {
                Graph h;
                auto o = h.row_div(h.constant(t), h.constant(d), 1e-6);
                return h.value(h.sum(h.mul(o, h.constant(w)))).at(0);
            },
            x);
        auto fdn = finite_difference(
            [&](const Tensor& t) {
                Graph h;
                auto o = h.row_div(h.constant(x), h.constant(t), 1e-6);
                return h.value(h.sum(h.mul(o, h.constant(w)))).at(0);
            },
            d);
        CHECK(max_rel_err(g.grad(xn), fx) < 1e-6);
        CHECK(max_rel_err(g.grad(dn), fdn) < 1e-6);
    }
    {
        Graph g;
        auto a = g.leaf(x);
        auto b = g.leaf(w);
        auto loss = g.sum(g.row_dot(a, b));
        g.backward(loss);
        CHECK(tensor_equal(g.grad(a), w));
        CHECK(tensor_equal(g.grad(b), x));
    }
}

TEST_CASE("cross entropy values and identities") {
    Graph g;
    auto uniform = g.constant(Tensor::zeros({2, 4}));
    auto ce = g.cross_entropy_rows(uniform, {1, 3});
    CHECK(g.value(ce).at(0) == doctest::Approx(std::log(4.0)));

    Tensor sat = Tensor::zeros({1, 4});
    sat.at(0, 2) = 1e4;
    auto ce2 = g.cross_entropy_rows(g.constant(sat), {2});
    CHECK(g.value(ce2).at(0) == doctest::Approx(0.0).epsilon(1e-9));

    // CE equals KL against the one-hot target distribution, exactly.
    Rng rng(31);
    Tensor logits = random_tensor(rng, {3, 5}, 2.0);
    std::vector<int64_t> targets = {4, 0, 2};
    Tensor onehot = Tensor::zeros({3, 5});
    for (int64_t i = 0; i < 3; ++i) onehot.at(i, targets[static_cast<size_t>(i)]) = 1.0;
    Graph g2;
    auto ln = g2.constant(logits);
    auto cev = g2.value(g2.cross_entropy_rows(ln, targets)).at(0);
    auto klv = g2.value(g2.kl_rows(ln, onehot)).at(0);
    CHECK(cev == klv);

    CHECK_THROWS_AS(g.cross_entropy_rows(uniform, std::vector<int64_t>{}), ValueError);
    CHECK_THROWS_AS(g.cross_entropy_rows(uniform, std::vector<int64_t>{1, 9}), IndexError);
}

TEST_CASE("cross entropy gradient vs finite differences") {
    Rng rng(37);
    Tensor logits = random_tensor(rng, {4, 6}, 1.5);
    std::vector<int64_t> targets = {0, 5, 2, 2};
    Graph g;
    auto ln = g.leaf(logits);
    auto loss = g.cross_entropy_rows(ln, targets);
    g.backward(loss);
    auto fd = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            return h.value(h.cross_entropy_rows(h.constant(t), targets)).at(0);
        },
        logits);
    CHECK(max_rel_err(g.grad(ln), fd) < 1e-6);
}

TEST_CASE("kl values") {
    Graph g;
    // identical distributions -> zero (exact when built from logits)
    Rng rng(41);
    Tensor q = random_tensor(rng, {2, 3}, 2.0);
    auto qn = g.constant(q);
    CHECK(g.value(g.kl_rows_from_logits(qn, q)).at(0) == 0.0);

    // p one-hot against uniform logits -> ln 2
    Tensor p = Tensor::from_rows({{1.0, 0.0}});
    auto u = g.constant(Tensor::zeros({1, 2}));
    CHECK(g.value(g.kl_rows(u, p)).at(0) == doctest::Approx(std::log(2.0)));

    // p uniform against uniform -> 0
    Tensor p2 = Tensor::from_rows({{0.5, 0.5}});
    CHECK(g.value(g.kl_rows(u, p2)).at(0) == doctest::Approx(0.0));

    Tensor bad = Tensor::from_rows({{-0.5, 1.5}});
    CHECK_THROWS_AS(g.kl_rows(u, bad), ValueError);
}

TEST_CASE("kl gradient vs finite differences") {
    Rng rng(43);
    Tensor q = random_tensor(rng, {3, 4}, 2.0);
    Tensor teacher = random_tensor(rng, {3, 4}, 1.0);
    Graph g;
    auto qn = g.leaf(q);
    auto loss = g.kl_rows_from_logits(qn, teacher);
    g.backward(loss);
    auto fd = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            return h.value(h.kl_rows_from_logits(h.constant(t), teacher)).at(0);
        },
        q);
    CHECK(max_rel_err(g.grad(qn), fd) < 1e-6);
}

TEST_CASE("backward basics") {
    // sum -> all-ones gradient
    Rng rng(47);
    Tensor x = random_tensor(rng, {3, 4});
    Graph g;
    auto xn = g.leaf(x);
    auto s = g.sum(xn);
    g.backward(s);
    CHECK(tensor_equal(g.grad(xn), Tensor::full({3, 4}, 1.0)));

    // unreachable leaf -> zero gradient
    auto orphan = g.leaf(Tensor::full({2}, 3.0));
    g.backward(s);
    CHECK(tensor_equal(g.grad(orphan), Tensor::zeros({2})));

    // non-scalar root -> contract error
    CHECK_THROWS_AS(g.backward(xn), Error);
}

TEST_CASE("backward random chain matches finite differences and is deterministic") {
    Rng rng(53);
    Tensor x = random_tensor(rng, {4, 4});
    Tensor w = random_tensor(rng, {4, 4});
    auto build = [&](Graph& g, Graph::NodeId xn) {
        auto a = g.matmul(xn, g.constant(w));
        auto b = g.gelu(a);
        auto c = g.rms_norm(b, g.constant(Tensor::full({4}, 1.0)), 1e-5);
        return g.sum(g.mul(c, g.constant(w)));
    };
    Graph g;
    auto xn = g.leaf(x);
    auto loss = build(g, xn);
    g.backward(loss);
    Tensor g1 = g.grad(xn);
    auto fd = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            auto c = h.constant(t);
            return h.value(build(h, c)).at(0);
        },
        x);
    CHECK(max_rel_err(g1, fd) < 1e-6);

    g.backward(loss);
    CHECK(tensor_equal(g1, g.grad(xn)));  // bit-identical reruns
}

TEST_CASE("ste_gate forward is the hard mask, backward passes through") {
    Graph g;
    auto p = g.leaf(Tensor::from_rows({{0.9, 0.1}}));
    auto gate = g.ste_gate(p, 0.5);
    CHECK(g.value(gate).at(0, 0) == 1.0);
    CHECK(g.value(gate).at(0, 1) == 0.0);
    auto loss = g.sum(gate);
    g.backward(loss);
    CHECK(tensor_equal(g.grad(p), Tensor::full({1, 2}, 1.0)));
}

TEST_CASE("gated softmax: all-ones gate reproduces the plain softmax bitwise") {
    Rng rng(59);
    Tensor x = random_tensor(rng, {4, 4}, 2.0);
    Tensor causal({4, 4});
    for (int64_t i = 0; i < 4; ++i)
        for (int64_t j = 0; j <= i; ++j) causal.at(i, j) = 1.0;
    Graph g;
    auto xn = g.constant(x);
    auto ones = g.constant(Tensor::full({4}, 1.0));
    auto gated = g.gated_masked_softmax(xn, ones, causal, 1.0, 0);
    auto plain = g.masked_row_softmax(xn, causal, 1.0);
    CHECK(tensor_equal(g.value(gated), g.value(plain)));
}

TEST_CASE("gated softmax: binary gate equals masked_row_softmax") {
    Rng rng(61);
    Tensor x = random_tensor(rng, {3, 3}, 1.5);
    Tensor causal({3, 3});
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j <= i; ++j) causal.at(i, j) = 1.0;
    Tensor gate_v = Tensor::from_vector({3}, {1.0, 0.0, 1.0});
    // Equivalent hard mask: key j kept iff gate_j=1 or j is the query's self slot.
    Tensor hard({3, 3});
    for (int64_t i = 0; i < 3; ++i)
        for (int64_t j = 0; j <= i; ++j) hard.at(i, j) = (gate_v.at(j) == 1.0 || j == i) ? 1.0 : 0.0;
    Graph g;
    auto xn = g.constant(x);
    auto gated = g.gated_masked_softmax(xn, g.constant(gate_v), causal, 1.0, 0);
    auto masked = g.masked_row_softmax(xn, hard, 1.0);
    CHECK(tensor_equal(g.value(gated), g.value(masked)));
}

TEST_CASE("gated softmax gradients: FD on positive gates, zero on dropped slots") {
    Rng rng(67);
    Tensor x = random_tensor(rng, {3, 4}, 1.0);
    Tensor mask = Tensor::full({3, 4}, 1.0);
    Tensor gate_v = Tensor::from_vector({4}, {0.9, 0.4, 1.0, 0.7});
    Tensor w = random_tensor(rng, {3, 4});
    Graph g;
    auto xn = g.leaf(x);
    auto gn = g.leaf(gate_v);
    auto out = g.gated_masked_softmax(xn, gn, mask, 1.0, -1);
    auto loss = g.sum(g.mul(out, g.constant(w)));
    g.backward(loss);
    auto fx = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            auto o = h.gated_masked_softmax(h.constant(t), h.constant(gate_v), mask, 1.0, -1);
            return h.value(h.sum(h.mul(o, h.constant(w)))).at(0);
        },
        x);
    auto fg = finite_difference(
        [&](const Tensor& t) {
            Graph h;
            auto o = h.gated_masked_softmax(h.constant(x), h.constant(t), mask, 1.0, -1);
            return h.value(h.sum(h.mul(o, h.constant(w)))).at(0);
        },
        gate_v);
    CHECK(max_rel_err(g.grad(xn), fx) < 1e-6);
    CHECK(max_rel_err(g.grad(gn), fg) < 1e-6);

    // dropped slot: no attention-path gradient by the STE wiring choice
    Tensor gate_drop = Tensor::from_vector({4}, {1.0, 0.0, 1.0, 1.0});
    Graph g2;
    auto xn2 = g2.constant(x);
    auto gn2 = g2.leaf(gate_drop);
    auto out2 = g2.gated_masked_softmax(xn2, gn2, mask, 1.0, -1);
    auto loss2 = g2.sum(g2.mul(out2, g2.constant(w)));
    g2.backward(loss2);
    CHECK(g2.grad(gn2).at(1) == 0.0);
    CHECK(g2.grad(gn2).at(0) != 0.0);
}

TEST_CASE("concat and slice round trips with gradients") {
    Rng rng(71);
    Tensor a = random_tensor(rng, {2, 3});
    Tensor b = random_tensor(rng, {2, 2});
    Graph g;
    auto an = g.leaf(a);
    auto bn = g.leaf(b);
    auto cat = g.concat_cols(an, bn);
    auto back = g.slice_cols(cat, 3, 2);
    auto loss = g.sum(back);
    g.backward(loss);
    CHECK(tensor_equal(g.grad(bn), Tensor::full({2, 2}, 1.0)));
    CHECK(tensor_equal(g.grad(an), Tensor::zeros({2, 3})));

    Tensor c = random_tensor(rng, {3, 3});
    Graph g2;
    auto cn = g2.leaf(c);
    auto rows = g2.concat_rows(g2.constant(a), cn);
    CHECK(g2.value(rows).rows() == 5);
    g2.backward(g2.sum(rows));
    CHECK(tensor_equal(g2.grad(cn), Tensor::full({3, 3}, 1.0)));
}
