// Copyright 2026 the kvcat authors
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "core/optim.hpp"
#include "core/rng.hpp"
#include "core/tensor.hpp"
#include "testutil.hpp"

using namespace kvcat;

TEST_CASE("tensor invariants") {
    Tensor t({2, 3});
    CHECK(t.numel() == 6);
    CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
    CHECK_THROWS_AS(Tensor::from_vector({2, 2}, {1.0}), ShapeError);
    Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
    CHECK(a.at(1, 0) == 3.0);
    CHECK(tensor_checksum(a) != tensor_checksum(t));
}

TEST_CASE("adamw zero gradient keeps parameters, decay shrinks them") {
    Tensor p = Tensor::full({3}, 2.0);
    std::vector<Tensor*> params = {&p};
    std::vector<Tensor> grads = {Tensor::zeros({3})};
    AdamW opt;
    opt.init(params);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    opt.step(params, grads, cfg);
    CHECK(tensor_equal(p, Tensor::full({3}, 2.0)));

    cfg.weight_decay = 0.01;
    opt.step(params, grads, cfg);
    CHECK(p.at(0) == doctest::Approx(2.0 * (1.0 - 0.1 * 0.01)).epsilon(1e-15));
}

TEST_CASE("adamw single step matches a scalar hand trace") {
    // From m=v=0 with g=1: m_hat = 1, v_hat = 1, update = -lr / (1 + eps).
    Tensor p = Tensor::scalar(0.5);
    std::vector<Tensor*> params = {&p};
    std::vector<Tensor> grads = {Tensor::scalar(1.0)};
    AdamW opt;
    opt.init(params);
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.0;
    opt.step(params, grads, cfg);
    CHECK(p.at(0) == doctest::Approx(0.5 - 0.1 / (1.0 + 1e-8)).epsilon(1e-14));
}

TEST_CASE("clip_global_norm") {
    std::vector<Tensor> grads = {Tensor::full({4}, 0.25)};  // norm 0.5
    CHECK(clip_global_norm(grads, 1.0) == 1.0);
    CHECK(grads[0].at(0) == 0.25);

    std::vector<Tensor> big = {Tensor::full({4}, 1.0)};  // norm 2
    CHECK(clip_global_norm(big, 1.0) == doctest::Approx(0.5));
    CHECK(big[0].at(0) == doctest::Approx(0.5));

    Rng rng(5);
    std::vector<Tensor> rnd = {test::random_tensor(rng, {8, 8}, 3.0),
                               test::random_tensor(rng, {5}, 2.0)};
    clip_global_norm(rnd, 1.0);
    double sq = 0.0;
    for (const Tensor& g : rnd)
        for (int64_t i = 0; i < g.numel(); ++i) sq += g.at(i) * g.at(i);
    CHECK(std::sqrt(sq) <= 1.0 + 1e-12);

    CHECK_THROWS_AS(clip_global_norm(rnd, 0.0), ValueError);
}

TEST_CASE("rng determinism and subset sampling") {
    Rng a(123), b(123), c(124);
    CHECK(a.next_u64() == b.next_u64());
    CHECK(a.next_u64() != c.next_u64());

    Rng r(9);
    auto s = r.subset(8, 4);
    CHECK(s.size() == 4);
    for (size_t i = 1; i < s.size(); ++i) CHECK(s[i] > s[i - 1]);

    // frequency sanity over many draws
    std::vector<int> counts(8, 0);
    Rng r2(10);
    const int trials = 10000;
    for (int t = 0; t < trials; ++t)
        for (int64_t i : r2.subset(8, 4)) counts[static_cast<size_t>(i)]++;
    for (int v : counts) CHECK(std::abs(v / double(trials) - 0.5) < 0.02);
}
