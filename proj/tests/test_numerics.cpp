#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <cstring>

#include "test_util.hpp"
#include "unforge/adam.hpp"
#include "unforge/grad_check.hpp"
#include "unforge/graph.hpp"
#include "unforge/param_store.hpp"
#include "unforge/rng.hpp"

using namespace unforge;
using testutil::random_tensor;
using testutil::same_bytes;

TEST_CASE("mse of a tensor with itself is zero") {
    StreamRng rng(7, site_id("mse.self"));
    Graph g;
    auto v = random_tensor({4, 3}, rng);
    auto a = g.input(v);
    auto b = g.input(v);
    CHECK(g.value(g.mse(a, b)).data[0] == 0.0f);
}

TEST_CASE("affine with identity weight and zero bias is identity") {
    StreamRng rng(7, site_id("affine.id"));
    Graph g;
    Tensor w({3, 3});
    for (int i = 0; i < 3; ++i) w(i, i) = 1.0f;
    auto x = random_tensor({5, 3}, rng);
    auto id = g.affine(g.input(x), g.input(w), g.input(Tensor({3})));
    CHECK(same_bytes(g.value(id), x));
}

TEST_CASE("mse of unit basis vectors") {
    Graph g;
    auto a = g.input(Tensor::row({1.0f, 0.0f}));
    auto b = g.input(Tensor::row({0.0f, 1.0f}));
    CHECK(g.value(g.mse(a, b)).data[0] == 1.0f);
}

TEST_CASE("backward of squared scalar parameter") {
    ParamStore ps;
    ps.add("theta", Tensor::scalar(3.0f));
    Graph g;
    auto loss = g.mse(g.param(ps, "theta"), g.input(Tensor::scalar(0.0f)));
    g.backward(loss);
    CHECK(ps.at("theta").grad.data[0] == 6.0f);
}

TEST_CASE("gradient through a detach node is exactly zero") {
    ParamStore ps;
    StreamRng rng(3, site_id("detach.zero"));
    ps.add("w", random_tensor({4, 4}, rng));
    Graph g;
    auto w = g.param(ps, "w");
    auto frozen = g.detach(g.silu(w));
    auto loss = g.mse(frozen, g.input(Tensor::zeros({4, 4})));
    g.backward(loss);
    for (float v : ps.at("w").grad.data) CHECK(v == 0.0f);
}

TEST_CASE("random two-layer network matches finite differences") {
    StreamRng rng(11, site_id("net2.init"));
    ParamStore ps;
    ps.add("w1", random_tensor({6, 8}, rng, 0.5f));
    ps.add("b1", random_tensor({8}, rng, 0.1f));
    ps.add("w2", random_tensor({8, 1}, rng, 0.5f));
    ps.add("b2", random_tensor({1}, rng, 0.1f));
    Tensor x = random_tensor({5, 6}, rng);
    Tensor y = random_tensor({5, 1}, rng);

    auto build = [&](auto& g, auto& store) {
        using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
        auto xi = g.input(x.template cast<U>());
        auto h = g.silu(g.affine(xi, g.param(store, "w1"), g.param(store, "b1")));
        auto out = g.affine(h, g.param(store, "w2"), g.param(store, "b2"));
        return g.mse(out, g.input(y.template cast<U>()));
    };
    auto report = finite_diff_check(ps, build);
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("adam first step moves by roughly lr for unit-scale gradient") {
    ParamStore ps;
    ps.add("theta", Tensor::scalar(1.0f));
    ps.at("theta").grad.data[0] = 0.5f;
    OptimConfig cfg;
    cfg.lr = 0.1f;
    auto state = AdamState::init(ps);
    adam_step(ps, cfg, state);
    CHECK(std::abs(ps.at("theta").value.data[0] - (1.0f - 0.1f)) < 1e-6);
    CHECK(cfg.step_count == 1);
}

TEST_CASE("adam with zero gradients leaves parameters unchanged") {
    StreamRng rng(5, site_id("adam.zero"));
    ParamStore ps;
    ps.add("w", random_tensor({7, 3}, rng));
    ParamStore before = ps;
    OptimConfig cfg;
    auto state = AdamState::init(ps);
    for (int i = 0; i < 3; ++i) adam_step(ps, cfg, state);
    CHECK(same_bytes(ps, before));
}

static ParamStore run_small_training(std::uint64_t seed, int steps) {
    StreamRng init(seed, site_id("train.init"));
    ParamStore ps;
    ps.add("w", random_tensor({4, 4}, init, 0.3f));
    ps.add("b", random_tensor({4}, init, 0.1f));
    OptimConfig cfg;
    auto state = AdamState::init(ps);
    for (int s = 0; s < steps; ++s) {
        StreamRng rng(seed, site_id("train.step"), static_cast<std::uint64_t>(s));
        Tensor x = random_tensor({8, 4}, rng);
        Tensor y = random_tensor({8, 4}, rng);
        ps.zero_grads();
        Graph g;
        auto out = g.affine(g.input(x), g.param(ps, "w"), g.param(ps, "b"));
        auto loss = g.mse(out, g.input(y));
        g.backward(loss);
        adam_step(ps, cfg, state);
    }
    return ps;
}

TEST_CASE("identical seeds give bit-identical parameters after 100 steps") {
    auto a = run_small_training(42, 100);
    auto b = run_small_training(42, 100);
    CHECK(same_bytes(a, b));
}

TEST_CASE("zero_grads then backward equals backward alone") {
    StreamRng rng(9, site_id("zg"));
    ParamStore ps;
    ps.add("w", random_tensor({5, 5}, rng));
    Tensor x = random_tensor({3, 5}, rng);
    auto run = [&] {
        Graph g;
        auto out = g.matmul(g.input(x), g.param(ps, "w"));
        g.backward(g.mse(out, g.input(Tensor::zeros({3, 5}))));
        return ps.at("w").grad;
    };
    ps.zero_grads();
    Tensor fresh = run();
    // leave stale grads in place, then zero and rerun
    ps.zero_grads();
    Tensor again = run();
    CHECK(same_bytes(fresh, again));
}

TEST_CASE("finite_diff_check on a linear model with quadratic loss") {
    StreamRng rng(13, site_id("fd.linear"));
    ParamStore ps;
    ps.add("w", random_tensor({4, 2}, rng));
    ps.add("b", random_tensor({2}, rng));
    Tensor x = random_tensor({6, 4}, rng);
    Tensor y = random_tensor({6, 2}, rng);
    auto report = finite_diff_check(ps, [&](auto& g, auto& store) {
        using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
        auto out = g.affine(g.input(x.template cast<U>()), g.param(store, "w"),
                            g.param(store, "b"));
        return g.mse(out, g.input(y.template cast<U>()));
    });
    CHECK(report.max_rel_err < 1e-6);
}

TEST_CASE("finite_diff_check on a three-layer silu network with ~500 params") {
    StreamRng rng(17, site_id("fd.silu3"));
    ParamStore ps;
    ps.add("w1", random_tensor({4, 16}, rng, 0.5f));
    ps.add("b1", random_tensor({16}, rng, 0.1f));
    ps.add("w2", random_tensor({16, 16}, rng, 0.4f));
    ps.add("b2", random_tensor({16}, rng, 0.1f));
    ps.add("w3", random_tensor({16, 16}, rng, 0.4f));
    ps.add("b3", random_tensor({16}, rng, 0.1f));
    ps.add("w4", random_tensor({16, 1}, rng, 0.4f));
    ps.add("b4", random_tensor({1}, rng, 0.1f));
    REQUIRE(ps.param_count() >= 500);
    Tensor x = random_tensor({7, 4}, rng);
    Tensor y = random_tensor({7, 1}, rng);
    auto report = finite_diff_check(ps, [&](auto& g, auto& store) {
        using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
        auto h1 = g.silu(g.affine(g.input(x.template cast<U>()), g.param(store, "w1"),
                                  g.param(store, "b1")));
        auto h2 = g.silu(g.affine(h1, g.param(store, "w2"), g.param(store, "b2")));
        auto h3 = g.silu(g.affine(h2, g.param(store, "w3"), g.param(store, "b3")));
        auto out = g.affine(h3, g.param(store, "w4"), g.param(store, "b4"));
        return g.mse(out, g.input(y.template cast<U>()));
    });
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("finite_diff_check holds detached branches constant") {
    StreamRng rng(19, site_id("fd.detach"));
    ParamStore ps;
    ps.add("w", random_tensor({4, 4}, rng, 0.5f));
    ps.add("b", random_tensor({4}, rng, 0.1f));
    Tensor x = random_tensor({5, 4}, rng);
    auto report = finite_diff_check(ps, [&](auto& g, auto& store) {
        using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
        auto xi = g.input(x.template cast<U>());
        auto live = g.silu(g.affine(xi, g.param(store, "w"), g.param(store, "b")));
        // target depends on the same params but is treated as a constant
        auto target = g.detach(g.affine(xi, g.param(store, "w"), g.param(store, "b")));
        return g.mse(live, target);
    });
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("every operator passes randomized gradient checks") {
    int trials_per_op = 12;
    for (int trial = 0; trial < trials_per_op; ++trial) {
        StreamRng rng(100 + trial, site_id("opsweep"));
        Tensor x = random_tensor({3, 4}, rng);
        Tensor y = random_tensor({3, 4}, rng);
        Tensor y2 = random_tensor({3, 2}, rng);
        std::vector<int> emb_idx = {static_cast<int>(rng.uniform_int(5)),
                                    static_cast<int>(rng.uniform_int(5)),
                                    static_cast<int>(rng.uniform_int(5))};
        std::vector<int> labels = {static_cast<int>(rng.uniform_int(4)),
                                   static_cast<int>(rng.uniform_int(4)),
                                   static_cast<int>(rng.uniform_int(4))};

        ParamStore ps;
        ps.add("a", random_tensor({3, 4}, rng, 0.6f));
        ps.add("m", random_tensor({4, 2}, rng, 0.6f));
        ps.add("bias", random_tensor({2}, rng, 0.2f));
        ps.add("table", random_tensor({5, 4}, rng, 0.6f));

        auto make_builder = [&](int tag) {
            return [&, tag](auto& g, auto& store) -> int {
                using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
                auto a = g.param(store, "a");
                auto xin = g.input(x.template cast<U>());
                auto yin = g.input(y.template cast<U>());
                switch (tag) {
                    case 0: return g.mse(g.add(a, xin), yin);
                    case 1: return g.mse(g.mul(a, xin), yin);
                    case 2: return g.mse(g.relu(a), yin);
                    case 3: return g.mse(g.silu(a), yin);
                    case 4: return g.mse(g.sine(a), yin);
                    case 5: return g.mse(g.cosine(a), yin);
                    case 6: return g.mse(g.scale(a, 1.7), yin);
                    case 7:
                        return g.mse(g.matmul(a, g.param(store, "m")),
                                     g.input(y2.template cast<U>()));
                    case 8:
                        return g.mse(g.affine(a, g.param(store, "m"), g.param(store, "bias")),
                                     g.input(y2.template cast<U>()));
                    case 9: {
                        auto c = g.concat({a, g.silu(a)});
                        Tensor wide({3, 8});
                        return g.mse(c, g.input(wide.template cast<U>()));
                    }
                    case 10: {
                        auto e = g.embed(g.param(store, "table"), emb_idx);
                        Tensor t3({3, 4});
                        return g.mse(e, g.input(t3.template cast<U>()));
                    }
                    case 11: {
                        auto d = g.detach(g.silu(a));
                        return g.mse(g.mul(a, xin), g.add(d, yin));
                    }
                    default: return g.cross_entropy(a, labels);
                }
            };
        };
        for (int tag = 0; tag <= 12; ++tag) {
            auto report = finite_diff_check(ps, make_builder(tag));
            INFO("trial " << trial << " op tag " << tag);
            CHECK(report.max_rel_err < 1e-4);
        }
    }
}

TEST_CASE("f32 gradients track the f64 instantiation") {
    StreamRng rng(23, site_id("f32.vs.f64"));
    ParamStore ps;
    ps.add("w1", random_tensor({4, 8}, rng, 0.5f));
    ps.add("b1", random_tensor({8}, rng, 0.1f));
    ps.add("w2", random_tensor({8, 2}, rng, 0.5f));
    Tensor x = random_tensor({6, 4}, rng);
    Tensor y = random_tensor({6, 2}, rng);
    auto build = [&](auto& g, auto& store) {
        using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
        auto h = g.silu(g.affine(g.input(x.template cast<U>()), g.param(store, "w1"),
                                 g.param(store, "b1")));
        auto out = g.matmul(h, g.param(store, "w2"));
        return g.mse(out, g.input(y.template cast<U>()));
    };
    ps.zero_grads();
    {
        Graph g;
        g.backward(build(g, ps));
    }
    auto pd = ps.cast<double>();
    {
        GraphT<double> g;
        g.backward(build(g, pd));
    }
    for (std::size_t s = 0; s < ps.segments.size(); ++s)
        for (std::size_t i = 0; i < ps.segments[s].grad.numel(); ++i) {
            double a = ps.segments[s].grad.data[i];
            double b = pd.segments[s].grad.data[i];
            CHECK(std::abs(a - b) < 2e-3 * std::max({std::abs(a), std::abs(b), 1.0}));
        }
}

TEST_CASE("shape mismatch reports the offending node") {
    Graph g;
    auto a = g.input(Tensor::zeros({2, 3}));
    auto b = g.input(Tensor::zeros({2, 4}));
    CHECK_THROWS_AS(g.add(a, b), GraphError);
    CHECK_THROWS_WITH(g.add(a, b), Catch::Matchers::ContainsSubstring("add"));
}

TEST_CASE("non-finite intermediate raises a numeric error naming the node") {
    Graph g;
    auto a = g.input(Tensor::scalar(1e38f));
    CHECK_THROWS_AS(g.scale(g.scale(a, 1e10), 1e10), NumericError);
}

TEST_CASE("backward rejects a non-scalar root") {
    ParamStore ps;
    ps.add("w", Tensor::zeros({2, 2}));
    Graph g;
    auto w = g.param(ps, "w");
    CHECK_THROWS_AS(g.backward(w), GraphError);
}

TEST_CASE("cross entropy matches a hand-computed value") {
    Graph g;
    Tensor logits({2, 3}, {1.0f, 0.0f, 0.0f, 0.0f, 2.0f, 0.0f});
    auto ce = g.cross_entropy(g.input(logits), {0, 1});
    double l0 = std::log(std::exp(1.0) + 2.0) - 1.0;
    double l1 = std::log(std::exp(2.0) + 2.0) - 2.0;
    CHECK(std::abs(g.value(ce).data[0] - 0.5 * (l0 + l1)) < 1e-6);
}
