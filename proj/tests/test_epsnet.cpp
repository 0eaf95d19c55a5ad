#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_util.hpp"
#include "unforge/adam.hpp"
#include "unforge/epsnet.hpp"
#include "unforge/grad_check.hpp"

using namespace unforge;
using testutil::random_tensor;
using testutil::same_bytes;

namespace {

EpsNetArch small_arch() {
    EpsNetArch a;
    a.dim = 2;
    a.class_count = 3;
    a.hidden_width = 16;
    a.depth = 2;
    a.time_embed_dim = 8;
    a.time_horizon = 20;
    return a;
}

}  // namespace

TEST_CASE("init is deterministic in the seed") {
    auto a = init_net(small_arch(), 77);
    auto b = init_net(small_arch(), 77);
    auto c = init_net(small_arch(), 78);
    CHECK(same_bytes(a.params, b.params));
    CHECK(!same_bytes(a.params, c.params));
}

TEST_CASE("parameter count matches the closed form") {
    auto arch = small_arch();
    auto net = init_net(arch, 1);
    CHECK(net.params.param_count() == arch.param_count());

    EpsNetArch big;
    CHECK(init_net(big, 2).params.param_count() == big.param_count());
}

TEST_CASE("fresh net output is finite for random input") {
    auto net = init_net(small_arch(), 3);
    StreamRng rng(4, site_id("epsnet.t"));
    Tensor x = random_tensor({5, 2}, rng, 2.0f);
    Tensor out = predict_batch(net, x, {1, 5, 10, 15, 20}, {0, 1, 2, 3, 0});
    CHECK(out.all_finite());
    CHECK(out.rows() == 5);
    CHECK(out.cols() == 2);
}

TEST_CASE("prediction is pure") {
    auto net = init_net(small_arch(), 5);
    Tensor x({2}, {0.3f, -0.7f});
    Tensor a = predict_eps(net, x, 7, 1);
    Tensor b = predict_eps(net, x, 7, 1);
    CHECK(same_bytes(a, b));
}

TEST_CASE("the null condition reads the dedicated table row") {
    auto arch = small_arch();
    auto net = init_net(arch, 6);
    auto mutated = net;
    auto& table = mutated.params.at("cond_table").value;
    for (std::size_t j = 0; j < table.cols(); ++j)
        table(static_cast<std::size_t>(arch.class_count), j) += 1.0f;
    Tensor x({2}, {0.1f, 0.2f});
    CHECK(!same_bytes(predict_eps(net, x, 3, null_condition(arch.class_count)),
                      predict_eps(mutated, x, 3, null_condition(arch.class_count))));
    for (int c = 0; c < arch.class_count; ++c)
        CHECK(same_bytes(predict_eps(net, x, 3, c), predict_eps(mutated, x, 3, c)));
}

TEST_CASE("condition id outside the table is rejected") {
    auto net = init_net(small_arch(), 6);
    Tensor x({2}, {0.1f, 0.2f});
    CHECK_THROWS_AS(predict_eps(net, x, 3, 4), UsageError);
    CHECK_THROWS_AS(predict_eps(net, x, 3, -1), UsageError);
}

TEST_CASE("prediction loss gradient passes the finite difference check") {
    auto arch = small_arch();
    auto net = init_net(arch, 9);
    StreamRng rng(10, site_id("epsnet.fd"));
    Tensor x = random_tensor({4, 2}, rng);
    Tensor eps = random_tensor({4, 2}, rng);
    std::vector<Timestep> t = {1, 4, 9, 20};
    std::vector<int> cond = {0, 1, 2, 3};
    auto report = finite_diff_check(net.params, [&](auto& g, auto& store) {
        using U = std::decay_t<decltype(store.segments[0].value.data[0])>;
        auto pred = graph_predict(g, store, arch, x.template cast<U>(), t, cond);
        return g.mse(pred, g.input(eps.template cast<U>()));
    });
    CHECK(report.max_rel_err < 1e-4);
}

TEST_CASE("taped and no-grad forward paths agree bit for bit") {
    auto arch = small_arch();
    auto net = init_net(arch, 12);
    StreamRng rng(13, site_id("epsnet.paths"));
    Tensor x = random_tensor({6, 2}, rng);
    std::vector<Timestep> t = {2, 3, 5, 8, 13, 20};
    std::vector<int> cond = {0, 1, 2, 3, 1, 0};
    Graph g;
    auto id = graph_predict(g, net.params, arch, x, t, cond);
    CHECK(same_bytes(g.value(id), predict_batch(net, x, t, cond)));
}

TEST_CASE("guidance scale one returns the conditional prediction exactly") {
    auto net = init_net(small_arch(), 15);
    Tensor x({2}, {0.4f, -0.2f});
    SamplerConfig cfg;
    cfg.cfg_scale = 1.0f;
    CHECK(same_bytes(cfg_predict(net, x, 5, 2, cfg), predict_eps(net, x, 5, 2)));
}

TEST_CASE("null condition ignores the guidance scale") {
    auto net = init_net(small_arch(), 16);
    Tensor x({2}, {0.4f, -0.2f});
    Tensor uncond = predict_eps(net, x, 5, null_condition(3));
    for (float beta : {0.0f, 0.7f, 3.0f}) {
        SamplerConfig cfg;
        cfg.cfg_scale = beta;
        CHECK(same_bytes(cfg_predict(net, x, 5, null_condition(3), cfg), uncond));
    }
}

TEST_CASE("guidance arithmetic on stubbed predictions") {
    Tensor uncond({2}, {0.0f, 0.0f});
    Tensor cond({2}, {1.0f, 1.0f});
    Tensor out = cfg_combine(uncond, cond, 2.0f);
    CHECK(out.data[0] == 2.0f);
    CHECK(out.data[1] == 2.0f);
}

TEST_CASE("guided prediction is affine in the scale") {
    auto net = init_net(small_arch(), 18);
    Tensor x({2}, {0.9f, 0.1f});
    auto at = [&](float beta) {
        SamplerConfig cfg;
        cfg.cfg_scale = beta;
        return cfg_predict(net, x, 4, 1, cfg);
    };
    Tensor y0 = at(0.5f), y1 = at(2.0f), y2 = at(3.5f);
    for (std::size_t i = 0; i < 2; ++i) {
        float slope_a = (y1.data[i] - y0.data[i]) / 1.5f;
        float slope_b = (y2.data[i] - y1.data[i]) / 1.5f;
        CHECK(std::abs(slope_a - slope_b) < 1e-5f);
    }
}

TEST_CASE("a net trained on a point mass approaches the analytic noise map") {
    EpsNetArch arch;
    arch.dim = 2;
    arch.class_count = 3;
    arch.hidden_width = 96;
    arch.depth = 3;
    arch.time_embed_dim = 16;
    arch.time_horizon = 100;
    auto net = init_net(arch, 21);
    auto sched = make_linear_schedule(100, 1e-3, 0.2);
    Tensor xstar({1, 2}, {1.5f, -0.5f});
    const int cond_id = 1;
    const int batch = 128;

    OptimConfig opt;
    opt.lr = 1e-3f;
    auto state = AdamState::init(net.params);
    for (int step = 0; step < 3000; ++step) {
        StreamRng rng(99, site_id("pointmass.step"), static_cast<std::uint64_t>(step));
        Tensor x0({batch, 2});
        Tensor eps({batch, 2});
        std::vector<Timestep> ts(batch);
        std::vector<int> cond(batch, cond_id);
        for (int i = 0; i < batch; ++i) {
            x0(i, 0) = xstar.data[0];
            x0(i, 1) = xstar.data[1];
            ts[static_cast<std::size_t>(i)] = 1 + static_cast<Timestep>(rng.uniform_int(100));
            eps(i, 0) = rng.normal();
            eps(i, 1) = rng.normal();
        }
        Tensor xt = forward_diffuse_rows(x0, ts, eps, sched);
        net.params.zero_grads();
        Graph g;
        auto pred = graph_predict(g, net.params, arch, xt, ts, cond);
        auto loss = g.scale(g.mse(pred, g.input(eps)), 2.0);
        g.backward(loss);
        adam_step(net.params, opt, state);
    }

    StreamRng rng(100, site_id("pointmass.eval"));
    double total = 0;
    const int evals = 400;
    for (int i = 0; i < evals; ++i) {
        Timestep t = 1 + static_cast<Timestep>(rng.uniform_int(100));
        Tensor eps({2}, {rng.normal(), rng.normal()});
        Tensor xt_eval = forward_diffuse(Tensor({2}, {xstar.data[0], xstar.data[1]}), t, eps, sched);
        Tensor pred = predict_eps(net, xt_eval, t, cond_id);
        double abar = sched.alpha_bar_at(t);
        double dx = 0;
        for (int j = 0; j < 2; ++j) {
            double want = (xt_eval.data[j] - std::sqrt(abar) * xstar.data[j]) / std::sqrt(1 - abar);
            double diff = pred.data[j] - want;
            dx += diff * diff;
        }
        total += std::sqrt(dx);
    }
    INFO("mean L2 gap " << total / evals);
    CHECK(total / evals <= 0.05);
}
