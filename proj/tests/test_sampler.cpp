#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_util.hpp"
#include "unforge/sampler.hpp"

using namespace unforge;
using testutil::same_bytes;

namespace {

EpsNetArch tiny_arch() {
    EpsNetArch a;
    a.dim = 2;
    a.class_count = 3;
    a.hidden_width = 12;
    a.depth = 1;
    a.time_embed_dim = 6;
    a.time_horizon = 8;
    return a;
}

// all-zero weights: predicts zero regardless of input
EpsilonNet zero_net() {
    auto net = init_net(tiny_arch(), 1);
    for (auto& seg : net.params.segments) seg.value.fill(0.0f);
    return net;
}

// zero weights except the output bias: predicts a constant
EpsilonNet constant_net(float e0, float e1) {
    auto net = zero_net();
    net.params.at("out.b").value.data = {e0, e1};
    return net;
}

}  // namespace

TEST_CASE("with zero predicted noise and zero sigma a step is a pure rescale") {
    auto net = zero_net();
    auto sched = make_linear_schedule(8, 1e-2, 0.3);
    SamplerConfig cfg;
    cfg.cfg_scale = 1.0f;
    Tensor x({3, 2}, {1.0f, -2.0f, 0.5f, 0.25f, -1.0f, 3.0f});
    Tensor z = Tensor::zeros({3, 2});
    Tensor out = reverse_step_batch(net, x, 1, 0, sched, cfg, z);  // sigma_1 = 0
    float a = static_cast<float>(reverse_coefficients(1, sched).a);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(out.data[i] == a * x.data[i]);
}

TEST_CASE("a single-step chain with the true noise as prediction inverts the forward map") {
    auto sched = make_linear_schedule(1, 0.13, 0.13);
    Tensor eps({2}, {0.7f, -1.1f});
    auto net = constant_net(eps.data[0], eps.data[1]);
    net.arch.time_horizon = 1;
    Tensor x0({2}, {2.0f, -0.5f});
    Tensor x1 = forward_diffuse(x0, 1, eps, sched);
    SamplerConfig cfg;
    cfg.cfg_scale = 1.0f;
    StreamRng rng(3, site_id("s.inv"));
    Tensor rec = reverse_step(net, x1, 1, 0, sched, cfg, rng);
    for (int j = 0; j < 2; ++j)
        CHECK(std::abs(rec.data[j] - x0.data[j]) <= 4e-6f * std::max(1.0f, std::abs(x0.data[j])));
}

TEST_CASE("generation is deterministic in the seed") {
    auto net = init_net(tiny_arch(), 5);
    auto sched = make_linear_schedule(8, 1e-2, 0.3);
    SamplerConfig cfg;
    cfg.cfg_scale = 2.0f;
    cfg.seed = 7;
    auto a = generate(net, 6, 1, sched, cfg);
    auto b = generate(net, 6, 1, sched, cfg);
    CHECK(same_bytes(a, b));
    cfg.seed = 8;
    CHECK(!same_bytes(a, generate(net, 6, 1, sched, cfg)));
}

TEST_CASE("zero requested samples give an empty batch") {
    auto net = init_net(tiny_arch(), 5);
    auto sched = make_linear_schedule(8, 1e-2, 0.3);
    SamplerConfig cfg;
    CHECK(generate(net, 0, 1, sched, cfg).rows() == 0);
}

TEST_CASE("with guidance scale zero samples do not depend on the condition") {
    auto net = init_net(tiny_arch(), 9);
    auto sched = make_linear_schedule(8, 1e-2, 0.3);
    SamplerConfig cfg;
    cfg.cfg_scale = 0.0f;
    cfg.seed = 11;
    auto a = generate(net, 5, 0, sched, cfg);
    auto b = generate(net, 5, 2, sched, cfg);
    CHECK(same_bytes(a, b));
}

TEST_CASE("trajectories are independent of batch grouping") {
    auto net = init_net(tiny_arch(), 13);
    auto sched = make_linear_schedule(8, 1e-2, 0.3);
    SamplerConfig cfg;
    cfg.cfg_scale = 1.5f;
    cfg.seed = 21;
    auto five = generate(net, 5, 1, sched, cfg);
    auto three = generate(net, 3, 1, sched, cfg);
    for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 2; ++j) CHECK(five(i, j) == three(i, j));
}

TEST_CASE("outputs of an untrained net remain finite") {
    auto net = init_net(tiny_arch(), 17);
    auto sched = make_linear_schedule(8, 1e-2, 0.3);
    SamplerConfig cfg;
    cfg.cfg_scale = 3.0f;
    CHECK(generate(net, 20, 2, sched, cfg).all_finite());
}

TEST_CASE("sample dump format") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "unforge_test_sampler";
    fs::create_directories(dir);
    Tensor s({2, 2}, {0.5f, 1.0f, -1.0f, 2.0f});
    write_samples_csv(dir / "s.csv", s, 1);
    std::ifstream in(dir / "s.csv");
    std::string line;
    std::getline(in, line);
    CHECK(line == "sample_id,x1,x2,condition");
    std::getline(in, line);
    CHECK(line == "0,0.5,1,1");
    fs::remove_all(dir);
}
