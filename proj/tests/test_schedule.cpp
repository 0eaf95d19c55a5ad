#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "test_util.hpp"
#include "unforge/rng.hpp"
#include "unforge/schedule.hpp"

using namespace unforge;
using testutil::random_tensor;

TEST_CASE("single-step schedule") {
    auto s = make_linear_schedule(1, 0.3, 0.7);
    CHECK(s.beta_at(1) == 0.3);
    CHECK(s.alpha_bar_at(1) == 0.7);
    CHECK(s.sigma_at(1) == 0.0);
}

TEST_CASE("four-step linear interpolation") {
    auto s = make_linear_schedule(4, 1e-4, 0.02);
    double step = (0.02 - 1e-4) / 3.0;
    CHECK(s.beta_at(1) == Catch::Approx(1e-4).epsilon(1e-12));
    CHECK(s.beta_at(2) == Catch::Approx(1e-4 + step).epsilon(1e-12));
    CHECK(s.beta_at(3) == Catch::Approx(1e-4 + 2 * step).epsilon(1e-12));
    CHECK(s.beta_at(4) == Catch::Approx(0.02).epsilon(1e-12));
}

TEST_CASE("alpha_bar is the exact running product and strictly decreasing") {
    auto s = make_linear_schedule(100, 1e-3, 0.2);
    double prod = 1.0;
    for (int t = 1; t <= 100; ++t) {
        prod *= s.alpha_at(t);
        CHECK(s.alpha_bar_at(t) == prod);
        if (t > 1) CHECK(s.alpha_bar_at(t) < s.alpha_bar_at(t - 1));
    }
    CHECK(s.alpha_bar_at(100) > 0.0);
    CHECK(s.alpha_bar_at(1) < 1.0);
}

TEST_CASE("schedule rejects out-of-range construction parameters") {
    CHECK_THROWS_AS(make_linear_schedule(0, 1e-4, 0.02), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.0, 0.02), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.03, 0.02), ConfigError);
    CHECK_THROWS_AS(make_linear_schedule(10, 0.5, 1.0), ConfigError);
}

TEST_CASE("forward diffusion with zero noise scales by sqrt(alpha_bar)") {
    auto s = make_linear_schedule(10, 1e-2, 0.2);
    StreamRng rng(3, site_id("fd.zero"));
    Tensor x0 = random_tensor({4}, rng);
    Tensor eps = Tensor::zeros({4});
    Tensor xt = forward_diffuse(x0, 5, eps, s);
    float c = static_cast<float>(std::sqrt(s.alpha_bar_at(5)));
    for (std::size_t i = 0; i < 4; ++i) CHECK(xt.data[i] == c * x0.data[i]);
}

TEST_CASE("forward diffusion arithmetic at alpha_bar 0.25") {
    // T=1 with beta 0.75 gives alpha_bar_1 = 0.25
    auto s = make_linear_schedule(1, 0.75, 0.75);
    Tensor x0({2}, {1.0f, 0.0f});
    Tensor eps({2}, {0.0f, 1.0f});
    Tensor xt = forward_diffuse(x0, 1, eps, s);
    CHECK(xt.data[0] == Catch::Approx(0.5).margin(1e-7));
    CHECK(xt.data[1] == Catch::Approx(std::sqrt(0.75)).margin(1e-7));
}

TEST_CASE("at the last step of a saturating schedule the output is mostly noise") {
    auto s = make_linear_schedule(100, 1e-3, 0.2);
    REQUIRE(s.alpha_bar_at(100) < 1e-4);
    StreamRng rng(5, site_id("fd.sat"));
    Tensor x0 = random_tensor({8}, rng, 3.0f);
    Tensor eps = random_tensor({8}, rng);
    Tensor xt = forward_diffuse(x0, 100, eps, s);
    for (std::size_t i = 0; i < 8; ++i) CHECK(std::abs(xt.data[i] - eps.data[i]) < 0.05);
}

TEST_CASE("forward diffusion rejects out-of-range timesteps") {
    auto s = make_linear_schedule(10, 1e-2, 0.2);
    Tensor x = Tensor::zeros({2});
    CHECK_THROWS_AS(forward_diffuse(x, 0, x, s), UsageError);
    CHECK_THROWS_AS(forward_diffuse(x, 11, x, s), UsageError);
}

TEST_CASE("reverse coefficients at a degenerate no-noise step") {
    NoiseSchedule s;
    s.T = 1;
    s.beta = {0.0};
    s.alpha = {1.0};
    s.alpha_bar = {1.0};
    s.sigma = {0.0};
    auto c = reverse_coefficients(1, s);
    CHECK(c.a == 1.0);
    CHECK(c.b == 0.0);
}

TEST_CASE("reverse coefficients hand arithmetic") {
    NoiseSchedule s;
    s.T = 1;
    s.beta = {0.01};
    s.alpha = {0.99};
    s.alpha_bar = {0.5};
    s.sigma = {0.1};
    auto c = reverse_coefficients(1, s);
    CHECK(c.a == Catch::Approx(1.0050378152592121).epsilon(1e-12));
    CHECK(c.b == Catch::Approx(0.014142135623730951).epsilon(1e-12));
    CHECK(c.s == 0.1);
}

TEST_CASE("sigma is zero at the first step by construction") {
    auto s = make_linear_schedule(50, 1e-3, 0.3);
    CHECK(reverse_coefficients(1, s).s == 0.0);
    CHECK(reverse_coefficients(2, s).s > 0.0);
}

TEST_CASE("one-step round trip recovers the clean input to f32 precision") {
    auto s = make_linear_schedule(1, 0.13, 0.13);
    StreamRng rng(7, site_id("roundtrip"));
    Tensor x0 = random_tensor({6}, rng, 2.0f);
    Tensor eps = random_tensor({6}, rng);
    Tensor x1 = forward_diffuse(x0, 1, eps, s);
    auto c = reverse_coefficients(1, s);
    for (std::size_t i = 0; i < 6; ++i) {
        float rec = static_cast<float>(c.a) *
                    (x1.data[i] - static_cast<float>(c.b) * eps.data[i]);
        CHECK(std::abs(rec - x0.data[i]) <= 4e-6f * std::max(1.0f, std::abs(x0.data[i])));
    }
}

TEST_CASE("row-wise forward diffusion matches the single-step form") {
    auto s = make_linear_schedule(20, 1e-3, 0.2);
    StreamRng rng(9, site_id("fd.rows"));
    Tensor x0 = random_tensor({3, 2}, rng);
    Tensor eps = random_tensor({3, 2}, rng);
    std::vector<Timestep> ts = {1, 7, 20};
    Tensor xt = forward_diffuse_rows(x0, ts, eps, s);
    for (std::size_t r = 0; r < 3; ++r) {
        Tensor row({1, 2}, {x0(r, 0), x0(r, 1)});
        Tensor erow({1, 2}, {eps(r, 0), eps(r, 1)});
        Tensor want = forward_diffuse(row, ts[r], erow, s);
        CHECK(xt(r, 0) == want.data[0]);
        CHECK(xt(r, 1) == want.data[1]);
    }
}
