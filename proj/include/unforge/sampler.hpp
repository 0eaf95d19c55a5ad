#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "unforge/epsnet.hpp"
#include "unforge/losses.hpp"
#include "unforge/rng.hpp"
#include "unforge/schedule.hpp"

namespace unforge {

// One reverse step over a batch sharing condition c:
//   x_{t-1} = (1/sqrt(a_t)) (x_t - ((1-a_t)/sqrt(1-abar_t)) eps_hat) + sigma_t z
// z must be zero at t = 1 (and sigma_1 is zero by construction).
inline Tensor reverse_step_batch(const EpsilonNet& net, const Tensor& x_t, Timestep t,
                                 ConditionId c, const NoiseSchedule& sched,
                                 const SamplerConfig& cfg, const Tensor& z) {
    if (!x_t.same_shape(z)) throw UsageError("reverse_step: z shape mismatch");
    std::vector<Timestep> ts(x_t.rows(), t);
    Tensor eps_hat = cfg_predict_batch(net, x_t, ts, c, cfg);
    auto coef = reverse_coefficients(t, sched);
    float a = static_cast<float>(coef.a);
    float b = static_cast<float>(coef.b);
    float s = (t == 1) ? 0.0f : static_cast<float>(coef.s);
    Tensor out(x_t.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = a * (x_t.data[i] - b * eps_hat.data[i]) + s * z.data[i];
    return out;
}

// single-sample form drawing z from the given stream
inline Tensor reverse_step(const EpsilonNet& net, const Tensor& x_hat_t, Timestep t,
                           ConditionId c, const NoiseSchedule& sched, const SamplerConfig& cfg,
                           StreamRng& rng) {
    Tensor row({1, x_hat_t.numel()}, x_hat_t.data);
    Tensor z({1, x_hat_t.numel()});
    if (t > 1)
        for (auto& v : z.data) v = rng.normal();
    Tensor out = reverse_step_batch(net, row, t, c, sched, cfg, z);
    std::size_t n = out.numel();
    return Tensor({n}, std::move(out.data));
}

// count trajectories from pure noise through T reverse steps. Every
// trajectory draws from its own stream indexed by trajectory id, so results
// do not depend on how the batch is grouped.
inline Tensor generate(const EpsilonNet& net, std::size_t count, ConditionId c,
                       const NoiseSchedule& sched, const SamplerConfig& cfg) {
    cfg.validate();
    std::size_t d = static_cast<std::size_t>(net.arch.dim);
    Tensor x({count, d});
    if (count == 0) return x;
    std::vector<StreamRng> streams;
    streams.reserve(count);
    for (std::size_t i = 0; i < count; ++i)
        streams.emplace_back(cfg.seed, site_id("sampler.traj"), static_cast<std::uint64_t>(i));
    for (std::size_t i = 0; i < count; ++i)
        for (std::size_t j = 0; j < d; ++j) x(i, j) = streams[i].normal();
    Tensor z({count, d});
    for (Timestep t = sched.T; t >= 1; --t) {
        if (t > 1) {
            for (std::size_t i = 0; i < count; ++i)
                for (std::size_t j = 0; j < d; ++j) z(i, j) = streams[i].normal();
        } else {
            z.fill(0.0f);
        }
        x = reverse_step_batch(net, x, t, c, sched, cfg, z);
        if (cfg.sample_clip > 0.0f)
            for (auto& v : x.data)
                v = std::min(cfg.sample_clip, std::max(-cfg.sample_clip, v));
    }
    if (!x.all_finite()) throw NumericError("generate: non-finite samples");
    return x;
}

inline void write_samples_csv(const std::filesystem::path& path, const Tensor& samples,
                              ConditionId c) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "sample_id";
    for (std::size_t j = 0; j < samples.cols(); ++j) out << ",x" << (j + 1);
    out << ",condition\n";
    for (std::size_t i = 0; i < samples.rows(); ++i) {
        out << i;
        for (std::size_t j = 0; j < samples.cols(); ++j) out << "," << format_g9(samples(i, j));
        out << "," << c << "\n";
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace unforge
