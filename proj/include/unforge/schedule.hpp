#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unforge/errors.hpp"
#include "unforge/tensor.hpp"

namespace unforge {

using Timestep = int;  // 1-based, in [1, T]

// Forward-process coefficients. Arrays are stored 0-based for step t at
// index t-1 and kept in double; values are cast to f32 at tensor boundaries.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;      // 1 - beta_t
    std::vector<double> alpha_bar;  // running product of alpha
    std::vector<double> sigma;      // sqrt(beta_t) for t >= 2, 0 at t = 1

    double beta_at(Timestep t) const { return beta[check(t)]; }
    double alpha_at(Timestep t) const { return alpha[check(t)]; }
    double alpha_bar_at(Timestep t) const { return alpha_bar[check(t)]; }
    double sigma_at(Timestep t) const { return sigma[check(t)]; }

private:
    std::size_t check(Timestep t) const {
        if (t < 1 || t > T)
            throw UsageError("schedule: timestep " + std::to_string(t) + " outside [1," +
                             std::to_string(T) + "]");
        return static_cast<std::size_t>(t - 1);
    }
};

inline NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw ConfigError("schedule: T must be >= 1");
    if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0))
        throw ConfigError("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.beta.resize(T);
    s.alpha.resize(T);
    s.alpha_bar.resize(T);
    s.sigma.resize(T);
    double prod = 1.0;
    for (int t = 1; t <= T; ++t) {
        double frac = (T == 1) ? 0.0 : static_cast<double>(t - 1) / static_cast<double>(T - 1);
        double b = beta_start + frac * (beta_end - beta_start);
        s.beta[t - 1] = b;
        s.alpha[t - 1] = 1.0 - b;
        prod *= s.alpha[t - 1];
        s.alpha_bar[t - 1] = prod;
        s.sigma[t - 1] = (t == 1) ? 0.0 : std::sqrt(b);
    }
    return s;
}

// x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps
inline Tensor forward_diffuse(const Tensor& x0, Timestep t, const Tensor& eps,
                              const NoiseSchedule& sched) {
    if (!x0.same_shape(eps))
        throw UsageError("forward_diffuse: eps shape " + shape_str(eps) +
                         " does not match x0 shape " + shape_str(x0));
    double abar = sched.alpha_bar_at(t);
    float ca = static_cast<float>(std::sqrt(abar));
    float cb = static_cast<float>(std::sqrt(1.0 - abar));
    Tensor out(x0.shape);
    for (std::size_t i = 0; i < x0.numel(); ++i)
        out.data[i] = ca * x0.data[i] + cb * eps.data[i];
    return out;
}

// per-row timesteps for batched training
inline Tensor forward_diffuse_rows(const Tensor& x0, const std::vector<Timestep>& t,
                                   const Tensor& eps, const NoiseSchedule& sched) {
    if (!x0.same_shape(eps) || x0.rank() != 2 || t.size() != x0.rows())
        throw UsageError("forward_diffuse_rows: shape mismatch");
    Tensor out(x0.shape);
    std::size_t d = x0.cols();
    for (std::size_t i = 0; i < x0.rows(); ++i) {
        double abar = sched.alpha_bar_at(t[i]);
        float ca = static_cast<float>(std::sqrt(abar));
        float cb = static_cast<float>(std::sqrt(1.0 - abar));
        for (std::size_t j = 0; j < d; ++j) out(i, j) = ca * x0(i, j) + cb * eps(i, j);
    }
    return out;
}

struct ReverseCoefficients {
    double a;  // 1 / sqrt(alpha_t)
    double b;  // (1 - alpha_t) / sqrt(1 - abar_t)
    double s;  // sigma_t
};

// x_{t-1} = a (x_t - b eps_hat) + s z
inline ReverseCoefficients reverse_coefficients(Timestep t, const NoiseSchedule& sched) {
    double alpha = sched.alpha_at(t);
    double abar = sched.alpha_bar_at(t);
    ReverseCoefficients c;
    c.a = 1.0 / std::sqrt(alpha);
    c.b = (alpha == 1.0) ? 0.0 : (1.0 - alpha) / std::sqrt(1.0 - abar);
    c.s = sched.sigma_at(t);
    return c;
}

}  // namespace unforge
