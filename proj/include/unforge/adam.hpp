#pragma once

#include <cmath>
#include <vector>

#include "unforge/errors.hpp"
#include "unforge/param_store.hpp"
#include "unforge/tensor.hpp"

namespace unforge {

struct OptimConfig {
    float lr = 1e-3f;
    float beta1 = 0.9f;
    float beta2 = 0.999f;
    float eps_stab = 1e-8f;
    long step_count = 0;

    void validate() const {
        if (!(lr > 0)) throw ConfigError("optim: lr must be positive");
        if (!(beta1 > 0 && beta1 < 1)) throw ConfigError("optim: beta1 must be in (0,1)");
        if (!(beta2 > 0 && beta2 < 1)) throw ConfigError("optim: beta2 must be in (0,1)");
        if (!(eps_stab > 0)) throw ConfigError("optim: eps_stab must be positive");
        if (step_count < 0) throw ConfigError("optim: step_count must be nonnegative");
    }
};

// First/second moment buffers, one pair per param segment.
struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;

    static AdamState init(const ParamStore& params) {
        AdamState s;
        for (const auto& seg : params.segments) {
            s.m.push_back(Tensor::zeros(seg.value.shape));
            s.v.push_back(Tensor::zeros(seg.value.shape));
        }
        return s;
    }
};

// In-place Adam update with bias correction. Reads segment grads and leaves
// them untouched; the caller zeroes them.
inline void adam_step(ParamStore& params, OptimConfig& cfg, AdamState& state) {
    if (state.m.size() != params.segments.size())
        throw UsageError("adam_step: state does not match param store");
    long t = ++cfg.step_count;
    float bc1 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg.beta1), t));
    float bc2 = 1.0f - static_cast<float>(std::pow(static_cast<double>(cfg.beta2), t));
    for (std::size_t s = 0; s < params.segments.size(); ++s) {
        auto& seg = params.segments[s];
        if (seg.frozen) continue;
        auto& m = state.m[s];
        auto& v = state.v[s];
        if (!m.same_shape(seg.value) || !v.same_shape(seg.value))
            throw UsageError("adam_step: moment shape mismatch for segment '" + seg.name + "'");
        for (std::size_t i = 0; i < seg.value.numel(); ++i) {
            float g = seg.grad.data[i];
            m.data[i] = cfg.beta1 * m.data[i] + (1.0f - cfg.beta1) * g;
            v.data[i] = cfg.beta2 * v.data[i] + (1.0f - cfg.beta2) * g * g;
            float mhat = m.data[i] / bc1;
            float vhat = v.data[i] / bc2;
            seg.value.data[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps_stab);
        }
    }
}

}  // namespace unforge
