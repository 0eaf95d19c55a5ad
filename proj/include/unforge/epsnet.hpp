#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "unforge/data.hpp"
#include "unforge/errors.hpp"
#include "unforge/graph.hpp"
#include "unforge/param_store.hpp"
#include "unforge/rng.hpp"
#include "unforge/schedule.hpp"

namespace unforge {

// The condition embedding is added to the projected time embedding rather
// than concatenated: timesteps sweep a dense cloud through the shared
// embedding slot, so the downstream layers learn one smooth function over it
// and conditions stay coupled through shared weights.
struct EpsNetArch {
    int dim = 2;             // data dimension d
    int class_count = 3;     // C; condition ids live in [0, C] with C = null
    int hidden_width = 128;  // W
    int depth = 3;           // hidden affine+SiLU layers after the input projection
    int time_embed_dim = 32;  // sin/cos feature count, even; also the condition width
    double cond_spacing = 2.0;  // encoding distance between adjacent condition ids
    int time_horizon = 100;  // frequency range matches timesteps in [1, horizon]

    void validate() const {
        if (dim < 1 || class_count < 2 || hidden_width < 1 || depth < 1)
            throw ConfigError("arch: dim, class_count, hidden_width, depth must be positive");
        if (time_embed_dim < 2 || time_embed_dim % 2 != 0)
            throw ConfigError("arch: time_embed_dim must be even and >= 2");
        if (time_horizon < 1) throw ConfigError("arch: time_horizon must be >= 1");
        if (!(cond_spacing > 0)) throw ConfigError("arch: cond_spacing must be > 0");
    }

    int cond_embed_dim() const { return time_embed_dim; }

    int concat_dim() const { return dim + time_embed_dim; }

    std::size_t param_count() const {
        std::size_t dt = static_cast<std::size_t>(time_embed_dim);
        std::size_t w = static_cast<std::size_t>(hidden_width);
        std::size_t n = dt * dt + dt;                                // time projection
        n += static_cast<std::size_t>(class_count + 1) * dt;         // condition table
        n += static_cast<std::size_t>(concat_dim()) * w + w;         // input projection
        n += static_cast<std::size_t>(depth) * (w * w + w);          // hidden layers
        n += w * static_cast<std::size_t>(dim) + dim;                // output projection
        return n;
    }
};

struct SamplerConfig {
    float cfg_scale = 2.0f;  // conditional scale; 0 disables conditioning
    // Reverse iterates are clamped to [-sample_clip, sample_clip] (0 disables),
    // the low-dimensional analog of pixel-range clamping. Keeps trajectories
    // finite when a wrecked conditional branch predicts huge noise.
    float sample_clip = 20.0f;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(cfg_scale >= 0.0f)) throw ConfigError("sampler: cfg_scale must be >= 0");
        if (!(sample_clip >= 0.0f)) throw ConfigError("sampler: sample_clip must be >= 0");
    }
};

struct EpsilonNet {
    EpsNetArch arch;
    ParamStore params;
};

namespace detail {

inline Tensor uniform_init(std::vector<std::size_t> shape, float bound, StreamRng& rng) {
    Tensor t(std::move(shape));
    for (auto& v : t.data) v = bound * (2.0f * static_cast<float>(rng.uniform()) - 1.0f);
    return t;
}

// frequencies geometrically spaced so periods cover [1, horizon]
inline std::vector<double> time_frequencies(const EpsNetArch& arch) {
    int n = arch.time_embed_dim / 2;
    std::vector<double> w(static_cast<std::size_t>(n));
    for (int k = 0; k < n; ++k) {
        double e = (n == 1) ? 0.0 : static_cast<double>(k) / static_cast<double>(n - 1);
        w[static_cast<std::size_t>(k)] = std::pow(static_cast<double>(arch.time_horizon), -e);
    }
    return w;
}

}  // namespace detail

// t * omega_k products, the raw input to the in-graph sin/cos features
inline Tensor time_feature_inputs(const EpsNetArch& arch, const std::vector<Timestep>& t) {
    auto freqs = detail::time_frequencies(arch);
    Tensor out({t.size(), freqs.size()});
    for (std::size_t i = 0; i < t.size(); ++i)
        for (std::size_t k = 0; k < freqs.size(); ++k)
            out(i, k) = static_cast<float>(static_cast<double>(t[i]) * freqs[k]);
    return out;
}

inline EpsilonNet init_net(const EpsNetArch& arch, std::uint64_t seed) {
    arch.validate();
    EpsilonNet net;
    net.arch = arch;
    std::size_t dt = static_cast<std::size_t>(arch.time_embed_dim);
    std::size_t w = static_cast<std::size_t>(arch.hidden_width);
    std::size_t d = static_cast<std::size_t>(arch.dim);
    std::size_t rows = static_cast<std::size_t>(arch.class_count + 1);
    int s = 0;
    auto bound = [](std::size_t fan_in) {
        return 1.0f / std::sqrt(static_cast<float>(fan_in));
    };
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, float b) {
        StreamRng rng(seed, site_id("epsnet.init"), static_cast<std::uint64_t>(s++));
        net.params.add(name, detail::uniform_init(std::move(shape), b, rng));
    };
    add("time_proj.w", {dt, dt}, bound(dt));
    add("time_proj.b", {dt}, bound(dt));
    {
        // Fixed condition encodings, evenly spaced on a line in the first
        // embedding dim with a constant offset on the second; the null
        // condition is the zero vector. Playing the role of a frozen prompt
        // encoder: conditions share one continuous input space, interior
        // conditions are bracketed by their neighbors, and all class-specific
        // behavior lives in shared weights.
        Tensor table({rows, dt});
        for (int c = 0; c < arch.class_count; ++c) {
            table(static_cast<std::size_t>(c), 0) =
                static_cast<float>((c - 0.5 * (arch.class_count - 1)) * arch.cond_spacing);
            table(static_cast<std::size_t>(c), 1) = static_cast<float>(arch.cond_spacing);
        }
        int idx = net.params.add("cond_table", std::move(table));
        net.params.segments[static_cast<std::size_t>(idx)].frozen = true;
        ++s;  // keep init streams for later segments stable
    }
    add("in.w", {static_cast<std::size_t>(arch.concat_dim()), w},
        bound(static_cast<std::size_t>(arch.concat_dim())));
    add("in.b", {w}, bound(static_cast<std::size_t>(arch.concat_dim())));
    for (int k = 1; k <= arch.depth; ++k) {
        add("h" + std::to_string(k) + ".w", {w, w}, bound(w));
        add("h" + std::to_string(k) + ".b", {w}, bound(w));
    }
    add("out.w", {w, d}, bound(w));
    add("out.b", {d}, bound(w));
    return net;
}

// Taped forward pass over a batch: concat(x_t, projected sin/cos time
// features, condition embedding) through the MLP. Conditions use id
// class_count for the null row.
template <typename T>
typename GraphT<T>::Id graph_predict(GraphT<T>& g, ParamStoreT<T>& params,
                                     const EpsNetArch& arch, const TensorT<T>& x_t,
                                     const std::vector<Timestep>& t,
                                     const std::vector<int>& cond) {
    if (x_t.rank() != 2 || x_t.cols() != static_cast<std::size_t>(arch.dim) ||
        x_t.rows() != t.size() || t.size() != cond.size())
        throw UsageError("graph_predict: inconsistent batch shapes");
    for (int c : cond)
        if (c < 0 || c > arch.class_count)
            throw UsageError("graph_predict: condition id " + std::to_string(c) +
                             " outside [0," + std::to_string(arch.class_count) + "]");
    for (Timestep ti : t)
        if (ti < 1 || ti > arch.time_horizon)
            throw UsageError("graph_predict: timestep outside [1," +
                             std::to_string(arch.time_horizon) + "]");

    auto xin = g.input(x_t);
    auto tf = g.input(time_feature_inputs(arch, t).template cast<T>());
    auto temb = g.concat({g.sine(tf), g.cosine(tf)});
    auto tproj = g.affine(temb, g.param(params, "time_proj.w"), g.param(params, "time_proj.b"));
    auto cemb = g.embed(g.param(params, "cond_table"), cond);
    auto h = g.silu(g.affine(g.concat({xin, g.add(tproj, cemb)}), g.param(params, "in.w"),
                             g.param(params, "in.b")));
    for (int k = 1; k <= arch.depth; ++k) {
        auto wk = g.param(params, "h" + std::to_string(k) + ".w");
        auto bk = g.param(params, "h" + std::to_string(k) + ".b");
        h = g.silu(g.affine(h, wk, bk));
    }
    return g.affine(h, g.param(params, "out.w"), g.param(params, "out.b"));
}

namespace detail {

inline void affine_forward(const Tensor& x, const Tensor& w, const Tensor& b, Tensor& out) {
    out = Tensor({x.rows(), w.cols()});
    kernels::gemm(x.data.data(), w.data.data(), out.data.data(), x.rows(), x.cols(), w.cols());
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < w.cols(); ++j) out(i, j) += b.data[j];
}

}  // namespace detail

// No-grad forward pass; mirrors graph_predict op for op so values are
// bit-identical to the taped path.
inline Tensor predict_batch(const EpsilonNet& net, const Tensor& x_t,
                            const std::vector<Timestep>& t, const std::vector<int>& cond) {
    const auto& arch = net.arch;
    if (x_t.rank() != 2 || x_t.cols() != static_cast<std::size_t>(arch.dim) ||
        x_t.rows() != t.size() || t.size() != cond.size())
        throw UsageError("predict_batch: inconsistent batch shapes");
    for (int c : cond)
        if (c < 0 || c > arch.class_count)
            throw UsageError("predict_batch: condition id out of range");
    auto& ps = const_cast<ParamStore&>(net.params);
    std::size_t B = t.size();

    Tensor tf = time_feature_inputs(arch, t);
    std::size_t nf = tf.cols();
    Tensor temb({B, 2 * nf});
    for (std::size_t i = 0; i < B; ++i)
        for (std::size_t k = 0; k < nf; ++k) {
            temb(i, k) = std::sin(tf(i, k));
            temb(i, nf + k) = std::cos(tf(i, k));
        }
    Tensor tproj;
    detail::affine_forward(temb, ps.at("time_proj.w").value, ps.at("time_proj.b").value, tproj);

    const Tensor& table = ps.at("cond_table").value;
    Tensor full({B, static_cast<std::size_t>(arch.concat_dim())});
    for (std::size_t i = 0; i < B; ++i) {
        std::size_t off = 0;
        for (std::size_t j = 0; j < x_t.cols(); ++j) full(i, off++) = x_t(i, j);
        for (std::size_t j = 0; j < tproj.cols(); ++j)
            full(i, off++) = tproj(i, j) + table(static_cast<std::size_t>(cond[i]), j);
    }

    Tensor h;
    detail::affine_forward(full, ps.at("in.w").value, ps.at("in.b").value, h);
    for (auto& v : h.data) v = v * kernels::sigmoid(v);
    for (int k = 1; k <= arch.depth; ++k) {
        Tensor next;
        detail::affine_forward(h, ps.at("h" + std::to_string(k) + ".w").value,
                               ps.at("h" + std::to_string(k) + ".b").value, next);
        for (auto& v : next.data) v = v * kernels::sigmoid(v);
        h = std::move(next);
    }
    Tensor out;
    detail::affine_forward(h, ps.at("out.w").value, ps.at("out.b").value, out);
    if (!out.all_finite()) throw NumericError("predict_batch: non-finite prediction");
    return out;
}

// single-sample convenience wrapper
inline Tensor predict_eps(const EpsilonNet& net, const Tensor& x_t, Timestep t, ConditionId c) {
    Tensor row({1, x_t.numel()}, x_t.data);
    Tensor out = predict_batch(net, row, {t}, {c});
    std::size_t n = out.numel();
    return Tensor({n}, std::move(out.data));
}

inline Tensor cfg_combine(const Tensor& eps_uncond, const Tensor& eps_cond, float beta) {
    if (!eps_uncond.same_shape(eps_cond)) throw UsageError("cfg_combine: shape mismatch");
    Tensor out(eps_uncond.shape);
    for (std::size_t i = 0; i < out.numel(); ++i)
        out.data[i] = eps_uncond.data[i] + beta * (eps_cond.data[i] - eps_uncond.data[i]);
    return out;
}

// Guided estimate over a batch that shares one condition id. beta = 1 and
// c = null collapse to single predictions so those identities hold exactly.
inline Tensor cfg_predict_batch(const EpsilonNet& net, const Tensor& x_t,
                                const std::vector<Timestep>& t, ConditionId c,
                                const SamplerConfig& cfg) {
    std::vector<int> cond(t.size(), c);
    if (c == null_condition(net.arch.class_count))
        return predict_batch(net, x_t, t, cond);
    if (cfg.cfg_scale == 1.0f) return predict_batch(net, x_t, t, cond);
    std::vector<int> uncond(t.size(), null_condition(net.arch.class_count));
    Tensor eu = predict_batch(net, x_t, t, uncond);
    if (cfg.cfg_scale == 0.0f) return eu;
    Tensor ec = predict_batch(net, x_t, t, cond);
    return cfg_combine(eu, ec, cfg.cfg_scale);
}

inline Tensor cfg_predict(const EpsilonNet& net, const Tensor& x_t, Timestep t, ConditionId c,
                          const SamplerConfig& cfg) {
    Tensor row({1, x_t.numel()}, x_t.data);
    Tensor out = cfg_predict_batch(net, row, {t}, c, cfg);
    std::size_t n = out.numel();
    return Tensor({n}, std::move(out.data));
}

}  // namespace unforge
