#pragma once

#include <cstdint>
#include <vector>

#include "unforge/data.hpp"
#include "unforge/epsnet.hpp"
#include "unforge/graph.hpp"
#include "unforge/rng.hpp"
#include "unforge/schedule.hpp"

namespace unforge {

// Everything sampled for one loss term: source rows, timesteps, noise, and
// the conditions actually fed to the net (after any null replacement).
// Keeping the draws makes losses replayable for oracle recomputation.
struct BatchDraws {
    std::vector<std::size_t> rows;
    std::vector<Timestep> t;
    Tensor eps;  // [B, d]
    std::vector<int> cond;
};

inline BatchDraws sample_batch(const LabeledSet& set, int batch_size, float p_uncond,
                               const NoiseSchedule& sched, std::uint64_t seed,
                               std::uint64_t site, std::uint64_t step) {
    if (set.size() == 0) throw UsageError("sample_batch: empty dataset");
    if (batch_size < 1) throw UsageError("sample_batch: batch_size must be >= 1");
    StreamRng rng(seed, site, step);
    BatchDraws dr;
    std::size_t b = static_cast<std::size_t>(batch_size);
    std::size_t d = set.dim();
    dr.rows.resize(b);
    dr.t.resize(b);
    dr.cond.resize(b);
    dr.eps = Tensor({b, d});
    for (std::size_t i = 0; i < b; ++i) {
        dr.rows[i] = rng.uniform_int(set.size());
        dr.t[i] = 1 + static_cast<Timestep>(rng.uniform_int(static_cast<std::uint64_t>(sched.T)));
        for (std::size_t j = 0; j < d; ++j) dr.eps(i, j) = rng.normal();
        int c = set.labels[dr.rows[i]];
        if (p_uncond > 0.0f && rng.uniform() < static_cast<double>(p_uncond))
            c = null_condition(set.class_count);
        dr.cond[i] = c;
    }
    return dr;
}

inline Tensor gather_rows(const LabeledSet& set, const std::vector<std::size_t>& rows) {
    Tensor out({rows.size(), set.dim()});
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = 0; j < set.dim(); ++j) out(i, j) = set.points(rows[i], j);
    return out;
}

// Mean over the batch of squared noise-prediction error. mse() averages over
// all elements, so scaling by d turns it into a mean of squared norms.
template <typename T, typename PredFn>
typename GraphT<T>::Id noise_mse_term_with(GraphT<T>& g, const EpsNetArch& arch,
                                           const Tensor& x_t, const BatchDraws& dr,
                                           PredFn&& pred_fn) {
    auto pred = pred_fn(g, x_t, dr.t, dr.cond);
    auto target = g.input(dr.eps.template cast<T>());
    return g.scale(g.mse(pred, target), static_cast<double>(arch.dim));
}

template <typename T>
typename GraphT<T>::Id noise_mse_term(GraphT<T>& g, ParamStoreT<T>& params,
                                      const EpsNetArch& arch, const LabeledSet& set,
                                      const BatchDraws& dr, const NoiseSchedule& sched) {
    Tensor x0 = gather_rows(set, dr.rows);
    Tensor x_t = forward_diffuse_rows(x0, dr.t, dr.eps, sched);
    return noise_mse_term_with(g, arch, x_t, dr,
                               [&](GraphT<T>& gg, const Tensor& xt,
                                   const std::vector<Timestep>& t, const std::vector<int>& c) {
                                   return graph_predict(gg, params, arch,
                                                        xt.template cast<T>(), t, c);
                               });
}

// derived stream seeds for nested phases (evaluation, snapshots, ...)
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view name,
                                 std::uint64_t a = 0, std::uint64_t b = 0) {
    std::uint64_t h = detail::mix64(seed + detail::kGamma);
    h = detail::mix64(h ^ site_id(name));
    h = detail::mix64(h + a);
    return detail::mix64(h + b);
}

}  // namespace unforge
