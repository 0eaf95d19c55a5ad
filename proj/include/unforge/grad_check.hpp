#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "unforge/graph.hpp"
#include "unforge/param_store.hpp"

namespace unforge {

struct GradCheckReport {
    struct SegmentResult {
        std::string name;
        double max_rel_err = 0.0;
    };
    std::vector<SegmentResult> segments;
    double max_rel_err = 0.0;

    bool passes(double tolerance) const { return max_rel_err < tolerance; }
};

// Central-difference gradient verification, evaluated in f64 throughout so
// the check measures the gradient rules rather than f32 rounding noise.
// Detach nodes are recorded on the base evaluation and replayed as constants
// for every perturbed evaluation, so stop-gradient branches stay fixed the
// way the autodiff semantics treat them.
//
// `build` is called as build(graph, store) and must construct a scalar loss
// from the given store, drawing any randomness from state captured outside.
template <typename BuildFn>
GradCheckReport finite_diff_check(ParamStore& params, BuildFn&& build, double h = 1e-4) {
    if (params.param_count() > 10000)
        throw UsageError("finite_diff_check: too many parameters to perturb exhaustively");

    ParamStoreT<double> pd = params.template cast<double>();
    {
        GraphT<double> g;
        auto root = build(g, pd);
        g.backward(root);
    }
    std::vector<std::vector<double>> autodiff;
    for (auto& seg : pd.segments) {
        autodiff.push_back(seg.grad.data);
        seg.grad.fill(0.0);
    }
    DetachCacheT<double> cache;
    {
        GraphT<double> g;
        g.detach_cache = &cache;
        build(g, pd);
    }
    cache.mode = DetachCacheT<double>::Mode::replay;

    auto eval = [&]() {
        cache.cursor = 0;
        GraphT<double> g;
        g.detach_cache = &cache;
        auto root = build(g, pd);
        return static_cast<double>(g.value(root).data[0]);
    };

    GradCheckReport report;
    for (std::size_t s = 0; s < pd.segments.size(); ++s) {
        auto& seg = pd.segments[s];
        GradCheckReport::SegmentResult res;
        res.name = seg.name;
        for (std::size_t i = 0; i < seg.value.numel(); ++i) {
            double orig = seg.value.data[i];
            seg.value.data[i] = orig + h;
            double fp = eval();
            seg.value.data[i] = orig - h;
            double fm = eval();
            seg.value.data[i] = orig;
            double fd = (fp - fm) / (2.0 * h);
            double ad = autodiff[s][i];
            double rel = std::abs(ad - fd) / std::max({std::abs(ad), std::abs(fd), 1e-8});
            res.max_rel_err = std::max(res.max_rel_err, rel);
        }
        report.max_rel_err = std::max(report.max_rel_err, res.max_rel_err);
        report.segments.push_back(std::move(res));
    }
    return report;
}

}  // namespace unforge
