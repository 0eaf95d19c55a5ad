#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "unforge/adam.hpp"
#include "unforge/checkpoint.hpp"
#include "unforge/losses.hpp"

namespace unforge {

struct TrainConfig {
    long steps = 5000;
    int batch_size = 128;
    OptimConfig optim;
    float p_uncond = 0.1f;
    std::uint64_t seed = 1;
    long checkpoint_every = 1000;
};

struct BaseLossResult {
    Graph::Id root = -1;
    float value = 0.0f;
    BatchDraws draws;
};

// Conditional denoising loss over one sampled batch: per item, sample t and
// eps, optionally drop the condition to null, noise the point, and average
// the squared prediction error.
inline BaseLossResult base_loss(Graph& g, EpsilonNet& net, const LabeledSet& data,
                                int batch_size, float p_uncond, const NoiseSchedule& sched,
                                std::uint64_t seed, std::uint64_t step,
                                const BatchDraws* forced = nullptr) {
    BaseLossResult res;
    res.draws = forced ? *forced
                       : sample_batch(data, batch_size, p_uncond, sched, seed,
                                      site_id("loss.base"), step);
    res.root = noise_mse_term(g, net.params, net.arch, data, res.draws, sched);
    res.value = g.value(res.root).data[0];
    return res;
}

struct LossLogEntry {
    long step;
    float loss;
};

struct PretrainResult {
    std::vector<LossLogEntry> log;
    long completed_steps = 0;
};

using SnapshotSink = std::function<void(long step, const ModelState&)>;

// Minimizes the denoising loss for cfg.steps total optimizer steps. Resumes
// transparently: state.opt_step_count names the last finished step, and all
// randomness is drawn from streams indexed by the global step number.
inline PretrainResult pretrain_loop(ModelState& state, const LabeledSet& data,
                                    const TrainConfig& cfg, const NoiseSchedule& sched,
                                    const SnapshotSink& on_checkpoint = {}) {
    if (data.role != SetRole::full) throw UsageError("pretrain: expected the full dataset");
    PretrainResult out;
    state.net.arch.validate();
    if (state.opt_state.m.empty()) state.opt_state = AdamState::init(state.net.params);
    OptimConfig optim = cfg.optim;
    optim.step_count = state.opt_step_count;
    for (long step = state.opt_step_count + 1; step <= cfg.steps; ++step) {
        state.net.params.zero_grads();
        Graph g;
        BaseLossResult res;
        try {
            res = base_loss(g, state.net, data, cfg.batch_size, cfg.p_uncond, sched, cfg.seed,
                            static_cast<std::uint64_t>(step));
            g.backward(res.root);
        } catch (const NumericError& e) {
            throw NumericError("pretrain: aborted at step " + std::to_string(step) + ": " +
                               e.what());
        }
        if (!std::isfinite(res.value))
            throw NumericError("pretrain: non-finite loss at step " + std::to_string(step));
        adam_step(state.net.params, optim, state.opt_state);
        state.opt_step_count = optim.step_count;
        out.log.push_back({step, res.value});
        out.completed_steps = step;
        if (on_checkpoint && (step % cfg.checkpoint_every == 0 || step == cfg.steps))
            on_checkpoint(step, state);
    }
    return out;
}

inline void write_loss_log_csv(const std::filesystem::path& path,
                               const std::vector<LossLogEntry>& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "step,loss\n";
    for (const auto& e : log) out << e.step << "," << format_g9(e.loss) << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace unforge
