#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unforge/checkpoint.hpp"
#include "unforge/losses.hpp"
#include "unforge/sampler.hpp"
#include "unforge/trainer.hpp"

namespace unforge {

enum class AuxMode { retain, heldout, synthetic };

inline const char* aux_mode_name(AuxMode m) {
    switch (m) {
        case AuxMode::retain: return "retain";
        case AuxMode::heldout: return "heldout";
        case AuxMode::synthetic: return "synthetic";
    }
    return "?";
}

inline AuxMode parse_aux_mode(const std::string& s) {
    if (s == "retain") return AuxMode::retain;
    if (s == "heldout") return AuxMode::heldout;
    if (s == "synthetic") return AuxMode::synthetic;
    throw ConfigError("unknown aux mode '" + s + "' (expected retain, heldout, or synthetic)");
}

// Auxiliary data sampled from a released model: per retain class, generate
// per_class points conditioned on that class.
inline LabeledSet build_aux_synthetic(const EpsilonNet& pretrained, const NoiseSchedule& sched,
                                      SamplerConfig cfg, int per_class,
                                      ConditionId unlearn_class, std::uint64_t seed) {
    if (per_class < 1) throw UsageError("build_aux_synthetic: per_class must be >= 1");
    int C = pretrained.arch.class_count;
    LabeledSet out;
    out.role = SetRole::auxiliary;
    out.class_count = C;
    std::size_t total = static_cast<std::size_t>(per_class) * static_cast<std::size_t>(C - 1);
    out.points = Tensor({total, static_cast<std::size_t>(pretrained.arch.dim)});
    out.labels.resize(total);
    std::size_t row = 0;
    for (int c = 0; c < C; ++c) {
        if (c == unlearn_class) continue;
        cfg.seed = derive_seed(seed, "aux.synthetic", static_cast<std::uint64_t>(c));
        Tensor samples = generate(pretrained, static_cast<std::size_t>(per_class), c, sched, cfg);
        for (int i = 0; i < per_class; ++i, ++row) {
            for (std::size_t j = 0; j < samples.cols(); ++j)
                out.points(row, j) = samples(static_cast<std::size_t>(i), j);
            out.labels[row] = c;
        }
    }
    return out;
}

struct DimraLossResult {
    Graph::Id root = -1;
    float value = 0.0f;
    BatchDraws draws;
};

// Plain denoising loss on the auxiliary batch. Refuses any batch that smuggles
// in the unlearned class, which would break the attack premise.
inline DimraLossResult dimra_loss(Graph& g, EpsilonNet& net, const LabeledSet& aux,
                                  ConditionId unlearn_class, const NoiseSchedule& sched,
                                  std::uint64_t seed, std::uint64_t step,
                                  const BatchDraws* forced = nullptr, int batch_size = 128,
                                  float p_uncond = 0.0f) {
    if (aux.role != SetRole::auxiliary)
        throw UsageError("dimra_loss: batch source must have the auxiliary role");
    DimraLossResult res;
    res.draws = forced ? *forced
                       : sample_batch(aux, batch_size, p_uncond, sched, seed,
                                      site_id("attack.batch"), step);
    for (std::size_t r : res.draws.rows)
        if (aux.labels[r] == unlearn_class)
            throw UsageError("dimra_loss: auxiliary batch contains the unlearned class");
    res.root = noise_mse_term(g, net.params, net.arch, aux, res.draws, sched);
    res.value = g.value(res.root).data[0];
    return res;
}

struct AttackRunConfig {
    long steps = 6000;
    int batch_size = 128;
    OptimConfig optim{1e-4f};
    float p_uncond = 0.0f;  // attacker may mirror the training-time dropout
    AuxMode aux_mode = AuxMode::retain;
    ConditionId unlearn_class = 0;
    std::uint64_t seed = 1;
    long snapshot_every = 200;
};

struct AttackLogEntry {
    long step;
    float dimra_loss;
};

struct AttackResult {
    std::vector<AttackLogEntry> log;
    long completed_steps = 0;
    bool aborted = false;
    std::string abort_reason;
};

// Finetunes the given model state on the auxiliary set, snapshotting the
// trajectory for the accuracy-rate curves.
inline AttackResult attack_loop(ModelState& state, const LabeledSet& aux,
                                const AttackRunConfig& cfg, const NoiseSchedule& sched,
                                const SnapshotSink& on_snapshot = {}) {
    if (aux.contains_label(cfg.unlearn_class))
        throw UsageError("attack_loop: auxiliary set contains the unlearned class");
    AttackResult out;
    if (state.opt_state.m.empty()) state.opt_state = AdamState::init(state.net.params);
    OptimConfig optim = cfg.optim;
    optim.step_count = state.opt_step_count;
    for (long step = 1; step <= cfg.steps; ++step) {
        state.net.params.zero_grads();
        Graph g;
        DimraLossResult res;
        try {
            res = dimra_loss(g, state.net, aux, cfg.unlearn_class, sched, cfg.seed,
                             static_cast<std::uint64_t>(step), nullptr, cfg.batch_size,
                             cfg.p_uncond);
            if (!std::isfinite(res.value)) throw NumericError("non-finite loss");
            g.backward(res.root);
        } catch (const NumericError& e) {
            out.aborted = true;
            out.abort_reason = "attack aborted at step " + std::to_string(step) + ": " + e.what();
            break;
        }
        adam_step(state.net.params, optim, state.opt_state);
        state.opt_step_count = optim.step_count;
        out.log.push_back({step, res.value});
        out.completed_steps = step;
        if (on_snapshot && (step % cfg.snapshot_every == 0 || step == cfg.steps))
            on_snapshot(step, state);
    }
    return out;
}

inline void write_attack_log_csv(const std::filesystem::path& path,
                                 const std::vector<AttackLogEntry>& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "step,dimra_loss\n";
    for (const auto& e : log) out << e.step << "," << format_g9(e.dimra_loss) << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace unforge
