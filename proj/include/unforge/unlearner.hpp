#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "unforge/checkpoint.hpp"
#include "unforge/losses.hpp"
#include "unforge/trainer.hpp"

namespace unforge {

enum class UnlearnMethod { ga_retain, replace, dimum };

inline const char* method_name(UnlearnMethod m) {
    switch (m) {
        case UnlearnMethod::ga_retain: return "ga_retain";
        case UnlearnMethod::replace: return "replace";
        case UnlearnMethod::dimum: return "dimum";
    }
    return "?";
}

inline UnlearnMethod parse_method(const std::string& s) {
    if (s == "ga_retain") return UnlearnMethod::ga_retain;
    if (s == "replace") return UnlearnMethod::replace;
    if (s == "dimum") return UnlearnMethod::dimum;
    throw ConfigError("unknown unlearning method '" + s +
                      "' (expected ga_retain, replace, or dimum)");
}

// Component values are the raw noise-prediction terms; `total` carries the
// method's signs and the balance coefficient.
struct UnlearnLossResult {
    Graph::Id root = -1;
    float total = 0.0f;
    float retain_term = 0.0f;
    float unlearn_term = 0.0f;
    BatchDraws retain_draws;
    BatchDraws unlearn_draws;
};

// beta * (retain loss) - (loss on the unlearning batch): gradient ascent on
// the unlearned data with a retain anchor. No condition dropout; independent
// draws for the two terms.
inline UnlearnLossResult loss_ga_retain(Graph& g, EpsilonNet& net, const LabeledSet& retain,
                                        const LabeledSet& unlearn, const NoiseSchedule& sched,
                                        float beta, std::uint64_t seed, std::uint64_t step,
                                        const BatchDraws* forced_retain = nullptr,
                                        const BatchDraws* forced_unlearn = nullptr,
                                        int batch_size = 128) {
    UnlearnLossResult res;
    res.retain_draws = forced_retain ? *forced_retain
                                     : sample_batch(retain, batch_size, 0.0f, sched, seed,
                                                    site_id("unlearn.retain"), step);
    res.unlearn_draws = forced_unlearn ? *forced_unlearn
                                       : sample_batch(unlearn, batch_size, 0.0f, sched, seed,
                                                      site_id("unlearn.unlearn"), step);
    auto retain_id = noise_mse_term(g, net.params, net.arch, retain, res.retain_draws, sched);
    auto unlearn_id = noise_mse_term(g, net.params, net.arch, unlearn, res.unlearn_draws, sched);
    auto root = g.add(g.scale(retain_id, static_cast<double>(beta)), g.scale(unlearn_id, -1.0));
    res.root = root;
    res.retain_term = g.value(retain_id).data[0];
    res.unlearn_term = g.value(unlearn_id).data[0];
    res.total = g.value(root).data[0];
    return res;
}

// beta * (retain loss) + mean || eps(x_t | c_alt) [stop-grad] - eps(x_t | c_u) ||^2
// where x_t is the noised unlearning point. The replacement target is built
// under a detach marker, so only the c_u branch receives gradient.
inline UnlearnLossResult loss_replace(Graph& g, EpsilonNet& net, const LabeledSet& retain,
                                      const LabeledSet& unlearn, const NoiseSchedule& sched,
                                      float beta, ConditionId c_r_prime, std::uint64_t seed,
                                      std::uint64_t step,
                                      const BatchDraws* forced_retain = nullptr,
                                      const BatchDraws* forced_unlearn = nullptr,
                                      int batch_size = 128) {
    if (c_r_prime < 0 || c_r_prime >= unlearn.class_count)
        throw ConfigError("loss_replace: replacement condition outside [0,C)");
    UnlearnLossResult res;
    res.retain_draws = forced_retain ? *forced_retain
                                     : sample_batch(retain, batch_size, 0.0f, sched, seed,
                                                    site_id("unlearn.retain"), step);
    res.unlearn_draws = forced_unlearn ? *forced_unlearn
                                       : sample_batch(unlearn, batch_size, 0.0f, sched, seed,
                                                      site_id("unlearn.unlearn"), step);
    auto retain_id = noise_mse_term(g, net.params, net.arch, retain, res.retain_draws, sched);

    Tensor x0 = gather_rows(unlearn, res.unlearn_draws.rows);
    Tensor x_t = forward_diffuse_rows(x0, res.unlearn_draws.t, res.unlearn_draws.eps, sched);
    std::vector<int> cond_alt(res.unlearn_draws.rows.size(), c_r_prime);
    auto target = g.detach(
        graph_predict(g, net.params, net.arch, x_t, res.unlearn_draws.t, cond_alt));
    auto pred = graph_predict(g, net.params, net.arch, x_t, res.unlearn_draws.t,
                              res.unlearn_draws.cond);
    auto unlearn_id = g.scale(g.mse(target, pred), static_cast<double>(net.arch.dim));

    auto root = g.add(g.scale(retain_id, static_cast<double>(beta)), unlearn_id);
    res.root = root;
    res.retain_term = g.value(retain_id).data[0];
    res.unlearn_term = g.value(unlearn_id).data[0];
    res.total = g.value(root).data[0];
    return res;
}

// beta * (loss on replacement pairs) + (retain loss); both terms have the
// plain denoising form on their own batches.
inline UnlearnLossResult loss_dimum(Graph& g, EpsilonNet& net, const LabeledSet& retain,
                                    const LabeledSet& replacement, const NoiseSchedule& sched,
                                    float beta, std::uint64_t seed, std::uint64_t step,
                                    const BatchDraws* forced_retain = nullptr,
                                    const BatchDraws* forced_unlearn = nullptr,
                                    int batch_size = 128) {
    if (replacement.role != SetRole::replacement)
        throw UsageError("loss_dimum: second batch source must have the replacement role");
    UnlearnLossResult res;
    res.retain_draws = forced_retain ? *forced_retain
                                     : sample_batch(retain, batch_size, 0.0f, sched, seed,
                                                    site_id("unlearn.retain"), step);
    res.unlearn_draws = forced_unlearn ? *forced_unlearn
                                       : sample_batch(replacement, batch_size, 0.0f, sched, seed,
                                                      site_id("unlearn.unlearn"), step);
    auto retain_id = noise_mse_term(g, net.params, net.arch, retain, res.retain_draws, sched);
    auto unlearn_id =
        noise_mse_term(g, net.params, net.arch, replacement, res.unlearn_draws, sched);
    auto root = g.add(g.scale(unlearn_id, static_cast<double>(beta)), retain_id);
    res.root = root;
    res.retain_term = g.value(retain_id).data[0];
    res.unlearn_term = g.value(unlearn_id).data[0];
    res.total = g.value(root).data[0];
    return res;
}

struct UnlearnRunConfig {
    UnlearnMethod method = UnlearnMethod::dimum;
    float balance_coef = 1.0f;
    long steps = 2000;
    int batch_size = 128;
    OptimConfig optim{1e-4f};
    ConditionId unlearn_class = 0;
    ConditionId alternative_class = 1;
    std::uint64_t seed = 1;
    long snapshot_every = 200;
    double abort_threshold = 1e6;
};

struct UnlearnLogEntry {
    long step;
    float retain_loss;
    float unlearn_loss;
    float total_loss;
};

struct UnlearnResult {
    std::vector<UnlearnLogEntry> log;
    long completed_steps = 0;
    bool aborted = false;
    std::string abort_reason;
};

// Runs the selected unlearning loss for cfg.steps steps. A non-finite loss or
// |loss| beyond the abort threshold stops the loop with the step recorded;
// parameters keep their last finite values.
inline UnlearnResult unlearn_loop(ModelState& state, const LabeledSet& d_r,
                                  const LabeledSet& d_u, const LabeledSet* d_u_prime,
                                  const UnlearnRunConfig& cfg, const NoiseSchedule& sched,
                                  const SnapshotSink& on_snapshot = {}) {
    if (d_r.role != SetRole::retain || d_u.role != SetRole::unlearn)
        throw UsageError("unlearn_loop: set roles do not match");
    if (cfg.method == UnlearnMethod::dimum &&
        (d_u_prime == nullptr || d_u_prime->role != SetRole::replacement))
        throw UsageError("unlearn_loop: dimum needs a replacement set");
    UnlearnResult out;
    if (state.opt_state.m.empty()) state.opt_state = AdamState::init(state.net.params);
    OptimConfig optim = cfg.optim;
    optim.step_count = state.opt_step_count;
    for (long step = 1; step <= cfg.steps; ++step) {
        state.net.params.zero_grads();
        Graph g;
        UnlearnLossResult res;
        try {
            switch (cfg.method) {
                case UnlearnMethod::ga_retain:
                    res = loss_ga_retain(g, state.net, d_r, d_u, sched, cfg.balance_coef,
                                         cfg.seed, static_cast<std::uint64_t>(step), nullptr,
                                         nullptr, cfg.batch_size);
                    break;
                case UnlearnMethod::replace:
                    res = loss_replace(g, state.net, d_r, d_u, sched, cfg.balance_coef,
                                       cfg.alternative_class, cfg.seed,
                                       static_cast<std::uint64_t>(step), nullptr, nullptr,
                                       cfg.batch_size);
                    break;
                case UnlearnMethod::dimum:
                    res = loss_dimum(g, state.net, d_r, *d_u_prime, sched, cfg.balance_coef,
                                     cfg.seed, static_cast<std::uint64_t>(step), nullptr,
                                     nullptr, cfg.batch_size);
                    break;
            }
            if (!std::isfinite(res.total)) throw NumericError("non-finite loss");
            if (std::abs(res.total) > cfg.abort_threshold)
                throw NumericError("loss magnitude beyond abort threshold " +
                                   std::to_string(cfg.abort_threshold));
            g.backward(res.root);
        } catch (const NumericError& e) {
            out.aborted = true;
            out.abort_reason =
                std::string(method_name(cfg.method)) + " aborted at step " +
                std::to_string(step) + ": " + e.what();
            break;
        }
        adam_step(state.net.params, optim, state.opt_state);
        state.opt_step_count = optim.step_count;
        out.log.push_back({step, res.retain_term, res.unlearn_term, res.total});
        out.completed_steps = step;
        if (on_snapshot && (step % cfg.snapshot_every == 0 || step == cfg.steps))
            on_snapshot(step, state);
    }
    return out;
}

inline void write_unlearn_log_csv(const std::filesystem::path& path,
                                  const std::vector<UnlearnLogEntry>& log) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "step,retain_loss,unlearn_loss,total_loss\n";
    for (const auto& e : log)
        out << e.step << "," << format_g9(e.retain_loss) << "," << format_g9(e.unlearn_loss)
            << "," << format_g9(e.total_loss) << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace unforge
