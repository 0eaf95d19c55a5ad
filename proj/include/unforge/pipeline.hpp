#pragma once

#include <chrono>
#include <filesystem>
#include <fnmatch.h>
#include <string>
#include <vector>

#include "unforge/attacker.hpp"
#include "unforge/checkpoint.hpp"
#include "unforge/config.hpp"
#include "unforge/evaluator.hpp"
#include "unforge/sha256.hpp"
#include "unforge/trainer.hpp"
#include "unforge/unlearner.hpp"
#include "unforge/version.hpp"

namespace unforge {

namespace fs = std::filesystem;

// ---- oracle persistence (same container format as model checkpoints) ----

inline Checkpoint oracle_to_checkpoint(const OracleClassifier& oc) {
    Checkpoint ckpt;
    ckpt.set_meta({{"format", "unforge-checkpoint"},
                   {"phase", "oracle"},
                   {"dim", oc.dim},
                   {"class_count", oc.class_count},
                   {"hidden_width", oc.hidden_width},
                   {"depth", oc.depth},
                   {"heldout_accuracy", oc.heldout_accuracy}});
    ckpt.segments = oc.params;
    return ckpt;
}

inline OracleClassifier oracle_from_checkpoint(const Checkpoint& ckpt) {
    auto meta = ckpt.meta();
    if (meta.value("phase", "") != "oracle")
        throw IoError("oracle checkpoint has phase '" + meta.value("phase", "") + "'");
    OracleClassifier oc;
    oc.dim = meta.at("dim").get<int>();
    oc.class_count = meta.at("class_count").get<int>();
    oc.hidden_width = meta.at("hidden_width").get<int>();
    oc.depth = meta.at("depth").get<int>();
    oc.heldout_accuracy = meta.at("heldout_accuracy").get<double>();
    oc.params = ckpt.segments;
    return oc;
}

// ---- run manifest ----

struct ManifestArtifact {
    std::string path;  // relative to the run directory
    std::string sha256;
};

struct PhaseTiming {
    std::string name;
    double seconds = 0.0;
    std::string note;  // e.g. recorded numeric aborts
};

struct RunManifest {
    std::string tool = tool_version();
    std::uint64_t seed = 0;
    nlohmann::json config;
    std::string status = "incomplete";
    std::vector<PhaseTiming> phases;
    std::vector<ManifestArtifact> artifacts;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["tool"] = tool;
        j["seed"] = seed;
        j["config"] = config;
        j["status"] = status;
        j["phases"] = nlohmann::json::array();
        for (const auto& p : phases) {
            nlohmann::json pj = {{"name", p.name}, {"seconds", p.seconds}};
            if (!p.note.empty()) pj["note"] = p.note;
            j["phases"].push_back(pj);
        }
        j["artifacts"] = nlohmann::json::array();
        for (const auto& a : artifacts)
            j["artifacts"].push_back({{"path", a.path}, {"sha256", a.sha256}});
        return j;
    }
};

// Builds the run directory tree and keeps the manifest in sync: every file
// written through it is hashed and listed.
class RunContext {
public:
    RunContext(Config cfg, fs::path out_dir) : cfg_(std::move(cfg)), out_(std::move(out_dir)) {
        manifest_.seed = cfg_.seed;
        manifest_.config = config_to_json(cfg_);
        fs::create_directories(out_);
    }

    const Config& config() const { return cfg_; }
    const fs::path& dir() const { return out_; }
    RunManifest& manifest() { return manifest_; }

    fs::path path_of(const std::string& rel) const { return out_ / rel; }

    void record(const std::string& rel) {
        manifest_.artifacts.push_back({rel, sha256_file((out_ / rel).string())});
    }

    void record_tree(const std::string& rel_dir) {
        std::vector<std::string> rels;
        for (const auto& e : fs::recursive_directory_iterator(out_ / rel_dir))
            if (e.is_regular_file())
                rels.push_back(fs::relative(e.path(), out_).generic_string());
        std::sort(rels.begin(), rels.end());
        for (const auto& r : rels) manifest_.artifacts.push_back({r, sha256_file((out_ / r).string())});
    }

    template <typename Fn>
    void phase(const std::string& name, Fn&& fn) {
        auto t0 = std::chrono::steady_clock::now();
        std::string note = fn();
        auto t1 = std::chrono::steady_clock::now();
        manifest_.phases.push_back(
            {name, std::chrono::duration<double>(t1 - t0).count(), note});
    }

    void write_manifest(const std::string& status) {
        manifest_.status = status;
        std::ofstream out(out_ / "manifest.json");
        if (!out) throw IoError("cannot write manifest");
        out << manifest_.to_json().dump(2) << "\n";
    }

private:
    Config cfg_;
    fs::path out_;
    RunManifest manifest_;
};

// ---- checkpoint discovery for eval ----

struct FoundCheckpoint {
    fs::path path;
    long step = 0;
};

inline std::vector<FoundCheckpoint> find_checkpoints(const std::string& glob) {
    fs::path pattern_path(glob);
    fs::path dir = pattern_path.parent_path();
    if (dir.empty()) dir = ".";
    std::string pattern = pattern_path.filename().string();
    if (!fs::is_directory(dir)) throw IoError("no such directory: '" + dir.string() + "'");
    std::vector<FoundCheckpoint> out;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        std::string name = e.path().filename().string();
        if (fnmatch(pattern.c_str(), name.c_str(), 0) != 0) continue;
        auto meta = load_checkpoint(e.path()).meta();
        out.push_back({e.path(), meta.value("step", 0L)});
    }
    std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) {
        return a.step != b.step ? a.step < b.step : a.path.string() < b.path.string();
    });
    if (out.empty()) throw IoError("no checkpoints match '" + glob + "'");
    return out;
}

// ---- shared phase helpers ----

struct DataBundle {
    LabeledSet full;
    LabeledSet heldout;
};

inline DataBundle generate_data(const Config& cfg) {
    DataBundle d;
    d.full = gen_mixture_dataset(make_mixture_spec(cfg.data, cfg.data.samples_per_class),
                                 cfg.seed, "data.full");
    d.heldout = gen_mixture_dataset(make_mixture_spec(cfg.data, cfg.data.heldout_per_class),
                                    cfg.seed, "data.heldout");
    return d;
}

inline ConditionId resolve_alternative_class(const Config& cfg) {
    return cfg.unlearn.alternative_class >= 0
               ? cfg.unlearn.alternative_class
               : default_alternative_class(cfg.unlearn.unlearn_class, cfg.data.class_count);
}

inline TrainConfig pretrain_train_config(const Config& cfg) {
    TrainConfig t;
    t.steps = cfg.pretrain.run.steps;
    t.batch_size = cfg.pretrain.run.batch_size;
    t.optim = cfg.pretrain.run.optim;
    t.p_uncond = cfg.pretrain.p_uncond;
    t.seed = derive_seed(cfg.seed, "phase.pretrain");
    t.checkpoint_every = cfg.pretrain.checkpoint_every;
    return t;
}

inline UnlearnRunConfig unlearn_run_config(const Config& cfg, UnlearnMethod method) {
    UnlearnRunConfig u;
    u.method = method;
    u.balance_coef = cfg.unlearn.balance_coef;
    u.steps = cfg.unlearn.run.steps;
    u.batch_size = cfg.unlearn.run.batch_size;
    u.optim = cfg.unlearn.run.optim;
    if (auto it = cfg.unlearn.method_lr.find(method_name(method));
        it != cfg.unlearn.method_lr.end())
        u.optim.lr = it->second;
    u.unlearn_class = cfg.unlearn.unlearn_class;
    u.alternative_class = resolve_alternative_class(cfg);
    u.seed = derive_seed(cfg.seed, "phase.unlearn", static_cast<std::uint64_t>(method));
    u.snapshot_every = cfg.unlearn.snapshot_every;
    u.abort_threshold = cfg.unlearn.abort_threshold;
    return u;
}

inline AttackRunConfig attack_run_config(const Config& cfg, UnlearnMethod method, AuxMode mode) {
    AttackRunConfig a;
    a.steps = cfg.attack.run.steps;
    a.batch_size = cfg.attack.run.batch_size;
    a.optim = cfg.attack.run.optim;
    a.p_uncond = cfg.attack.p_uncond;
    a.aux_mode = mode;
    a.unlearn_class = cfg.unlearn.unlearn_class;
    a.seed = derive_seed(cfg.seed, "phase.attack",
                         static_cast<std::uint64_t>(method) * 16 +
                             static_cast<std::uint64_t>(mode));
    a.snapshot_every = cfg.attack.snapshot_every;
    return a;
}

inline OracleConfig oracle_config(const Config& cfg) {
    OracleConfig o;
    o.hidden_width = cfg.eval.oracle_hidden;
    o.depth = cfg.eval.oracle_depth;
    o.steps = cfg.eval.oracle_steps;
    o.batch_size = cfg.eval.oracle_batch;
    o.optim = OptimConfig{cfg.eval.oracle_lr};
    o.min_accuracy = cfg.eval.oracle_min_accuracy;
    o.seed = derive_seed(cfg.seed, "phase.oracle");
    return o;
}

inline LabeledSet build_aux_for_mode(AuxMode mode, const Config& cfg, const LabeledSet& d_r,
                                     const LabeledSet& heldout, const EpsilonNet* pretrained,
                                     const NoiseSchedule& sched) {
    switch (mode) {
        case AuxMode::retain:
            return aux_from_retain(d_r);
        case AuxMode::heldout:
            return aux_from_heldout(heldout, cfg.unlearn.unlearn_class);
        case AuxMode::synthetic: {
            if (!pretrained)
                throw UsageError("aux mode synthetic needs the pretrained checkpoint");
            SamplerConfig scfg;
            scfg.cfg_scale = cfg.eval.cfg_scale;
            scfg.sample_clip = cfg.eval.sample_clip;
            return build_aux_synthetic(*pretrained, sched, scfg, cfg.attack.synthetic_per_class,
                                       cfg.unlearn.unlearn_class,
                                       derive_seed(cfg.seed, "phase.aux_synth"));
        }
    }
    throw UsageError("bad aux mode");
}

inline nlohmann::json run_meta(const Config& cfg, const std::string& phase, long step) {
    return {{"phase", phase}, {"step", step}, {"seed", cfg.seed}, {"tool", tool_version()}};
}

// ---- the full experiment: data -> pretrain -> oracle -> unlearn* -> attack* -> eval ----

inline RunManifest run_pipeline(const Config& cfg, const fs::path& out_dir, bool force = false) {
    if (fs::exists(out_dir) && !fs::is_empty(out_dir) && !force)
        throw UsageError("output directory '" + out_dir.string() +
                         "' is not empty (use --force to overwrite)");
    RunContext run(cfg, out_dir);
    NoiseSchedule sched = cfg.make_schedule();
    ScheduleParams sched_params{cfg.schedule.steps, cfg.schedule.beta_start,
                                cfg.schedule.beta_end};
    DataBundle data;
    ModelState pretrained;
    OracleClassifier oracle;
    ConditionId alt = resolve_alternative_class(cfg);

    try {
        run.phase("gen-data", [&]() -> std::string {
            data = generate_data(cfg);
            fs::create_directories(run.path_of("data"));
            write_dataset_csv(run.path_of("data/full.csv"), data.full);
            write_dataset_csv(run.path_of("data/heldout.csv"), data.heldout);
            run.record("data/full.csv");
            run.record("data/heldout.csv");
            return {};
        });

        run.phase("pretrain", [&]() -> std::string {
            fs::create_directories(run.path_of("pretrain"));
            pretrained.net = init_net(cfg.make_arch(), derive_seed(cfg.seed, "init.net"));
            pretrained.schedule = sched_params;
            auto tc = pretrain_train_config(cfg);
            auto res = pretrain_loop(pretrained, data.full, tc, sched,
                                     [&](long step, const ModelState& st) {
                                         auto meta = run_meta(cfg, "pretrain", step);
                                         save_checkpoint(run.path_of("pretrain/pretrain_" +
                                                                     std::to_string(step) +
                                                                     ".ufcp"),
                                                         pack_checkpoint(st, meta));
                                     });
            write_loss_log_csv(run.path_of("pretrain/loss.csv"), res.log);
            run.record_tree("pretrain");
            return std::string{};
        });

        run.phase("oracle", [&]() -> std::string {
            fs::create_directories(run.path_of("oracle"));
            oracle = train_oracle(data.full, data.heldout, oracle_config(cfg));
            save_checkpoint(run.path_of("oracle/oracle.ufcp"), oracle_to_checkpoint(oracle));
            run.record("oracle/oracle.ufcp");
            return {};
        });

        auto [d_u, d_r] = split_unlearn_retain(data.full, cfg.unlearn.unlearn_class);
        LabeledSet d_u_prime =
            build_du_prime(d_r, d_u, alt, d_u.size(), derive_seed(cfg.seed, "phase.du_prime"));

        EvalContext ectx;
        ectx.unlearn_class = cfg.unlearn.unlearn_class;
        ectx.alternative_class = alt;
        ectx.retain_reference = &d_r;
        ectx.oracle = &oracle;
        ectx.cfg_scale = cfg.eval.cfg_scale;
        ectx.sample_clip = cfg.eval.sample_clip;
        ectx.seed = derive_seed(cfg.seed, "phase.eval");
        ectx.frechet_space = cfg.eval.frechet_space == "feature"
                                 ? FrechetSpace::feature
                                 : (cfg.eval.frechet_space == "raw"
                                        ? FrechetSpace::raw
                                        : (cfg.data.dim <= 8 ? FrechetSpace::raw
                                                             : FrechetSpace::feature));

        for (const auto& method_name_str : cfg.unlearn.methods) {
            UnlearnMethod method = parse_method(method_name_str);
            std::string mdir = "unlearn/" + method_name_str;
            std::vector<long> snap_steps;
            run.phase("unlearn:" + method_name_str, [&]() -> std::string {
                fs::create_directories(run.path_of(mdir));
                ModelState st = pretrained;
                auto ucfg = unlearn_run_config(cfg, method);
                auto res = unlearn_loop(
                    st, d_r, d_u, &d_u_prime, ucfg, sched, [&](long step, const ModelState& s) {
                        auto meta = run_meta(cfg, "unlearn", step);
                        meta["method"] = method_name_str;
                        meta["unlearn_class"] = cfg.unlearn.unlearn_class;
                        meta["alternative_class"] = alt;
                        save_checkpoint(run.path_of(mdir + "/" + method_name_str + "_" +
                                                    std::to_string(step) + ".ufcp"),
                                        pack_checkpoint(s, meta));
                        snap_steps.push_back(step);
                    });
                write_unlearn_log_csv(run.path_of(mdir + "/log.csv"), res.log);
                if (res.aborted && snap_steps.empty())
                    throw NumericError("pipeline: no snapshot before abort: " +
                                       res.abort_reason);
                run.record_tree(mdir);
                return res.aborted ? res.abort_reason : std::string{};
            });

            run.phase("eval:unlearn:" + method_name_str, [&]() -> std::string {
                std::vector<EvalReport> reports;
                EvalContext ctx = ectx;
                ctx.samples_per_eval = cfg.eval.curve_samples;
                for (long step : snap_steps) {
                    if (step == snap_steps.back()) ctx.samples_per_eval = cfg.eval.samples_per_eval;
                    auto rep = eval_checkpoint(
                        unpack_checkpoint(load_checkpoint(run.path_of(
                                              mdir + "/" + method_name_str + "_" +
                                              std::to_string(step) + ".ufcp")))
                            .net,
                        sched, EvalPhase::unlearn, step, ctx);
                    std::ofstream js(run.path_of(mdir + "/eval_" + std::to_string(step) +
                                                 ".json"));
                    js << report_to_json(rep).dump(2) << "\n";
                    reports.push_back(rep);
                }
                export_curves(reports, run.path_of(mdir + "/curves.csv"));
                run.record(mdir + "/curves.csv");
                return {};
            });

            for (const auto& aux_name : cfg.attack.aux_modes) {
                AuxMode mode = parse_aux_mode(aux_name);
                std::string adir = "attack/" + method_name_str + "_" + aux_name;
                std::vector<long> attack_steps;
                run.phase("attack:" + method_name_str + ":" + aux_name, [&]() -> std::string {
                    fs::create_directories(run.path_of(adir));
                    auto final_unlearn = run.path_of(
                        mdir + "/" + method_name_str + "_" +
                        std::to_string(snap_steps.back()) + ".ufcp");
                    ModelState st = unpack_checkpoint(load_checkpoint(final_unlearn));
                    LabeledSet aux = build_aux_for_mode(mode, cfg, d_r, data.heldout,
                                                        &pretrained.net, sched);
                    auto acfg = attack_run_config(cfg, method, mode);
                    auto res = attack_loop(
                        st, aux, acfg, sched, [&](long step, const ModelState& s) {
                            auto meta = run_meta(cfg, "attack", step);
                            meta["method"] = method_name_str;
                            meta["aux_mode"] = aux_name;
                            meta["unlearn_class"] = cfg.unlearn.unlearn_class;
                            meta["alternative_class"] = alt;
                            save_checkpoint(run.path_of(adir + "/attack_" +
                                                        std::to_string(step) + ".ufcp"),
                                            pack_checkpoint(s, meta));
                            attack_steps.push_back(step);
                        });
                    write_attack_log_csv(run.path_of(adir + "/log.csv"), res.log);
                    if (res.aborted && attack_steps.empty())
                        throw NumericError("pipeline: no snapshot before abort: " +
                                           res.abort_reason);
                    run.record_tree(adir);
                    return res.aborted ? res.abort_reason : std::string{};
                });

                run.phase("eval:attack:" + method_name_str + ":" + aux_name,
                          [&]() -> std::string {
                    std::vector<EvalReport> reports;
                    EvalContext ctx = ectx;
                    ctx.samples_per_eval = cfg.eval.curve_samples;
                    ctx.compute_frechet = false;
                    for (long step : attack_steps) {
                        if (step == attack_steps.back()) {
                            ctx.samples_per_eval = cfg.eval.samples_per_eval;
                            ctx.compute_frechet = true;
                        }
                        auto rep = eval_checkpoint(
                            unpack_checkpoint(load_checkpoint(run.path_of(
                                                  adir + "/attack_" + std::to_string(step) +
                                                  ".ufcp")))
                                .net,
                            sched, EvalPhase::attack, step, ctx);
                        std::ofstream js(run.path_of(adir + "/eval_" + std::to_string(step) +
                                                     ".json"));
                        js << report_to_json(rep).dump(2) << "\n";
                        reports.push_back(rep);
                    }
                    export_curves(reports, run.path_of(adir + "/curves.csv"));
                    run.record(adir + "/curves.csv");
                    return {};
                });
            }
        }

        run.phase("eval:pretrained", [&]() -> std::string {
            fs::create_directories(run.path_of("eval"));
            nlohmann::json per_class = nlohmann::json::array();
            SamplerConfig scfg;
            scfg.cfg_scale = cfg.eval.cfg_scale;
            scfg.sample_clip = cfg.eval.sample_clip;
            for (int c = 0; c < cfg.data.class_count; ++c) {
                scfg.seed = derive_seed(cfg.seed, "eval.pretrain.class",
                                        static_cast<std::uint64_t>(c));
                Tensor samples =
                    generate(pretrained.net, static_cast<std::size_t>(cfg.eval.samples_per_eval),
                             c, sched, scfg);
                per_class.push_back(accuracy_rate(samples, c, oracle));
            }
            EvalContext ctx = ectx;
            ctx.samples_per_eval = cfg.eval.samples_per_eval;
            auto rep = eval_checkpoint(pretrained.net, sched, EvalPhase::unlearn,
                                       cfg.pretrain.run.steps, ctx);
            nlohmann::json j = report_to_json(rep);
            j["per_class_accuracy"] = per_class;
            j["oracle_heldout_accuracy"] = oracle.heldout_accuracy;
            std::ofstream js(run.path_of("eval/pretrain_report.json"));
            js << j.dump(2) << "\n";
            run.record("eval/pretrain_report.json");
            return {};
        });
    } catch (...) {
        run.write_manifest("incomplete");
        throw;
    }
    run.write_manifest("complete");
    return run.manifest();
}

}  // namespace unforge
