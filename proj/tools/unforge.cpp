// unforge: desk-scale conditional-diffusion unlearning laboratory.
//
// Subcommands compose the full experiment: gen-data -> pretrain ->
// train-oracle -> unlearn -> attack -> eval, or `pipeline` for all of it.

#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "unforge/pipeline.hpp"

using namespace unforge;
namespace fs = std::filesystem;

namespace {

Config load_config_or_default(const std::string& path) {
    if (path.empty()) {
        Config cfg;
        if (const char* env = std::getenv("UF_SEED")) cfg.seed = std::strtoull(env, nullptr, 10);
        return cfg;
    }
    return load_config(path);
}

LabeledSet load_full_dataset(const Config& cfg, const fs::path& data_dir) {
    auto set = read_dataset_csv(data_dir / "full.csv", cfg.data.class_count, SetRole::full);
    if (set.dim() != static_cast<std::size_t>(cfg.data.dim))
        throw ConfigError("dataset dimension " + std::to_string(set.dim()) +
                          " does not match configured dim " + std::to_string(cfg.data.dim));
    return set;
}

LabeledSet load_heldout_dataset(const Config& cfg, const fs::path& data_dir) {
    return read_dataset_csv(data_dir / "heldout.csv", cfg.data.class_count, SetRole::full);
}

void refuse_existing(const fs::path& p, bool force) {
    if (fs::exists(p) && !force)
        throw UsageError("'" + p.string() + "' already exists (use --force to overwrite)");
}

int run_cli(int argc, char** argv) {
    CLI::App app{"desk-scale conditional-diffusion unlearning laboratory"};
    app.require_subcommand(1);
    std::function<void()> action;

    // ---- defaults ----
    auto* c_defaults = app.add_subcommand("defaults", "print the default config as JSON");
    c_defaults->callback([&] {
        action = [] { std::cout << config_to_json(Config{}).dump(2) << "\n"; };
    });

    // ---- gen-data ----
    auto* c_gen = app.add_subcommand("gen-data", "generate the mixture dataset CSVs");
    struct {
        std::string config, out;
        bool force = false;
    } gen;
    c_gen->add_option("--config", gen.config, "config JSON path");
    c_gen->add_option("--out", gen.out, "output directory")->required();
    c_gen->add_flag("--force", gen.force, "overwrite existing files");
    c_gen->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(gen.config);
            fs::path out(gen.out);
            fs::create_directories(out);
            refuse_existing(out / "full.csv", gen.force);
            refuse_existing(out / "heldout.csv", gen.force);
            auto data = generate_data(cfg);
            write_dataset_csv(out / "full.csv", data.full);
            write_dataset_csv(out / "heldout.csv", data.heldout);
            std::cout << "wrote " << (out / "full.csv").string() << " ("
                      << data.full.size() << " rows) and " << (out / "heldout.csv").string()
                      << " (" << data.heldout.size() << " rows)\n";
        };
    });

    // ---- pretrain ----
    auto* c_pre = app.add_subcommand("pretrain", "train the conditional denoiser");
    struct {
        std::string config, data, out, resume;
    } pre;
    c_pre->add_option("--config", pre.config, "config JSON path");
    c_pre->add_option("--data", pre.data, "gen-data output directory")->required();
    c_pre->add_option("--out", pre.out, "output directory")->required();
    c_pre->add_option("--resume", pre.resume, "checkpoint to continue from");
    c_pre->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(pre.config);
            auto data = load_full_dataset(cfg, pre.data);
            NoiseSchedule sched = cfg.make_schedule();
            ModelState st;
            if (!pre.resume.empty()) {
                st = unpack_checkpoint(load_checkpoint(pre.resume));
                auto want = cfg.make_arch();
                if (st.net.arch.param_count() != want.param_count())
                    throw ConfigError("resume checkpoint arch does not match config");
            } else {
                st.net = init_net(cfg.make_arch(), derive_seed(cfg.seed, "init.net"));
                st.schedule = {cfg.schedule.steps, cfg.schedule.beta_start,
                               cfg.schedule.beta_end};
            }
            fs::path out(pre.out);
            fs::create_directories(out);
            auto tc = pretrain_train_config(cfg);
            auto res = pretrain_loop(st, data, tc, sched, [&](long step, const ModelState& s) {
                save_checkpoint(out / ("pretrain_" + std::to_string(step) + ".ufcp"),
                                pack_checkpoint(s, run_meta(cfg, "pretrain", step)));
            });
            write_loss_log_csv(out / "loss.csv", res.log);
            std::cout << "pretrained to step " << st.opt_step_count << ", checkpoints in "
                      << out.string() << "\n";
        };
    });

    // ---- train-oracle ----
    auto* c_orc = app.add_subcommand("train-oracle", "train the frozen evaluation classifier");
    struct {
        std::string config, data, out;
    } orc;
    c_orc->add_option("--config", orc.config, "config JSON path");
    c_orc->add_option("--data", orc.data, "gen-data output directory")->required();
    c_orc->add_option("--out", orc.out, "oracle checkpoint path")->required();
    c_orc->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(orc.config);
            auto full = load_full_dataset(cfg, orc.data);
            auto heldout = load_heldout_dataset(cfg, orc.data);
            auto oracle = train_oracle(full, heldout, oracle_config(cfg));
            auto parent = fs::path(orc.out).parent_path();
            if (!parent.empty()) fs::create_directories(parent);
            save_checkpoint(orc.out, oracle_to_checkpoint(oracle));
            std::cout << "oracle held-out accuracy " << oracle.heldout_accuracy << ", saved to "
                      << orc.out << "\n";
        };
    });

    // ---- unlearn ----
    auto* c_unl = app.add_subcommand("unlearn", "apply an unlearning method to a checkpoint");
    struct {
        std::string config, checkpoint, data, out, method;
        int unlearn_class = -1;
    } unl;
    c_unl->add_option("--config", unl.config, "config JSON path");
    c_unl->add_option("--checkpoint", unl.checkpoint, "pretrained checkpoint")->required();
    c_unl->add_option("--data", unl.data, "gen-data output directory")->required();
    c_unl->add_option("--out", unl.out, "output directory")->required();
    c_unl->add_option("--method", unl.method, "ga_retain | replace | dimum");
    c_unl->add_option("--unlearn-class", unl.unlearn_class, "class id to unlearn");
    c_unl->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(unl.config);
            if (unl.unlearn_class >= 0) cfg.unlearn.unlearn_class = unl.unlearn_class;
            if (cfg.unlearn.unlearn_class >= cfg.data.class_count)
                throw ConfigError("unlearn-class outside [0,C)");
            UnlearnMethod method = parse_method(
                unl.method.empty() ? cfg.unlearn.methods.front() : unl.method);
            auto data = load_full_dataset(cfg, unl.data);
            auto [d_u, d_r] = split_unlearn_retain(data, cfg.unlearn.unlearn_class);
            ConditionId alt = resolve_alternative_class(cfg);
            LabeledSet d_u_prime = build_du_prime(d_r, d_u, alt, d_u.size(),
                                                  derive_seed(cfg.seed, "phase.du_prime"));
            ModelState st = unpack_checkpoint(load_checkpoint(unl.checkpoint));
            NoiseSchedule sched = st.schedule.build();
            fs::path out(unl.out);
            fs::create_directories(out);
            auto ucfg = unlearn_run_config(cfg, method);
            auto res = unlearn_loop(st, d_r, d_u, &d_u_prime, ucfg, sched,
                                    [&](long step, const ModelState& s) {
                                        auto meta = run_meta(cfg, "unlearn", step);
                                        meta["method"] = method_name(method);
                                        meta["unlearn_class"] = cfg.unlearn.unlearn_class;
                                        meta["alternative_class"] = alt;
                                        save_checkpoint(
                                            out / (std::string(method_name(method)) + "_" +
                                                   std::to_string(step) + ".ufcp"),
                                            pack_checkpoint(s, meta));
                                    });
            write_unlearn_log_csv(out / "log.csv", res.log);
            if (res.aborted) throw NumericError(res.abort_reason);
            std::cout << method_name(method) << " finished " << res.completed_steps
                      << " steps, snapshots in " << out.string() << "\n";
        };
    });

    // ---- attack ----
    auto* c_atk = app.add_subcommand("attack", "relearning attack on an unlearned checkpoint");
    struct {
        std::string config, checkpoint, data, out, aux_mode, pretrained;
        bool allow_any = false;
    } atk;
    c_atk->add_option("--config", atk.config, "config JSON path");
    c_atk->add_option("--checkpoint", atk.checkpoint, "unlearned checkpoint")->required();
    c_atk->add_option("--data", atk.data, "gen-data output directory")->required();
    c_atk->add_option("--out", atk.out, "output directory")->required();
    c_atk->add_option("--aux-mode", atk.aux_mode, "retain | heldout | synthetic");
    c_atk->add_option("--pretrained", atk.pretrained,
                      "pretrained checkpoint (synthetic aux mode)");
    c_atk->add_flag("--allow-any", atk.allow_any, "attack even a pretrain-phase checkpoint");
    c_atk->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(atk.config);
            ModelState st = unpack_checkpoint(load_checkpoint(atk.checkpoint));
            auto meta = load_checkpoint(atk.checkpoint).meta();
            if (meta.value("phase", "") == "pretrain" && !atk.allow_any)
                throw UsageError(
                    "checkpoint is from the pretrain phase; pass --allow-any to attack it");
            if (meta.contains("unlearn_class"))
                cfg.unlearn.unlearn_class = meta["unlearn_class"].get<int>();
            AuxMode mode = parse_aux_mode(
                atk.aux_mode.empty() ? cfg.attack.aux_modes.front() : atk.aux_mode);
            auto data = load_full_dataset(cfg, atk.data);
            auto heldout = load_heldout_dataset(cfg, atk.data);
            auto [d_u, d_r] = split_unlearn_retain(data, cfg.unlearn.unlearn_class);
            NoiseSchedule sched = st.schedule.build();
            EpsilonNet pretrained_net;
            const EpsilonNet* pretrained_ptr = nullptr;
            if (mode == AuxMode::synthetic) {
                if (atk.pretrained.empty())
                    throw UsageError("aux mode synthetic needs --pretrained");
                pretrained_net = unpack_checkpoint(load_checkpoint(atk.pretrained)).net;
                pretrained_ptr = &pretrained_net;
            }
            LabeledSet aux = build_aux_for_mode(mode, cfg, d_r, heldout, pretrained_ptr, sched);
            fs::path out(atk.out);
            fs::create_directories(out);
            auto acfg = attack_run_config(cfg, UnlearnMethod::dimum, mode);
            if (meta.contains("method"))
                acfg.seed = derive_seed(cfg.seed, "phase.attack",
                                        site_id(meta["method"].get<std::string>()),
                                        static_cast<std::uint64_t>(mode));
            auto res = attack_loop(st, aux, acfg, sched, [&](long step, const ModelState& s) {
                auto smeta = run_meta(cfg, "attack", step);
                smeta["aux_mode"] = aux_mode_name(mode);
                smeta["unlearn_class"] = cfg.unlearn.unlearn_class;
                if (meta.contains("method")) smeta["method"] = meta["method"];
                if (meta.contains("alternative_class"))
                    smeta["alternative_class"] = meta["alternative_class"];
                save_checkpoint(out / ("attack_" + std::to_string(step) + ".ufcp"),
                                pack_checkpoint(s, smeta));
            });
            write_attack_log_csv(out / "log.csv", res.log);
            if (res.aborted) throw NumericError(res.abort_reason);
            std::cout << "attack (" << aux_mode_name(mode) << ") finished "
                      << res.completed_steps << " steps, snapshots in " << out.string() << "\n";
        };
    });

    // ---- eval ----
    auto* c_eval = app.add_subcommand("eval", "evaluate checkpoints into metric curves");
    struct {
        std::string config, glob, phase = "unlearn", oracle, data, out;
        int samples = 0;
        bool no_frechet = false;
    } ev;
    c_eval->add_option("--config", ev.config, "config JSON path");
    c_eval->add_option("--checkpoints-glob", ev.glob, "glob of checkpoints")->required();
    c_eval->add_option("--phase", ev.phase, "unlearn | attack");
    c_eval->add_option("--oracle", ev.oracle, "oracle checkpoint")->required();
    c_eval->add_option("--data", ev.data, "gen-data output directory")->required();
    c_eval->add_option("--out", ev.out, "output directory")->required();
    c_eval->add_option("--samples", ev.samples, "samples per evaluation");
    c_eval->add_flag("--no-frechet", ev.no_frechet, "skip the distribution distance");
    c_eval->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(ev.config);
            if (ev.phase != "unlearn" && ev.phase != "attack")
                throw ConfigError("eval: phase must be unlearn or attack");
            auto oracle = oracle_from_checkpoint(load_checkpoint(ev.oracle));
            auto found = find_checkpoints(ev.glob);
            auto first_meta = load_checkpoint(found.front().path).meta();
            int unlearn_class = first_meta.value("unlearn_class", cfg.unlearn.unlearn_class);
            int alt = first_meta.value("alternative_class",
                                       static_cast<int>(resolve_alternative_class(cfg)));
            auto data = load_full_dataset(cfg, ev.data);
            auto [d_u, d_r] = split_unlearn_retain(data, unlearn_class);
            fs::path out(ev.out);
            fs::create_directories(out);
            EvalContext ctx;
            ctx.unlearn_class = unlearn_class;
            ctx.alternative_class = alt;
            ctx.retain_reference = &d_r;
            ctx.oracle = &oracle;
            ctx.cfg_scale = cfg.eval.cfg_scale;
            ctx.samples_per_eval = ev.samples > 0 ? ev.samples : cfg.eval.samples_per_eval;
            ctx.compute_frechet = !ev.no_frechet;
            ctx.frechet_space = cfg.data.dim <= 8 ? FrechetSpace::raw : FrechetSpace::feature;
            ctx.seed = derive_seed(cfg.seed, "phase.eval");
            std::vector<EvalReport> reports;
            for (const auto& f : found) {
                ModelState st = unpack_checkpoint(load_checkpoint(f.path));
                auto rep = eval_checkpoint(st.net, st.schedule.build(),
                                           ev.phase == "unlearn" ? EvalPhase::unlearn
                                                                 : EvalPhase::attack,
                                           f.step, ctx);
                std::ofstream js(out / (f.path.stem().string() + ".eval.json"));
                js << report_to_json(rep).dump(2) << "\n";
                reports.push_back(rep);
            }
            export_curves(reports, out / "curves.csv");
            std::cout << "evaluated " << reports.size() << " checkpoints into "
                      << (out / "curves.csv").string() << "\n";
        };
    });

    // ---- sample ----
    auto* c_smp = app.add_subcommand("sample", "draw samples from a checkpoint");
    struct {
        std::string checkpoint, out;
        int count = 100;
        int condition = 0;
        float cfg_scale = -1.0f;
        float clip = 20.0f;
        std::uint64_t seed = 1;
    } smp;
    c_smp->add_option("--checkpoint", smp.checkpoint, "model checkpoint")->required();
    c_smp->add_option("--out", smp.out, "samples CSV path")->required();
    c_smp->add_option("--count", smp.count, "number of samples");
    c_smp->add_option("--condition", smp.condition, "condition id");
    c_smp->add_option("--cfg-scale", smp.cfg_scale, "guidance scale");
    c_smp->add_option("--clip", smp.clip, "reverse-iterate clamp (0 disables)");
    c_smp->add_option("--seed", smp.seed, "sampling seed");
    c_smp->callback([&] {
        action = [&] {
            ModelState st = unpack_checkpoint(load_checkpoint(smp.checkpoint));
            SamplerConfig scfg;
            scfg.cfg_scale = smp.cfg_scale >= 0 ? smp.cfg_scale : 2.0f;
            scfg.sample_clip = smp.clip;
            scfg.seed = smp.seed;
            if (smp.count < 0) throw ConfigError("sample: count must be >= 0");
            Tensor samples = generate(st.net, static_cast<std::size_t>(smp.count),
                                      smp.condition, st.schedule.build(), scfg);
            write_samples_csv(smp.out, samples, smp.condition);
            std::cout << "wrote " << smp.count << " samples to " << smp.out << "\n";
        };
    });

    // ---- pipeline ----
    auto* c_pipe = app.add_subcommand("pipeline", "run the full experiment end to end");
    struct {
        std::string config, out;
        bool force = false;
    } pipe;
    c_pipe->add_option("--config", pipe.config, "config JSON path");
    c_pipe->add_option("--out", pipe.out, "run directory")->required();
    c_pipe->add_flag("--force", pipe.force, "run into a non-empty directory");
    c_pipe->callback([&] {
        action = [&] {
            Config cfg = load_config_or_default(pipe.config);
            auto manifest = run_pipeline(cfg, pipe.out, pipe.force);
            double total = 0;
            for (const auto& p : manifest.phases) total += p.seconds;
            std::cout << "pipeline complete: " << manifest.artifacts.size() << " artifacts, "
                      << total << " s\n";
        };
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }
    action();
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run_cli(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric abort: " << e.what() << "\n";
        return 3;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
