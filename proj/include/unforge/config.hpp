#pragma once

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "unforge/adam.hpp"
#include "unforge/data.hpp"
#include "unforge/epsnet.hpp"
#include "unforge/errors.hpp"

namespace unforge {

constexpr int kConfigVersion = 1;

namespace detail {

// Tracks which keys a section consumed; anything left over is a config error,
// so typos never pass silently.
class StrictView {
public:
    StrictView(const nlohmann::json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
    }

    template <typename T>
    T get(const char* key, T fallback) {
        seen_.insert(key);
        if (!j_.contains(key)) return fallback;
        return convert<T>(key);
    }

    template <typename T>
    T require(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key)) throw ConfigError(path_ + ": missing required key '" + key + "'");
        return convert<T>(key);
    }

    const nlohmann::json* sub(const char* key) {
        seen_.insert(key);
        if (!j_.contains(key)) return nullptr;
        return &j_.at(key);
    }

    void finish() const {
        for (auto it = j_.begin(); it != j_.end(); ++it)
            if (!seen_.count(it.key()))
                throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
    }

private:
    const nlohmann::json& j_;
    std::string path_;
    std::set<std::string> seen_;

    template <typename T>
    T convert(const char* key) {
        try {
            return j_.at(key).get<T>();
        } catch (const nlohmann::json::exception&) {
            throw ConfigError(path_ + ": bad value type for '" + key + "'");
        }
    }
};

}  // namespace detail

struct DataConfig {
    int dim = 2;
    int class_count = 3;
    int samples_per_class = 1000;
    int heldout_per_class = 200;
    double class_spacing = 3.0;
    double component_offset = 0.7;
    double component_var = 0.3;
    nlohmann::json custom_classes;  // optional explicit mixture components
};

struct PhaseOptim {
    int steps = 0;
    int batch_size = 128;
    OptimConfig optim;
};

struct PretrainSection {
    PhaseOptim run{5000, 128, {}};
    float p_uncond = 0.1f;
    int checkpoint_every = 1000;
};

struct UnlearnSection {
    PhaseOptim run{2000, 128, {1e-4f}};
    // Per-method learning rates: the divergent ascent needs a hot rate to stay
    // in its gross-damage regime while the two replacement losses rewire at
    // gentler rates.
    std::map<std::string, float> method_lr = {
        {"ga_retain", 7.5e-5f}, {"replace", 1.6e-5f}, {"dimum", 5e-4f}};
    std::vector<std::string> methods = {"ga_retain", "replace", "dimum"};
    float balance_coef = 1.0f;
    int unlearn_class = 1;  // interior condition: neighbors bracket its encoding
    int alternative_class = -1;  // -1: next class after the unlearning class
    int snapshot_every = 100;
    double abort_threshold = 1e6;
};

struct AttackSection {
    PhaseOptim run{6000, 128, {1e-4f}};
    float p_uncond = 0.0f;
    std::vector<std::string> aux_modes = {"retain"};
    int snapshot_every = 100;
    int synthetic_per_class = 200;
};

struct EvalSection {
    int samples_per_eval = 500;
    float sample_clip = 20.0f;
    int curve_samples = 250;
    float cfg_scale = 2.0f;
    std::string frechet_space = "auto";  // auto | raw | feature
    int oracle_steps = 3000;
    int oracle_batch = 128;
    float oracle_lr = 1e-3f;
    int oracle_hidden = 64;
    int oracle_depth = 2;
    double oracle_min_accuracy = 0.95;
};

struct ArchSection {
    int hidden_width = 32;
    int depth = 2;
    int time_embed_dim = 16;
    double cond_spacing = 3.0;
};

struct ScheduleSection {
    int steps = 100;
    double beta_start = 1e-3;
    double beta_end = 0.2;
};

struct Config {
    int config_version = kConfigVersion;
    std::uint64_t seed = 1;
    DataConfig data;
    ArchSection arch;
    ScheduleSection schedule;
    PretrainSection pretrain;
    UnlearnSection unlearn;
    AttackSection attack;
    EvalSection eval;

    EpsNetArch make_arch() const {
        EpsNetArch a;
        a.dim = data.dim;
        a.class_count = data.class_count;
        a.hidden_width = arch.hidden_width;
        a.depth = arch.depth;
        a.time_embed_dim = arch.time_embed_dim;
        a.cond_spacing = arch.cond_spacing;
        a.time_horizon = schedule.steps;
        a.validate();
        return a;
    }

    NoiseSchedule make_schedule() const {
        return make_linear_schedule(schedule.steps, schedule.beta_start, schedule.beta_end);
    }
};

namespace detail {

// Classes evenly spaced along the first axis, two components per class offset
// perpendicular to it. Matches the line layout of the condition encodings so
// nearby conditions mean nearby data.
inline MixtureSpec default_mixture(const DataConfig& d, int per_class) {
    MixtureSpec spec;
    spec.class_count = d.class_count;
    spec.dim = d.dim;
    spec.samples_per_class = per_class;
    for (int c = 0; c < d.class_count; ++c) {
        double center = (c - 0.5 * (d.class_count - 1)) * d.class_spacing;
        ClassSpec cls;
        for (int k = 0; k < 2; ++k) {
            GaussComponent comp;
            double off = (k == 0) ? -d.component_offset : d.component_offset;
            comp.mean.assign(static_cast<std::size_t>(d.dim), 0.0);
            comp.mean[0] = center;
            if (d.dim > 1) comp.mean[1] = off;
            comp.cov.assign(static_cast<std::size_t>(d.dim),
                            std::vector<double>(static_cast<std::size_t>(d.dim), 0.0));
            for (int j = 0; j < d.dim; ++j)
                comp.cov[static_cast<std::size_t>(j)][static_cast<std::size_t>(j)] =
                    d.component_var;
            comp.weight = 0.5;
            cls.components.push_back(std::move(comp));
        }
        spec.classes.push_back(std::move(cls));
    }
    return spec;
}

inline MixtureSpec custom_mixture(const DataConfig& d, int per_class) {
    MixtureSpec spec;
    spec.class_count = d.class_count;
    spec.dim = d.dim;
    spec.samples_per_class = per_class;
    for (std::size_t c = 0; c < d.custom_classes.size(); ++c) {
        StrictView cv(d.custom_classes.at(c), "data.classes[" + std::to_string(c) + "]");
        const auto* comps = cv.sub("components");
        if (!comps || !comps->is_array())
            throw ConfigError("data.classes: each class needs a components array");
        ClassSpec cls;
        for (std::size_t k = 0; k < comps->size(); ++k) {
            StrictView comp(comps->at(k), "data.classes[" + std::to_string(c) +
                                              "].components[" + std::to_string(k) + "]");
            GaussComponent gc;
            gc.mean = comp.require<std::vector<double>>("mean");
            gc.cov = comp.require<std::vector<std::vector<double>>>("cov");
            gc.weight = comp.get<double>("weight", 1.0);
            comp.finish();
            cls.components.push_back(std::move(gc));
        }
        cv.finish();
        spec.classes.push_back(std::move(cls));
    }
    return spec;
}

}  // namespace detail

inline MixtureSpec make_mixture_spec(const DataConfig& d, int per_class) {
    MixtureSpec spec = d.custom_classes.is_array() && !d.custom_classes.empty()
                           ? detail::custom_mixture(d, per_class)
                           : detail::default_mixture(d, per_class);
    spec.validate();
    return spec;
}

namespace detail {

inline OptimConfig parse_optim(StrictView& v, float default_lr) {
    OptimConfig o;
    o.lr = v.get<float>("lr", default_lr);
    o.beta1 = v.get<float>("beta1", 0.9f);
    o.beta2 = v.get<float>("beta2", 0.999f);
    o.eps_stab = v.get<float>("eps_stab", 1e-8f);
    o.validate();
    return o;
}

}  // namespace detail

inline Config parse_config(const nlohmann::json& j) {
    detail::StrictView root(j, "config");
    Config cfg;
    cfg.config_version = root.get<int>("config_version", kConfigVersion);
    if (cfg.config_version != kConfigVersion)
        throw ConfigError("config: unsupported config_version " +
                          std::to_string(cfg.config_version));
    cfg.seed = root.get<std::uint64_t>("seed", 1);

    if (const auto* jd = root.sub("data")) {
        detail::StrictView v(*jd, "data");
        cfg.data.dim = v.get<int>("dim", cfg.data.dim);
        cfg.data.class_count = v.get<int>("class_count", cfg.data.class_count);
        cfg.data.samples_per_class = v.get<int>("samples_per_class", cfg.data.samples_per_class);
        cfg.data.heldout_per_class = v.get<int>("heldout_per_class", cfg.data.heldout_per_class);
        cfg.data.class_spacing = v.get<double>("class_spacing", cfg.data.class_spacing);
        cfg.data.component_offset = v.get<double>("component_offset", cfg.data.component_offset);
        cfg.data.component_var = v.get<double>("component_var", cfg.data.component_var);
        if (const auto* jc = v.sub("classes")) cfg.data.custom_classes = *jc;
        v.finish();
        if (cfg.data.dim < 1 || cfg.data.class_count < 2 || cfg.data.samples_per_class < 1 ||
            cfg.data.heldout_per_class < 1)
            throw ConfigError("data: dimensions and sample counts must be positive");
    }
    if (const auto* ja = root.sub("arch")) {
        detail::StrictView v(*ja, "arch");
        cfg.arch.hidden_width = v.get<int>("hidden_width", cfg.arch.hidden_width);
        cfg.arch.depth = v.get<int>("depth", cfg.arch.depth);
        cfg.arch.time_embed_dim = v.get<int>("time_embed_dim", cfg.arch.time_embed_dim);
        cfg.arch.cond_spacing = v.get<double>("cond_spacing", cfg.arch.cond_spacing);
        v.finish();
    }
    if (const auto* js = root.sub("schedule")) {
        detail::StrictView v(*js, "schedule");
        cfg.schedule.steps = v.get<int>("steps", cfg.schedule.steps);
        cfg.schedule.beta_start = v.get<double>("beta_start", cfg.schedule.beta_start);
        cfg.schedule.beta_end = v.get<double>("beta_end", cfg.schedule.beta_end);
        v.finish();
    }
    if (const auto* jp = root.sub("pretrain")) {
        detail::StrictView v(*jp, "pretrain");
        cfg.pretrain.run.steps = v.get<int>("steps", cfg.pretrain.run.steps);
        cfg.pretrain.run.batch_size = v.get<int>("batch_size", cfg.pretrain.run.batch_size);
        cfg.pretrain.run.optim = detail::parse_optim(v, 1e-3f);
        cfg.pretrain.p_uncond = v.get<float>("p_uncond", cfg.pretrain.p_uncond);
        cfg.pretrain.checkpoint_every = v.get<int>("checkpoint_every",
                                                   cfg.pretrain.checkpoint_every);
        v.finish();
        if (cfg.pretrain.run.steps < 0 || cfg.pretrain.run.batch_size < 1)
            throw ConfigError("pretrain: bad steps or batch_size");
        if (!(cfg.pretrain.p_uncond >= 0.0f && cfg.pretrain.p_uncond < 1.0f))
            throw ConfigError("pretrain: p_uncond must be in [0,1)");
    }
    if (const auto* ju = root.sub("unlearn")) {
        detail::StrictView v(*ju, "unlearn");
        cfg.unlearn.run.steps = v.get<int>("steps", cfg.unlearn.run.steps);
        cfg.unlearn.run.batch_size = v.get<int>("batch_size", cfg.unlearn.run.batch_size);
        cfg.unlearn.run.optim = detail::parse_optim(v, 1e-4f);
        cfg.unlearn.methods = v.get<std::vector<std::string>>("methods", cfg.unlearn.methods);
        if (const auto* jm = v.sub("method_lr")) {
            detail::StrictView mv(*jm, "unlearn.method_lr");
            for (const char* m : {"ga_retain", "replace", "dimum"}) {
                float lr = mv.get<float>(m, -1.0f);
                if (lr > 0) cfg.unlearn.method_lr[m] = lr;
            }
            mv.finish();
        }
        cfg.unlearn.balance_coef = v.get<float>("balance_coef", cfg.unlearn.balance_coef);
        cfg.unlearn.unlearn_class = v.get<int>("unlearn_class", cfg.unlearn.unlearn_class);
        cfg.unlearn.alternative_class = v.get<int>("alternative_class",
                                                   cfg.unlearn.alternative_class);
        cfg.unlearn.snapshot_every = v.get<int>("snapshot_every", cfg.unlearn.snapshot_every);
        cfg.unlearn.abort_threshold = v.get<double>("abort_threshold",
                                                    cfg.unlearn.abort_threshold);
        v.finish();
        if (!(cfg.unlearn.balance_coef > 0)) throw ConfigError("unlearn: balance_coef must be > 0");
        for (const auto& m : cfg.unlearn.methods)
            if (m != "ga_retain" && m != "replace" && m != "dimum")
                throw ConfigError("unlearn: unknown method '" + m + "'");
    }
    if (const auto* jt = root.sub("attack")) {
        detail::StrictView v(*jt, "attack");
        cfg.attack.run.steps = v.get<int>("steps", cfg.attack.run.steps);
        cfg.attack.run.batch_size = v.get<int>("batch_size", cfg.attack.run.batch_size);
        cfg.attack.run.optim = detail::parse_optim(v, 1e-4f);
        cfg.attack.p_uncond = v.get<float>("p_uncond", cfg.attack.p_uncond);
        if (!(cfg.attack.p_uncond >= 0.0f && cfg.attack.p_uncond < 1.0f))
            throw ConfigError("attack: p_uncond must be in [0,1)");
        cfg.attack.aux_modes = v.get<std::vector<std::string>>("aux_modes", cfg.attack.aux_modes);
        cfg.attack.snapshot_every = v.get<int>("snapshot_every", cfg.attack.snapshot_every);
        cfg.attack.synthetic_per_class = v.get<int>("synthetic_per_class",
                                                    cfg.attack.synthetic_per_class);
        v.finish();
        for (const auto& m : cfg.attack.aux_modes)
            if (m != "retain" && m != "heldout" && m != "synthetic")
                throw ConfigError("attack: unknown aux mode '" + m + "'");
    }
    if (const auto* je = root.sub("eval")) {
        detail::StrictView v(*je, "eval");
        cfg.eval.samples_per_eval = v.get<int>("samples_per_eval", cfg.eval.samples_per_eval);
        cfg.eval.sample_clip = v.get<float>("sample_clip", cfg.eval.sample_clip);
        if (!(cfg.eval.sample_clip >= 0.0f))
            throw ConfigError("eval: sample_clip must be >= 0");
        cfg.eval.curve_samples = v.get<int>("curve_samples", cfg.eval.curve_samples);
        cfg.eval.cfg_scale = v.get<float>("cfg_scale", cfg.eval.cfg_scale);
        cfg.eval.frechet_space = v.get<std::string>("frechet_space", cfg.eval.frechet_space);
        cfg.eval.oracle_steps = v.get<int>("oracle_steps", cfg.eval.oracle_steps);
        cfg.eval.oracle_batch = v.get<int>("oracle_batch", cfg.eval.oracle_batch);
        cfg.eval.oracle_lr = v.get<float>("oracle_lr", cfg.eval.oracle_lr);
        cfg.eval.oracle_hidden = v.get<int>("oracle_hidden", cfg.eval.oracle_hidden);
        cfg.eval.oracle_depth = v.get<int>("oracle_depth", cfg.eval.oracle_depth);
        cfg.eval.oracle_min_accuracy = v.get<double>("oracle_min_accuracy",
                                                     cfg.eval.oracle_min_accuracy);
        v.finish();
        if (cfg.eval.frechet_space != "auto" && cfg.eval.frechet_space != "raw" &&
            cfg.eval.frechet_space != "feature")
            throw ConfigError("eval: frechet_space must be auto, raw, or feature");
        if (cfg.eval.samples_per_eval < 1 || cfg.eval.curve_samples < 1)
            throw ConfigError("eval: sample counts must be positive");
    }
    root.finish();

    cfg.make_arch();     // validates arch against data/schedule
    cfg.make_schedule();  // validates schedule ranges
    if (cfg.unlearn.unlearn_class < 0 || cfg.unlearn.unlearn_class >= cfg.data.class_count)
        throw ConfigError("unlearn: unlearn_class outside [0,C)");
    if (cfg.unlearn.alternative_class >= cfg.data.class_count)
        throw ConfigError("unlearn: alternative_class outside [0,C)");
    if (cfg.unlearn.alternative_class == cfg.unlearn.unlearn_class)
        throw ConfigError("unlearn: alternative_class equals unlearn_class");
    return cfg;
}

inline nlohmann::json config_to_json(const Config& cfg) {
    nlohmann::json j;
    j["config_version"] = cfg.config_version;
    j["seed"] = cfg.seed;
    j["data"] = {{"dim", cfg.data.dim},
                 {"class_count", cfg.data.class_count},
                 {"samples_per_class", cfg.data.samples_per_class},
                 {"heldout_per_class", cfg.data.heldout_per_class},
                 {"class_spacing", cfg.data.class_spacing},
                 {"component_offset", cfg.data.component_offset},
                 {"component_var", cfg.data.component_var}};
    if (cfg.data.custom_classes.is_array() && !cfg.data.custom_classes.empty())
        j["data"]["classes"] = cfg.data.custom_classes;
    j["arch"] = {{"hidden_width", cfg.arch.hidden_width},
                 {"depth", cfg.arch.depth},
                 {"time_embed_dim", cfg.arch.time_embed_dim},
                 {"cond_spacing", cfg.arch.cond_spacing}};
    j["schedule"] = {{"steps", cfg.schedule.steps},
                     {"beta_start", cfg.schedule.beta_start},
                     {"beta_end", cfg.schedule.beta_end}};
    auto optim_json = [](const OptimConfig& o) {
        return nlohmann::json{{"lr", o.lr},
                              {"beta1", o.beta1},
                              {"beta2", o.beta2},
                              {"eps_stab", o.eps_stab}};
    };
    j["pretrain"] = optim_json(cfg.pretrain.run.optim);
    j["pretrain"]["steps"] = cfg.pretrain.run.steps;
    j["pretrain"]["batch_size"] = cfg.pretrain.run.batch_size;
    j["pretrain"]["p_uncond"] = cfg.pretrain.p_uncond;
    j["pretrain"]["checkpoint_every"] = cfg.pretrain.checkpoint_every;
    j["unlearn"] = optim_json(cfg.unlearn.run.optim);
    j["unlearn"]["steps"] = cfg.unlearn.run.steps;
    j["unlearn"]["batch_size"] = cfg.unlearn.run.batch_size;
    j["unlearn"]["methods"] = cfg.unlearn.methods;
    if (!cfg.unlearn.method_lr.empty()) {
        nlohmann::json ml;
        for (const auto& [k, v] : cfg.unlearn.method_lr) ml[k] = v;
        j["unlearn"]["method_lr"] = ml;
    }
    j["unlearn"]["balance_coef"] = cfg.unlearn.balance_coef;
    j["unlearn"]["unlearn_class"] = cfg.unlearn.unlearn_class;
    j["unlearn"]["alternative_class"] = cfg.unlearn.alternative_class;
    j["unlearn"]["snapshot_every"] = cfg.unlearn.snapshot_every;
    j["unlearn"]["abort_threshold"] = cfg.unlearn.abort_threshold;
    j["attack"] = optim_json(cfg.attack.run.optim);
    j["attack"]["steps"] = cfg.attack.run.steps;
    j["attack"]["batch_size"] = cfg.attack.run.batch_size;
    j["attack"]["p_uncond"] = cfg.attack.p_uncond;
    j["attack"]["aux_modes"] = cfg.attack.aux_modes;
    j["attack"]["snapshot_every"] = cfg.attack.snapshot_every;
    j["attack"]["synthetic_per_class"] = cfg.attack.synthetic_per_class;
    j["eval"] = {{"samples_per_eval", cfg.eval.samples_per_eval},
                 {"sample_clip", cfg.eval.sample_clip},
                 {"curve_samples", cfg.eval.curve_samples},
                 {"cfg_scale", cfg.eval.cfg_scale},
                 {"frechet_space", cfg.eval.frechet_space},
                 {"oracle_steps", cfg.eval.oracle_steps},
                 {"oracle_batch", cfg.eval.oracle_batch},
                 {"oracle_lr", cfg.eval.oracle_lr},
                 {"oracle_hidden", cfg.eval.oracle_hidden},
                 {"oracle_depth", cfg.eval.oracle_depth},
                 {"oracle_min_accuracy", cfg.eval.oracle_min_accuracy}};
    return j;
}

// Loads a config file, applying the UF_SEED environment override if present.
inline Config load_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path.string() + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("config '" + path.string() + "': " + e.what());
    }
    Config cfg = parse_config(j);
    if (const char* env = std::getenv("UF_SEED")) {
        char* end = nullptr;
        unsigned long long v = std::strtoull(env, &end, 10);
        if (end == env || *end != '\0') throw ConfigError("UF_SEED is not an integer");
        cfg.seed = v;
    }
    return cfg;
}

}  // namespace unforge
