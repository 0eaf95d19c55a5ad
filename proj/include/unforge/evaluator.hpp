#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "unforge/adam.hpp"
#include "unforge/data.hpp"
#include "unforge/graph.hpp"
#include "unforge/losses.hpp"
#include "unforge/sampler.hpp"

namespace unforge {

// ---- oracle classifier ----

struct OracleConfig {
    int hidden_width = 64;
    int depth = 2;
    long steps = 3000;
    int batch_size = 128;
    OptimConfig optim{1e-3f};
    double min_accuracy = 0.95;
    std::uint64_t seed = 1;
};

// Frozen MLP classifier used for every accuracy-rate metric; its last hidden
// activations double as the feature space for distribution distances.
struct OracleClassifier {
    int dim = 2;
    int class_count = 3;
    int hidden_width = 64;
    int depth = 2;
    ParamStore params;
    double heldout_accuracy = 0.0;
};

namespace detail {

template <typename T>
typename GraphT<T>::Id oracle_graph_logits(GraphT<T>& g, ParamStoreT<T>& params,
                                           const OracleClassifier& oc, const TensorT<T>& x) {
    auto h = g.input(x);
    for (int k = 1; k <= oc.depth; ++k) {
        auto w = g.param(params, "o" + std::to_string(k) + ".w");
        auto b = g.param(params, "o" + std::to_string(k) + ".b");
        h = g.silu(g.affine(h, w, b));
    }
    return g.affine(h, g.param(params, "out.w"), g.param(params, "out.b"));
}

}  // namespace detail

// logits plus, optionally, the last hidden activations
inline Tensor oracle_logits(const OracleClassifier& oc, const Tensor& x,
                            Tensor* features = nullptr) {
    auto& ps = const_cast<ParamStore&>(oc.params);
    Tensor h = x;
    for (int k = 1; k <= oc.depth; ++k) {
        Tensor next;
        detail::affine_forward(h, ps.at("o" + std::to_string(k) + ".w").value,
                               ps.at("o" + std::to_string(k) + ".b").value, next);
        for (auto& v : next.data) v = v * kernels::sigmoid(v);
        h = std::move(next);
    }
    if (features) *features = h;
    Tensor logits;
    detail::affine_forward(h, ps.at("out.w").value, ps.at("out.b").value, logits);
    return logits;
}

inline std::vector<int> oracle_classify(const OracleClassifier& oc, const Tensor& x) {
    Tensor logits = oracle_logits(oc, x);
    std::vector<int> out(logits.rows());
    for (std::size_t i = 0; i < logits.rows(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < logits.cols(); ++j)
            if (logits(i, j) > logits(i, best)) best = j;
        out[i] = static_cast<int>(best);
    }
    return out;
}

inline double oracle_accuracy(const OracleClassifier& oc, const LabeledSet& set) {
    auto preds = oracle_classify(oc, set.points);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < preds.size(); ++i)
        if (preds[i] == set.labels[i]) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// Cross-entropy training; fails if the held-out accuracy does not reach the
// configured floor, since the accuracy-rate metrics are meaningless then.
inline OracleClassifier train_oracle(const LabeledSet& train, const LabeledSet& heldout,
                                     const OracleConfig& cfg) {
    for (int c = 0; c < train.class_count; ++c)
        if (!train.contains_label(c))
            throw ConfigError("oracle: training data misses class " + std::to_string(c));
    OracleClassifier oc;
    oc.dim = static_cast<int>(train.dim());
    oc.class_count = train.class_count;
    oc.hidden_width = cfg.hidden_width;
    oc.depth = cfg.depth;
    std::size_t w = static_cast<std::size_t>(cfg.hidden_width);
    int s = 0;
    auto add = [&](const std::string& name, std::vector<std::size_t> shape, float bound) {
        StreamRng rng(cfg.seed, site_id("oracle.init"), static_cast<std::uint64_t>(s++));
        oc.params.add(name, detail::uniform_init(std::move(shape), bound, rng));
    };
    std::size_t in_dim = static_cast<std::size_t>(oc.dim);
    for (int k = 1; k <= cfg.depth; ++k) {
        add("o" + std::to_string(k) + ".w", {in_dim, w}, 1.0f / std::sqrt((float)in_dim));
        add("o" + std::to_string(k) + ".b", {w}, 1.0f / std::sqrt((float)in_dim));
        in_dim = w;
    }
    add("out.w", {in_dim, static_cast<std::size_t>(oc.class_count)},
        1.0f / std::sqrt((float)in_dim));
    add("out.b", {static_cast<std::size_t>(oc.class_count)}, 1.0f / std::sqrt((float)in_dim));

    OptimConfig optim = cfg.optim;
    auto state = AdamState::init(oc.params);
    for (long step = 1; step <= cfg.steps; ++step) {
        StreamRng rng(cfg.seed, site_id("oracle.batch"), static_cast<std::uint64_t>(step));
        std::size_t b = static_cast<std::size_t>(cfg.batch_size);
        Tensor x({b, static_cast<std::size_t>(oc.dim)});
        std::vector<int> y(b);
        for (std::size_t i = 0; i < b; ++i) {
            std::size_t r = rng.uniform_int(train.size());
            for (std::size_t j = 0; j < train.dim(); ++j) x(i, j) = train.points(r, j);
            y[i] = train.labels[r];
        }
        oc.params.zero_grads();
        Graph g;
        auto logits = detail::oracle_graph_logits(g, oc.params, oc, x);
        g.backward(g.cross_entropy(logits, y));
        adam_step(oc.params, optim, state);
    }
    oc.heldout_accuracy = oracle_accuracy(oc, heldout);
    if (oc.heldout_accuracy < cfg.min_accuracy)
        throw ConfigError("oracle: held-out accuracy " + std::to_string(oc.heldout_accuracy) +
                          " below required " + std::to_string(cfg.min_accuracy));
    return oc;
}

// fraction of samples the oracle assigns to target_class
inline double accuracy_rate(const Tensor& samples, ConditionId target_class,
                            const OracleClassifier& oracle) {
    if (samples.rows() == 0) throw UsageError("accuracy_rate: no samples");
    auto preds = oracle_classify(oracle, samples);
    std::size_t hits = 0;
    for (int p : preds)
        if (p == target_class) ++hits;
    return static_cast<double>(hits) / static_cast<double>(preds.size());
}

// ---- Frechet distance between Gaussian fits ----

namespace detail {

// cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n*n)
inline void jacobi_eig(std::vector<double>& a, int n, std::vector<double>& eigvals,
                       std::vector<double>& V) {
    V.assign(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i) V[static_cast<std::size_t>(i) * n + i] = 1.0;
    auto at = [&](int i, int j) -> double& { return a[static_cast<std::size_t>(i) * n + j]; };
    for (int sweep = 0; sweep < 100; ++sweep) {
        double off = 0;
        for (int i = 0; i < n; ++i)
            for (int j = i + 1; j < n; ++j) off += at(i, j) * at(i, j);
        if (off < 1e-24) break;
        for (int p = 0; p < n - 1; ++p)
            for (int q = p + 1; q < n; ++q) {
                if (std::abs(at(p, q)) < 1e-300) continue;
                double theta = (at(q, q) - at(p, p)) / (2.0 * at(p, q));
                double t = (theta >= 0 ? 1.0 : -1.0) /
                           (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double sgn = t * c;
                for (int k = 0; k < n; ++k) {
                    double akp = at(k, p), akq = at(k, q);
                    at(k, p) = c * akp - sgn * akq;
                    at(k, q) = sgn * akp + c * akq;
                }
                for (int k = 0; k < n; ++k) {
                    double apk = at(p, k), aqk = at(q, k);
                    at(p, k) = c * apk - sgn * aqk;
                    at(q, k) = sgn * apk + c * aqk;
                }
                for (int k = 0; k < n; ++k) {
                    double vkp = V[static_cast<std::size_t>(k) * n + p];
                    double vkq = V[static_cast<std::size_t>(k) * n + q];
                    V[static_cast<std::size_t>(k) * n + p] = c * vkp - sgn * vkq;
                    V[static_cast<std::size_t>(k) * n + q] = sgn * vkp + c * vkq;
                }
            }
    }
    eigvals.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) eigvals[static_cast<std::size_t>(i)] = at(i, i);
}

// principal square root of a symmetric PSD matrix; negative eigenvalues from
// roundoff are clamped to zero
inline std::vector<double> sym_sqrt(std::vector<double> m, int n) {
    std::vector<double> eig, V;
    jacobi_eig(m, n, eig, V);
    std::vector<double> out(static_cast<std::size_t>(n) * n, 0.0);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double acc = 0;
            for (int k = 0; k < n; ++k) {
                double lam = eig[static_cast<std::size_t>(k)];
                if (lam > 0)
                    acc += V[static_cast<std::size_t>(i) * n + k] * std::sqrt(lam) *
                           V[static_cast<std::size_t>(j) * n + k];
            }
            out[static_cast<std::size_t>(i) * n + j] = acc;
        }
    return out;
}

inline double min_eigenvalue(std::vector<double> m, int n) {
    std::vector<double> eig, V;
    jacobi_eig(m, n, eig, V);
    return *std::min_element(eig.begin(), eig.end());
}

struct GaussianFit {
    std::vector<double> mean;
    std::vector<double> cov;  // row-major d*d, unbiased estimate
};

inline GaussianFit fit_gaussian(const Tensor& pts) {
    std::size_t n = pts.rows(), d = pts.cols();
    GaussianFit fit;
    fit.mean.assign(d, 0.0);
    fit.cov.assign(d * d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) fit.mean[j] += pts(i, j);
    for (auto& v : fit.mean) v /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = j; k < d; ++k)
                fit.cov[j * d + k] += (pts(i, j) - fit.mean[j]) * (pts(i, k) - fit.mean[k]);
    for (std::size_t j = 0; j < d; ++j)
        for (std::size_t k = j; k < d; ++k) {
            fit.cov[j * d + k] /= static_cast<double>(n - 1);
            fit.cov[k * d + j] = fit.cov[j * d + k];
        }
    return fit;
}

}  // namespace detail

enum class FrechetSpace { raw, feature };

struct FrechetResult {
    double value = 0.0;
    bool regularized = false;
};

// || mu_A - mu_B ||^2 + Tr(S_A + S_B - 2 (S_A S_B)^{1/2}), the matrix root
// taken on the symmetrized product. Singular covariances get 1e-6 I added and
// the result is flagged.
inline FrechetResult frechet_distance(const Tensor& A, const Tensor& B,
                                      FrechetSpace space = FrechetSpace::raw,
                                      const OracleClassifier* oracle = nullptr) {
    Tensor Xa = A, Xb = B;
    if (space == FrechetSpace::feature) {
        if (!oracle) throw UsageError("frechet: feature space needs an oracle");
        Tensor fa, fb;
        oracle_logits(*oracle, A, &fa);
        oracle_logits(*oracle, B, &fb);
        Xa = std::move(fa);
        Xb = std::move(fb);
    }
    if (Xa.cols() != Xb.cols()) throw UsageError("frechet: dimension mismatch");
    int d = static_cast<int>(Xa.cols());
    if (Xa.rows() < Xa.cols() + 1 || Xb.rows() < Xb.cols() + 1)
        throw UsageError("frechet: need at least dim+1 samples per side");
    auto fa = detail::fit_gaussian(Xa);
    auto fb = detail::fit_gaussian(Xb);
    FrechetResult res;
    for (auto* fit : {&fa, &fb}) {
        if (detail::min_eigenvalue(fit->cov, d) < 1e-10) {
            for (int i = 0; i < d; ++i) fit->cov[static_cast<std::size_t>(i) * d + i] += 1e-6;
            res.regularized = true;
        }
    }
    double mean_term = 0;
    for (int j = 0; j < d; ++j) {
        double diff = fa.mean[static_cast<std::size_t>(j)] - fb.mean[static_cast<std::size_t>(j)];
        mean_term += diff * diff;
    }
    auto S = detail::sym_sqrt(fb.cov, d);
    // M = S * cov_A * S, symmetrized against roundoff
    std::vector<double> tmp(static_cast<std::size_t>(d) * d, 0.0);
    std::vector<double> M(static_cast<std::size_t>(d) * d, 0.0);
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0;
            for (int k = 0; k < d; ++k)
                acc += S[static_cast<std::size_t>(i) * d + k] *
                       fa.cov[static_cast<std::size_t>(k) * d + j];
            tmp[static_cast<std::size_t>(i) * d + j] = acc;
        }
    for (int i = 0; i < d; ++i)
        for (int j = 0; j < d; ++j) {
            double acc = 0;
            for (int k = 0; k < d; ++k)
                acc += tmp[static_cast<std::size_t>(i) * d + k] *
                       S[static_cast<std::size_t>(k) * d + j];
            M[static_cast<std::size_t>(i) * d + j] = acc;
        }
    for (int i = 0; i < d; ++i)
        for (int j = i + 1; j < d; ++j) {
            double avg = 0.5 * (M[static_cast<std::size_t>(i) * d + j] +
                                M[static_cast<std::size_t>(j) * d + i]);
            M[static_cast<std::size_t>(i) * d + j] = avg;
            M[static_cast<std::size_t>(j) * d + i] = avg;
        }
    std::vector<double> eig, V;
    detail::jacobi_eig(M, d, eig, V);
    double tr_sqrt = 0;
    for (double lam : eig)
        if (lam > 0) tr_sqrt += std::sqrt(lam);
    double tr_a = 0, tr_b = 0;
    for (int i = 0; i < d; ++i) {
        tr_a += fa.cov[static_cast<std::size_t>(i) * d + i];
        tr_b += fb.cov[static_cast<std::size_t>(i) * d + i];
    }
    res.value = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    if (res.value < 0 && res.value > -1e-6) res.value = 0.0;
    return res;
}

// ---- per-checkpoint evaluation ----

enum class EvalPhase { unlearn, attack };

struct EvalReport {
    long step = 0;
    std::optional<double> ar_mu;
    std::optional<double> ar_dimra;
    std::optional<double> ar_cl;
    std::optional<double> frechet;
    bool frechet_regularized = false;
    int sample_count = 0;
};

struct EvalContext {
    ConditionId unlearn_class = 0;
    ConditionId alternative_class = 1;
    const LabeledSet* retain_reference = nullptr;  // must exclude the unlearning class
    const OracleClassifier* oracle = nullptr;
    float cfg_scale = 2.0f;
    float sample_clip = 20.0f;
    int samples_per_eval = 500;
    bool compute_frechet = true;
    FrechetSpace frechet_space = FrechetSpace::raw;
    std::uint64_t seed = 1;
};

// Generates unlearning-class-conditioned samples and scores them with the
// frozen oracle; optionally also generates per-retain-class samples for the
// distribution distance against the retain reference.
inline EvalReport eval_checkpoint(const EpsilonNet& net, const NoiseSchedule& sched,
                                  EvalPhase phase, long step, const EvalContext& ctx) {
    if (!ctx.oracle) throw UsageError("eval: oracle missing");
    if (!ctx.retain_reference) throw UsageError("eval: retain reference missing");
    if (ctx.retain_reference->contains_label(ctx.unlearn_class))
        throw UsageError("eval: retain reference contains the unlearning class");
    EvalReport rep;
    rep.step = step;
    rep.sample_count = ctx.samples_per_eval;

    SamplerConfig scfg;
    scfg.cfg_scale = ctx.cfg_scale;
    scfg.sample_clip = ctx.sample_clip;
    scfg.seed = derive_seed(ctx.seed, "eval.ar", static_cast<std::uint64_t>(step),
                            phase == EvalPhase::attack ? 1 : 0);
    Tensor samples = generate(net, static_cast<std::size_t>(ctx.samples_per_eval),
                              ctx.unlearn_class, sched, scfg);
    double ar_u = accuracy_rate(samples, ctx.unlearn_class, *ctx.oracle);
    double ar_alt = accuracy_rate(samples, ctx.alternative_class, *ctx.oracle);
    if (phase == EvalPhase::unlearn)
        rep.ar_mu = ar_u;
    else
        rep.ar_dimra = ar_u;
    rep.ar_cl = ar_alt;

    if (ctx.compute_frechet) {
        int C = net.arch.class_count;
        int per_class = (ctx.samples_per_eval + C - 2) / (C - 1);
        std::vector<Tensor> parts;
        std::size_t total = 0;
        for (int c = 0; c < C; ++c) {
            if (c == ctx.unlearn_class) continue;
            SamplerConfig fcfg;
            fcfg.cfg_scale = ctx.cfg_scale;
            fcfg.sample_clip = ctx.sample_clip;
            fcfg.seed = derive_seed(ctx.seed, "eval.frechet", static_cast<std::uint64_t>(step),
                                    static_cast<std::uint64_t>(c));
            parts.push_back(generate(net, static_cast<std::size_t>(per_class), c, sched, fcfg));
            total += parts.back().rows();
        }
        Tensor pooled({total, static_cast<std::size_t>(net.arch.dim)});
        std::size_t row = 0;
        for (const auto& p : parts)
            for (std::size_t i = 0; i < p.rows(); ++i, ++row)
                for (std::size_t j = 0; j < p.cols(); ++j) pooled(row, j) = p(i, j);
        auto fr = frechet_distance(pooled, ctx.retain_reference->points, ctx.frechet_space,
                                   ctx.oracle);
        rep.frechet = fr.value;
        rep.frechet_regularized = fr.regularized;
    }
    return rep;
}

inline nlohmann::json report_to_json(const EvalReport& r) {
    nlohmann::json j;
    j["step"] = r.step;
    j["ar_mu"] = r.ar_mu ? nlohmann::json(*r.ar_mu) : nlohmann::json(nullptr);
    j["ar_dimra"] = r.ar_dimra ? nlohmann::json(*r.ar_dimra) : nlohmann::json(nullptr);
    j["ar_cl"] = r.ar_cl ? nlohmann::json(*r.ar_cl) : nlohmann::json(nullptr);
    j["frechet"] = r.frechet ? nlohmann::json(*r.frechet) : nlohmann::json(nullptr);
    j["frechet_regularized"] = r.frechet_regularized;
    j["sample_count"] = r.sample_count;
    return j;
}

inline void export_curves(const std::vector<EvalReport>& reports,
                          const std::filesystem::path& path) {
    for (std::size_t i = 1; i < reports.size(); ++i)
        if (reports[i].step < reports[i - 1].step)
            throw UsageError("export_curves: reports must be sorted by step");
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    out << "step,ar_mu,ar_dimra,ar_cl,frechet,sample_count\n";
    auto field = [](const std::optional<double>& v) {
        return v ? format_g9(*v) : std::string();
    };
    for (const auto& r : reports)
        out << r.step << "," << field(r.ar_mu) << "," << field(r.ar_dimra) << ","
            << field(r.ar_cl) << "," << field(r.frechet) << "," << r.sample_count << "\n";
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline std::vector<EvalReport> parse_curves(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty curve file");
    std::vector<EvalReport> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::size_t start = 0;
        for (;;) {
            std::size_t comma = line.find(',', start);
            cells.push_back(line.substr(start, comma - start));
            if (comma == std::string::npos) break;
            start = comma + 1;
        }
        if (cells.size() != 6) throw IoError("malformed curve row '" + line + "'");
        EvalReport r;
        r.step = std::strtol(cells[0].c_str(), nullptr, 10);
        auto opt = [](const std::string& s) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return std::strtod(s.c_str(), nullptr);
        };
        r.ar_mu = opt(cells[1]);
        r.ar_dimra = opt(cells[2]);
        r.ar_cl = opt(cells[3]);
        r.frechet = opt(cells[4]);
        r.sample_count = static_cast<int>(std::strtol(cells[5].c_str(), nullptr, 10));
        out.push_back(r);
    }
    return out;
}

}  // namespace unforge
