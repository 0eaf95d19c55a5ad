#pragma once

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "unforge/errors.hpp"
#include "unforge/rng.hpp"
#include "unforge/tensor.hpp"

namespace unforge {

// Condition ids are integers in [0, C]; id C is the reserved null condition
// and never appears in stored data.
using ConditionId = int;

inline ConditionId null_condition(int class_count) { return class_count; }

enum class SetRole { full, retain, unlearn, replacement, auxiliary };

inline const char* role_name(SetRole r) {
    switch (r) {
        case SetRole::full: return "full";
        case SetRole::retain: return "retain";
        case SetRole::unlearn: return "unlearn";
        case SetRole::replacement: return "replacement";
        case SetRole::auxiliary: return "auxiliary";
    }
    return "?";
}

// Role-tagged point set: points[N,d] with one label per row.
struct LabeledSet {
    SetRole role = SetRole::full;
    int class_count = 0;
    Tensor points;            // [N, d]
    std::vector<int> labels;  // values in [0, class_count)

    std::size_t size() const { return labels.size(); }
    std::size_t dim() const { return points.rank() == 2 ? points.cols() : 0; }

    bool contains_label(int c) const {
        for (int l : labels)
            if (l == c) return true;
        return false;
    }
};

struct GaussComponent {
    std::vector<double> mean;
    std::vector<std::vector<double>> cov;  // d x d, positive semi-definite
    double weight = 1.0;
};

struct ClassSpec {
    std::vector<GaussComponent> components;
};

struct MixtureSpec {
    int class_count = 3;
    int dim = 2;
    int samples_per_class = 1000;
    std::vector<ClassSpec> classes;

    void validate() const {
        if (class_count < 2) throw ConfigError("mixture: class_count must be >= 2");
        if (dim < 1) throw ConfigError("mixture: dim must be >= 1");
        if (samples_per_class < 1) throw ConfigError("mixture: samples_per_class must be >= 1");
        if (static_cast<int>(classes.size()) != class_count)
            throw ConfigError("mixture: need one class spec per class");
        for (const auto& cls : classes) {
            if (cls.components.empty()) throw ConfigError("mixture: class without components");
            double wsum = 0;
            for (const auto& comp : cls.components) {
                if (static_cast<int>(comp.mean.size()) != dim)
                    throw ConfigError("mixture: component mean has wrong dimension");
                if (static_cast<int>(comp.cov.size()) != dim)
                    throw ConfigError("mixture: component covariance has wrong dimension");
                for (const auto& row : comp.cov)
                    if (static_cast<int>(row.size()) != dim)
                        throw ConfigError("mixture: covariance is not square");
                if (!(comp.weight > 0)) throw ConfigError("mixture: component weight must be > 0");
                wsum += comp.weight;
            }
            if (!(wsum > 0)) throw ConfigError("mixture: class weights sum to zero");
        }
    }
};

namespace detail {

// Cholesky factor of a PSD matrix; degenerate directions get zero columns.
inline std::vector<std::vector<double>> cholesky_psd(
    const std::vector<std::vector<double>>& a) {
    std::size_t n = a.size();
    std::vector<std::vector<double>> L(n, std::vector<double>(n, 0.0));
    for (std::size_t j = 0; j < n; ++j) {
        double d = a[j][j];
        for (std::size_t k = 0; k < j; ++k) d -= L[j][k] * L[j][k];
        if (d < -1e-9) throw ConfigError("mixture: covariance is not positive semi-definite");
        L[j][j] = d > 0 ? std::sqrt(d) : 0.0;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a[i][j];
            for (std::size_t k = 0; k < j; ++k) s -= L[i][k] * L[j][k];
            L[i][j] = L[j][j] > 0 ? s / L[j][j] : 0.0;
        }
    }
    return L;
}

}  // namespace detail

// n points per class, deterministic in (spec, seed, site).
inline LabeledSet gen_mixture_dataset(const MixtureSpec& spec, std::uint64_t seed,
                                      const char* site = "data.full") {
    spec.validate();
    LabeledSet out;
    out.role = SetRole::full;
    out.class_count = spec.class_count;
    std::size_t n = static_cast<std::size_t>(spec.class_count) *
                    static_cast<std::size_t>(spec.samples_per_class);
    out.points = Tensor({n, static_cast<std::size_t>(spec.dim)});
    out.labels.resize(n);
    std::size_t row = 0;
    for (int c = 0; c < spec.class_count; ++c) {
        const auto& cls = spec.classes[static_cast<std::size_t>(c)];
        double wsum = 0;
        for (const auto& comp : cls.components) wsum += comp.weight;
        std::vector<std::vector<std::vector<double>>> chols;
        for (const auto& comp : cls.components) chols.push_back(detail::cholesky_psd(comp.cov));
        StreamRng rng(seed, site_id(site), static_cast<std::uint64_t>(c));
        for (int i = 0; i < spec.samples_per_class; ++i, ++row) {
            double u = rng.uniform() * wsum;
            std::size_t k = 0;
            for (; k + 1 < cls.components.size(); ++k) {
                if (u < cls.components[k].weight) break;
                u -= cls.components[k].weight;
            }
            const auto& comp = cls.components[k];
            std::vector<double> z(static_cast<std::size_t>(spec.dim));
            for (auto& v : z) v = rng.normal();
            for (int j = 0; j < spec.dim; ++j) {
                double x = comp.mean[static_cast<std::size_t>(j)];
                for (int l = 0; l <= j; ++l)
                    x += chols[k][static_cast<std::size_t>(j)][static_cast<std::size_t>(l)] *
                         z[static_cast<std::size_t>(l)];
                out.points(row, static_cast<std::size_t>(j)) = static_cast<float>(x);
            }
            out.labels[row] = c;
        }
    }
    return out;
}

inline LabeledSet subset_by(const LabeledSet& src, SetRole role,
                            const std::vector<std::size_t>& rows) {
    LabeledSet out;
    out.role = role;
    out.class_count = src.class_count;
    out.points = Tensor({rows.size(), src.dim()});
    out.labels.resize(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < src.dim(); ++j) out.points(i, j) = src.points(rows[i], j);
        out.labels[i] = src.labels[rows[i]];
    }
    return out;
}

// D_u = items with the unlearning label, D_r = everything else.
inline std::pair<LabeledSet, LabeledSet> split_unlearn_retain(const LabeledSet& full,
                                                              ConditionId unlearn_class) {
    if (!full.contains_label(unlearn_class))
        throw ConfigError("split: class " + std::to_string(unlearn_class) +
                          " not present in dataset");
    std::vector<std::size_t> u_rows, r_rows;
    for (std::size_t i = 0; i < full.size(); ++i)
        (full.labels[i] == unlearn_class ? u_rows : r_rows).push_back(i);
    return {subset_by(full, SetRole::unlearn, u_rows), subset_by(full, SetRole::retain, r_rows)};
}

// Replacement pairs: points drawn uniformly with replacement from the
// alternative-class rows of D_r, all conditioned on the unlearning class.
inline LabeledSet build_du_prime(const LabeledSet& d_r, const LabeledSet& d_u,
                                 ConditionId alternative_class, std::size_t count,
                                 std::uint64_t seed) {
    if (d_r.size() == 0 || d_u.size() == 0)
        throw UsageError("build_du_prime: empty source set");
    if (count < 1) throw UsageError("build_du_prime: count must be >= 1");
    ConditionId unlearn_class = d_u.labels[0];
    if (alternative_class == unlearn_class)
        throw ConfigError("build_du_prime: alternative class equals the unlearning class");
    std::vector<std::size_t> alt_rows;
    for (std::size_t i = 0; i < d_r.size(); ++i)
        if (d_r.labels[i] == alternative_class) alt_rows.push_back(i);
    if (alt_rows.empty())
        throw ConfigError("build_du_prime: alternative class " +
                          std::to_string(alternative_class) + " absent from retain set");
    LabeledSet out;
    out.role = SetRole::replacement;
    out.class_count = d_r.class_count;
    out.points = Tensor({count, d_r.dim()});
    out.labels.assign(count, unlearn_class);
    StreamRng rng(seed, site_id("data.du_prime"));
    for (std::size_t i = 0; i < count; ++i) {
        std::size_t src = alt_rows[rng.uniform_int(alt_rows.size())];
        for (std::size_t j = 0; j < d_r.dim(); ++j) out.points(i, j) = d_r.points(src, j);
    }
    return out;
}

// "next class" convention for the replacement condition
inline ConditionId default_alternative_class(ConditionId unlearn_class, int class_count) {
    return (unlearn_class + 1) % class_count;
}

inline LabeledSet aux_from_retain(const LabeledSet& d_r) {
    LabeledSet out = d_r;
    out.role = SetRole::auxiliary;
    return out;
}

inline LabeledSet aux_from_heldout(const LabeledSet& heldout, ConditionId unlearn_class) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < heldout.size(); ++i)
        if (heldout.labels[i] != unlearn_class) rows.push_back(i);
    if (rows.empty()) throw UsageError("aux_from_heldout: nothing left after exclusion");
    return subset_by(heldout, SetRole::auxiliary, rows);
}

// ---- dataset CSV: header x1,...,xd,label; 9 significant digits ----

inline std::string format_g9(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.9g", v);
    return buf;
}

inline void write_dataset_csv(const std::filesystem::path& path, const LabeledSet& set) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
    for (std::size_t j = 0; j < set.dim(); ++j) out << "x" << (j + 1) << ",";
    out << "label\n";
    for (std::size_t i = 0; i < set.size(); ++i) {
        for (std::size_t j = 0; j < set.dim(); ++j) out << format_g9(set.points(i, j)) << ",";
        out << set.labels[i] << "\n";
    }
    if (!out) throw IoError("write failed for '" + path.string() + "'");
}

inline LabeledSet read_dataset_csv(const std::filesystem::path& path, int class_count,
                                   SetRole role = SetRole::full) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open '" + path.string() + "'");
    std::string line;
    if (!std::getline(in, line)) throw IoError("empty dataset file '" + path.string() + "'");
    std::size_t dim = 0;
    for (std::size_t pos = 0; (pos = line.find(',', pos)) != std::string::npos; ++pos) ++dim;
    if (dim == 0) throw IoError("malformed dataset header in '" + path.string() + "'");
    std::vector<float> values;
    std::vector<int> labels;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t start = 0;
        for (std::size_t j = 0; j < dim; ++j) {
            std::size_t comma = line.find(',', start);
            if (comma == std::string::npos)
                throw IoError("short row in dataset '" + path.string() + "'");
            values.push_back(std::strtof(line.c_str() + start, nullptr));
            start = comma + 1;
        }
        labels.push_back(static_cast<int>(std::strtol(line.c_str() + start, nullptr, 10)));
    }
    LabeledSet set;
    set.role = role;
    set.class_count = class_count;
    set.labels = std::move(labels);
    set.points = Tensor({set.labels.size(), dim}, std::move(values));
    for (int l : set.labels)
        if (l < 0 || l >= class_count)
            throw IoError("dataset label outside [0," + std::to_string(class_count) + ") in '" +
                          path.string() + "'");
    return set;
}

}  // namespace unforge
