#pragma once

#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>
#include <vector>

#include "unforge/errors.hpp"
#include "unforge/param_store.hpp"
#include "unforge/tensor.hpp"

namespace unforge {

// Shared dense kernels. The taped graph and the no-grad inference path both
// call these, so the two paths produce bit-identical values.
namespace kernels {

// y[M,N] = x[M,K] * w[K,N]
template <typename T>
void gemm(const T* x, const T* w, T* y, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        T* yi = y + i * N;
        std::memset(yi, 0, sizeof(T) * N);
        const T* xi = x + i * K;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = xi[k];
            const T* wk = w + k * N;
            for (std::size_t j = 0; j < N; ++j) yi[j] += a * wk[j];
        }
    }
}

// y[M,N] += x[M,K] * w[N,K]^T  (i.e. x times w transposed)
template <typename T>
void gemm_nt_acc(const T* x, const T* w, T* y, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* xi = x + i * K;
        T* yi = y + i * N;
        for (std::size_t j = 0; j < N; ++j) {
            const T* wj = w + j * K;
            T acc = 0;
            for (std::size_t k = 0; k < K; ++k) acc += xi[k] * wj[k];
            yi[j] += acc;
        }
    }
}

// y[K,N] += x[M,K]^T * g[M,N]
template <typename T>
void gemm_tn_acc(const T* x, const T* g, T* y, std::size_t M, std::size_t K, std::size_t N) {
    for (std::size_t i = 0; i < M; ++i) {
        const T* xi = x + i * K;
        const T* gi = g + i * N;
        for (std::size_t k = 0; k < K; ++k) {
            const T a = xi[k];
            T* yk = y + k * N;
            for (std::size_t j = 0; j < N; ++j) yk[j] += a * gi[j];
        }
    }
}

template <typename T>
T sigmoid(T x) {
    return T(1) / (T(1) + std::exp(-x));
}

}  // namespace kernels

enum class Op {
    input,
    param,
    matmul,
    add,
    mul,
    scale,
    affine,
    relu,
    silu,
    sine,
    cosine,
    concat,
    embed,
    mse,
    cross_entropy,
    detach,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::input: return "input";
        case Op::param: return "param";
        case Op::matmul: return "matmul";
        case Op::add: return "add";
        case Op::mul: return "mul";
        case Op::scale: return "scale";
        case Op::affine: return "affine";
        case Op::relu: return "relu";
        case Op::silu: return "silu";
        case Op::sine: return "sine";
        case Op::cosine: return "cosine";
        case Op::concat: return "concat";
        case Op::embed: return "embed";
        case Op::mse: return "mse";
        case Op::cross_entropy: return "cross_entropy";
        case Op::detach: return "detach";
    }
    return "?";
}

// Values captured at detach nodes so a finite-difference oracle can replay
// them as constants while the rest of the graph is rebuilt at perturbed
// parameters.
template <typename T>
struct DetachCacheT {
    enum class Mode { record, replay };
    Mode mode = Mode::record;
    std::vector<TensorT<T>> values;
    std::size_t cursor = 0;
};

// Eager tape. Ops evaluate on construction and record what backward needs.
// One graph per loss evaluation; single-threaded.
template <typename T>
class GraphT {
public:
    using Id = int;

    struct Node {
        Op op;
        std::vector<Id> args;
        TensorT<T> value;
        TensorT<T> grad;
        bool needs_grad = false;
        std::vector<int> idx;          // embed indices / cross-entropy labels
        double c = 0.0;                // scale factor
        ParamStoreT<T>* store = nullptr;
        int seg = -1;
    };

    bool check_finite = true;
    DetachCacheT<T>* detach_cache = nullptr;

    Id input(TensorT<T> v) {
        Node n;
        n.op = Op::input;
        n.value = std::move(v);
        return push(std::move(n));
    }

    Id param(ParamStoreT<T>& store, const std::string& name) {
        int seg = store.index_of(name);
        if (seg < 0) throw UsageError("graph: unknown param segment '" + name + "'");
        Node n;
        n.op = Op::param;
        n.value = store.segments[seg].value;
        n.needs_grad = true;
        n.store = &store;
        n.seg = seg;
        return push(std::move(n));
    }

    Id matmul(Id a, Id b) {
        const auto& A = at(a).value;
        const auto& B = at(b).value;
        if (A.rank() != 2 || B.rank() != 2 || A.cols() != B.rows())
            fail_shape("matmul", {a, b});
        Node n = make(Op::matmul, {a, b});
        n.value = TensorT<T>({A.rows(), B.cols()});
        kernels::gemm(A.data.data(), B.data.data(), n.value.data.data(), A.rows(), A.cols(),
                      B.cols());
        return push(std::move(n));
    }

    Id add(Id a, Id b) {
        if (!at(a).value.same_shape(at(b).value)) fail_shape("add", {a, b});
        Node n = make(Op::add, {a, b});
        n.value = at(a).value;
        const auto& B = at(b).value;
        for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] += B.data[i];
        return push(std::move(n));
    }

    Id mul(Id a, Id b) {
        if (!at(a).value.same_shape(at(b).value)) fail_shape("mul", {a, b});
        Node n = make(Op::mul, {a, b});
        n.value = at(a).value;
        const auto& B = at(b).value;
        for (std::size_t i = 0; i < n.value.numel(); ++i) n.value.data[i] *= B.data[i];
        return push(std::move(n));
    }

    Id scale(Id a, double c) {
        Node n = make(Op::scale, {a});
        n.c = c;
        n.value = at(a).value;
        for (auto& v : n.value.data) v = static_cast<T>(c * static_cast<double>(v));
        return push(std::move(n));
    }

    // x[M,K] * w[K,N] + b[N]
    Id affine(Id x, Id w, Id b) {
        const auto& X = at(x).value;
        const auto& W = at(w).value;
        const auto& B = at(b).value;
        if (X.rank() != 2 || W.rank() != 2 || X.cols() != W.rows() || B.numel() != W.cols())
            fail_shape("affine", {x, w, b});
        Node n = make(Op::affine, {x, w, b});
        n.value = TensorT<T>({X.rows(), W.cols()});
        kernels::gemm(X.data.data(), W.data.data(), n.value.data.data(), X.rows(), X.cols(),
                      W.cols());
        for (std::size_t i = 0; i < X.rows(); ++i)
            for (std::size_t j = 0; j < W.cols(); ++j) n.value(i, j) += B.data[j];
        return push(std::move(n));
    }

    Id relu(Id a) {
        Node n = make(Op::relu, {a});
        n.value = at(a).value;
        for (auto& v : n.value.data) v = v > T(0) ? v : T(0);
        return push(std::move(n));
    }

    Id silu(Id a) {
        Node n = make(Op::silu, {a});
        n.value = at(a).value;
        for (auto& v : n.value.data) v = v * kernels::sigmoid(v);
        return push(std::move(n));
    }

    Id sine(Id a) {
        Node n = make(Op::sine, {a});
        n.value = at(a).value;
        for (auto& v : n.value.data) v = std::sin(v);
        return push(std::move(n));
    }

    Id cosine(Id a) {
        Node n = make(Op::cosine, {a});
        n.value = at(a).value;
        for (auto& v : n.value.data) v = std::cos(v);
        return push(std::move(n));
    }

    // concatenate rank-2 tensors with equal row counts along the last axis
    Id concat(const std::vector<Id>& parts) {
        if (parts.empty()) throw GraphError("concat: no inputs");
        std::size_t rows = at(parts[0]).value.rows();
        std::size_t cols = 0;
        for (Id p : parts) {
            const auto& V = at(p).value;
            if (V.rank() != 2 || V.rows() != rows) fail_shape("concat", parts);
            cols += V.cols();
        }
        Node n = make(Op::concat, parts);
        n.value = TensorT<T>({rows, cols});
        std::size_t off = 0;
        for (Id p : parts) {
            const auto& V = at(p).value;
            for (std::size_t i = 0; i < rows; ++i)
                std::memcpy(&n.value(i, off), &V(i, 0), V.cols() * sizeof(T));
            off += V.cols();
        }
        return push(std::move(n));
    }

    // rows of table[R,E] selected by indices -> [B,E]
    Id embed(Id table, const std::vector<int>& indices) {
        const auto& Tb = at(table).value;
        if (Tb.rank() != 2) fail_shape("embed", {table});
        std::size_t R = Tb.rows(), E = Tb.cols();
        for (int ix : indices)
            if (ix < 0 || static_cast<std::size_t>(ix) >= R)
                throw UsageError("embed: index " + std::to_string(ix) + " out of range [0," +
                                 std::to_string(R) + ")");
        Node n = make(Op::embed, {table});
        n.idx = indices;
        n.value = TensorT<T>({indices.size(), E});
        for (std::size_t i = 0; i < indices.size(); ++i)
            std::memcpy(&n.value(i, 0), &Tb(static_cast<std::size_t>(n.idx[i]), 0), E * sizeof(T));
        return push(std::move(n));
    }

    // mean over all elements of (a - b)^2, scalar output
    Id mse(Id a, Id b) {
        if (!at(a).value.same_shape(at(b).value)) fail_shape("mse", {a, b});
        Node n = make(Op::mse, {a, b});
        const auto& A = at(a).value;
        const auto& B = at(b).value;
        double acc = 0;
        for (std::size_t i = 0; i < A.numel(); ++i) {
            double d = static_cast<double>(A.data[i]) - static_cast<double>(B.data[i]);
            acc += d * d;
        }
        n.value = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(A.numel())));
        return push(std::move(n));
    }

    // mean over rows of (logsumexp(logits_i) - logits_i[label_i]), scalar output
    Id cross_entropy(Id logits, const std::vector<int>& labels) {
        const auto& Z = at(logits).value;
        if (Z.rank() != 2 || Z.rows() != labels.size()) fail_shape("cross_entropy", {logits});
        for (int y : labels)
            if (y < 0 || static_cast<std::size_t>(y) >= Z.cols())
                throw UsageError("cross_entropy: label out of range");
        Node n = make(Op::cross_entropy, {logits});
        n.idx = labels;
        double acc = 0;
        for (std::size_t i = 0; i < Z.rows(); ++i) {
            double zmax = Z(i, 0);
            for (std::size_t j = 1; j < Z.cols(); ++j) zmax = std::max(zmax, (double)Z(i, j));
            double lse = 0;
            for (std::size_t j = 0; j < Z.cols(); ++j) lse += std::exp((double)Z(i, j) - zmax);
            lse = zmax + std::log(lse);
            acc += lse - static_cast<double>(Z(i, static_cast<std::size_t>(labels[i])));
        }
        n.value = TensorT<T>::scalar(static_cast<T>(acc / static_cast<double>(Z.rows())));
        return push(std::move(n));
    }

    // forward identity; gradients do not flow past it
    Id detach(Id a) {
        Node n;
        n.op = Op::detach;
        n.args = {a};
        n.needs_grad = false;
        if (detach_cache && detach_cache->mode == DetachCacheT<T>::Mode::replay) {
            if (detach_cache->cursor >= detach_cache->values.size())
                throw GraphError("detach: replay cache exhausted");
            n.value = detach_cache->values[detach_cache->cursor++];
            if (!n.value.same_shape(at(a).value))
                throw GraphError("detach: replay cache shape mismatch");
        } else {
            n.value = at(a).value;
            if (detach_cache) detach_cache->values.push_back(n.value);
        }
        return push(std::move(n));
    }

    const TensorT<T>& value(Id id) const { return at(id).value; }

    const TensorT<T>& grad(Id id) const { return at(id).grad; }

    std::size_t node_count() const { return nodes_.size(); }

    // Accumulates d(root)/d(segment) into each param segment's grad buffer.
    // Root must be scalar. Does not zero grads; the caller owns that.
    void backward(Id root) {
        Node& r = at(root);
        if (r.value.numel() != 1)
            throw GraphError("backward: root node " + std::to_string(root) + " (" +
                             op_name(r.op) + ") is not scalar, shape " + shape_str(r.value));
        if (!r.needs_grad) return;  // no parameter reaches the root
        for (Id i = 0; i <= root; ++i) at(i).grad = TensorT<T>();
        r.grad = TensorT<T>::scalar(T(1));
        for (Id i = root; i >= 0; --i) {
            Node& n = at(i);
            if (!n.needs_grad || n.grad.numel() == 0) continue;
            propagate(n);
            if (n.op == Op::param) {
                auto& g = n.store->segments[n.seg].grad;
                for (std::size_t k = 0; k < g.numel(); ++k) g.data[k] += n.grad.data[k];
            }
        }
    }

private:
    std::vector<Node> nodes_;

    Node& at(Id id) { return nodes_[static_cast<std::size_t>(id)]; }
    const Node& at(Id id) const { return nodes_[static_cast<std::size_t>(id)]; }

    Node make(Op op, std::vector<Id> args) {
        Node n;
        n.op = op;
        for (Id a : args)
            if (a < 0 || a >= static_cast<Id>(nodes_.size()))
                throw GraphError(std::string("graph: bad argument id for ") + op_name(op));
        n.needs_grad = false;
        for (Id a : args) n.needs_grad = n.needs_grad || at(a).needs_grad;
        n.args = std::move(args);
        return n;
    }

    Id push(Node n) {
        Id id = static_cast<Id>(nodes_.size());
        if (check_finite && !n.value.all_finite())
            throw NumericError("graph: non-finite value at node " + std::to_string(id) + " (" +
                               op_name(n.op) + ")");
        nodes_.push_back(std::move(n));
        return id;
    }

    [[noreturn]] void fail_shape(const char* what, const std::vector<Id>& args) {
        std::string msg = std::string("graph: shape mismatch in ") + what + " at node " +
                          std::to_string(nodes_.size()) + "; args";
        for (Id a : args) msg += " " + std::to_string(a) + ":" + shape_str(at(a).value);
        throw GraphError(msg);
    }

    TensorT<T>& grad_buf(Id id) {
        Node& n = at(id);
        if (n.grad.numel() == 0) n.grad = TensorT<T>::zeros(n.value.shape);
        return n.grad;
    }

    void propagate(Node& n) {
        const TensorT<T>& g = n.grad;
        switch (n.op) {
            case Op::input:
            case Op::param:
            case Op::detach:
                break;
            case Op::matmul: {
                const auto& A = at(n.args[0]).value;
                const auto& B = at(n.args[1]).value;
                if (at(n.args[0]).needs_grad)
                    kernels::gemm_nt_acc(g.data.data(), B.data.data(),
                                         grad_buf(n.args[0]).data.data(), A.rows(), B.cols(),
                                         A.cols());
                if (at(n.args[1]).needs_grad)
                    kernels::gemm_tn_acc(A.data.data(), g.data.data(),
                                         grad_buf(n.args[1]).data.data(), A.rows(), A.cols(),
                                         B.cols());
                break;
            }
            case Op::add:
                for (int s = 0; s < 2; ++s)
                    if (at(n.args[s]).needs_grad) {
                        auto& dst = grad_buf(n.args[s]);
                        for (std::size_t i = 0; i < g.numel(); ++i) dst.data[i] += g.data[i];
                    }
                break;
            case Op::mul:
                for (int s = 0; s < 2; ++s)
                    if (at(n.args[s]).needs_grad) {
                        const auto& other = at(n.args[1 - s]).value;
                        auto& dst = grad_buf(n.args[s]);
                        for (std::size_t i = 0; i < g.numel(); ++i)
                            dst.data[i] += g.data[i] * other.data[i];
                    }
                break;
            case Op::scale:
                if (at(n.args[0]).needs_grad) {
                    auto& dst = grad_buf(n.args[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        dst.data[i] += static_cast<T>(n.c * static_cast<double>(g.data[i]));
                }
                break;
            case Op::affine: {
                const auto& X = at(n.args[0]).value;
                const auto& W = at(n.args[1]).value;
                if (at(n.args[0]).needs_grad)
                    kernels::gemm_nt_acc(g.data.data(), W.data.data(),
                                         grad_buf(n.args[0]).data.data(), X.rows(), W.cols(),
                                         X.cols());
                if (at(n.args[1]).needs_grad)
                    kernels::gemm_tn_acc(X.data.data(), g.data.data(),
                                         grad_buf(n.args[1]).data.data(), X.rows(), X.cols(),
                                         W.cols());
                if (at(n.args[2]).needs_grad) {
                    auto& db = grad_buf(n.args[2]);
                    for (std::size_t i = 0; i < X.rows(); ++i)
                        for (std::size_t j = 0; j < W.cols(); ++j) db.data[j] += g(i, j);
                }
                break;
            }
            case Op::relu:
                if (at(n.args[0]).needs_grad) {
                    const auto& X = at(n.args[0]).value;
                    auto& dst = grad_buf(n.args[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        if (X.data[i] > T(0)) dst.data[i] += g.data[i];
                }
                break;
            case Op::silu:
                if (at(n.args[0]).needs_grad) {
                    const auto& X = at(n.args[0]).value;
                    auto& dst = grad_buf(n.args[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i) {
                        T s = kernels::sigmoid(X.data[i]);
                        dst.data[i] += g.data[i] * (s * (T(1) + X.data[i] * (T(1) - s)));
                    }
                }
                break;
            case Op::sine:
                if (at(n.args[0]).needs_grad) {
                    const auto& X = at(n.args[0]).value;
                    auto& dst = grad_buf(n.args[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        dst.data[i] += g.data[i] * std::cos(X.data[i]);
                }
                break;
            case Op::cosine:
                if (at(n.args[0]).needs_grad) {
                    const auto& X = at(n.args[0]).value;
                    auto& dst = grad_buf(n.args[0]);
                    for (std::size_t i = 0; i < g.numel(); ++i)
                        dst.data[i] -= g.data[i] * std::sin(X.data[i]);
                }
                break;
            case Op::concat: {
                std::size_t off = 0;
                std::size_t rows = n.value.rows();
                std::size_t total = n.value.cols();
                for (Id p : n.args) {
                    const auto& V = at(p).value;
                    if (at(p).needs_grad) {
                        auto& dst = grad_buf(p);
                        for (std::size_t i = 0; i < rows; ++i)
                            for (std::size_t j = 0; j < V.cols(); ++j)
                                dst(i, j) += g.data[i * total + off + j];
                    }
                    off += V.cols();
                }
                break;
            }
            case Op::embed:
                if (at(n.args[0]).needs_grad) {
                    auto& dst = grad_buf(n.args[0]);
                    std::size_t E = n.value.cols();
                    for (std::size_t i = 0; i < n.idx.size(); ++i)
                        for (std::size_t j = 0; j < E; ++j)
                            dst(static_cast<std::size_t>(n.idx[i]), j) += g(i, j);
                }
                break;
            case Op::mse: {
                const auto& A = at(n.args[0]).value;
                const auto& B = at(n.args[1]).value;
                T go = g.data[0];
                T inv = static_cast<T>(2.0 / static_cast<double>(A.numel()));
                if (at(n.args[0]).needs_grad) {
                    auto& dst = grad_buf(n.args[0]);
                    for (std::size_t i = 0; i < A.numel(); ++i)
                        dst.data[i] += go * inv * (A.data[i] - B.data[i]);
                }
                if (at(n.args[1]).needs_grad) {
                    auto& dst = grad_buf(n.args[1]);
                    for (std::size_t i = 0; i < A.numel(); ++i)
                        dst.data[i] -= go * inv * (A.data[i] - B.data[i]);
                }
                break;
            }
            case Op::cross_entropy: {
                if (!at(n.args[0]).needs_grad) break;
                const auto& Z = at(n.args[0]).value;
                auto& dst = grad_buf(n.args[0]);
                T go = n.grad.data[0];
                T invB = static_cast<T>(1.0 / static_cast<double>(Z.rows()));
                for (std::size_t i = 0; i < Z.rows(); ++i) {
                    double zmax = Z(i, 0);
                    for (std::size_t j = 1; j < Z.cols(); ++j)
                        zmax = std::max(zmax, (double)Z(i, j));
                    double denom = 0;
                    for (std::size_t j = 0; j < Z.cols(); ++j)
                        denom += std::exp((double)Z(i, j) - zmax);
                    for (std::size_t j = 0; j < Z.cols(); ++j) {
                        T p = static_cast<T>(std::exp((double)Z(i, j) - zmax) / denom);
                        T onehot = (static_cast<std::size_t>(n.idx[i]) == j) ? T(1) : T(0);
                        dst(i, j) += go * invB * (p - onehot);
                    }
                }
                break;
            }
        }
    }
};

using Graph = GraphT<float>;
using DetachCache = DetachCacheT<float>;

}  // namespace unforge
